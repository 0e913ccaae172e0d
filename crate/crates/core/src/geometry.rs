//! Differentiable projective geometry: axis-angle rotations, rigid world
//! transforms, trilinear splatting into a world grid, camera matrices and
//! bilinear re-projection to 2D.
//!
//! Conventions used throughout:
//! - point coordinates are stored as `[3, m, n]` tensors; component 0 indexes
//!   the grid's `m` axis, component 1 the `n` axis, component 2 depth;
//! - a world grid is `[C, d_z, m_w, n_w]`;
//! - interpolation weights are the tent kernel `max(0, 1 - |d|)`.
//!
//! Each kernel exists as a plain function (used by oracles and the web demo)
//! and as a tape operation on [`Var`]s.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type Mat3<F> = [[F; 3]; 3];

/// Homogeneous coordinates with `|w|` below this are dropped by projection.
pub const PERSPECTIVE_EPS: f64 = 1e-4;

/// Grid extents `(d_z, m_w, n_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridExtents {
    pub depth: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridExtents {
    pub fn new(depth: usize, rows: usize, cols: usize) -> Result<Self> {
        if depth == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "grid extents must be positive, got ({depth}, {rows}, {cols})"
            )));
        }
        Ok(GridExtents { depth, rows, cols })
    }

    /// Extent of the axis addressed by point component `k`.
    pub fn axis(&self, k: usize) -> usize {
        [self.rows, self.cols, self.depth][k]
    }
}

pub fn identity<F: Real>() -> Mat3<F> {
    let mut m = [[F::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = F::one();
    }
    m
}

pub fn matmul3<F: Real>(a: &Mat3<F>, b: &Mat3<F>) -> Mat3<F> {
    let mut c = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose3<F: Real>(a: &Mat3<F>) -> Mat3<F> {
    let mut t = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det3<F: Real>(a: &Mat3<F>) -> F {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn mat_vec<F: Real>(a: &Mat3<F>, v: [F; 3]) -> [F; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn skew<F: Real>(v: [F; 3]) -> Mat3<F> {
    let z = F::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

/// Rodrigues coefficients `(a, b, c1, c2)` where
/// `a = sin t / t`, `b = (1 - cos t) / t^2`, `c1 = a'(t)/t`, `c2 = b'(t)/t`.
fn rodrigues_coeffs<F: Real>(theta2: F) -> (F, F, F, F) {
    let t2 = theta2.f64();
    if t2 < 1e-2 {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0;
        let c1 = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0;
        let c2 = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0;
        (F::of(a), F::of(b), F::of(c1), F::of(c2))
    } else {
        let t = theta2.sqrt();
        let (s, c) = (t.sin(), t.cos());
        let a = s / t;
        let b = (F::one() - c) / theta2;
        let c1 = (t * c - s) / (theta2 * t);
        let c2 = (t * s - F::of(2.0) * (F::one() - c)) / (theta2 * theta2);
        (a, b, c1, c2)
    }
}

/// `R = I + a [v]x + b [v]x^2`.
pub fn rotation_from_axis_angle<F: Real>(v: [F; 3]) -> Mat3<F> {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (a, b, _, _) = rodrigues_coeffs(theta2);
    let k = skew(v);
    let k2 = matmul3(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `dR / dv_k` for `k = 0..3`.
pub fn rotation_jacobian<F: Real>(v: [F; 3]) -> [Mat3<F>; 3] {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (a, b, c1, c2) = rodrigues_coeffs(theta2);
    let k = skew(v);
    let k2 = matmul3(&k, &k);
    let mut out = [[[F::zero(); 3]; 3]; 3];
    for (axis, d) in out.iter_mut().enumerate() {
        let mut e = [F::zero(); 3];
        e[axis] = F::one();
        let ek = skew(e);
        let ekk = matmul3(&ek, &k);
        let kek = matmul3(&k, &ek);
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = c1 * v[axis] * k[i][j]
                    + a * ek[i][j]
                    + c2 * v[axis] * k2[i][j]
                    + b * (ekk[i][j] + kek[i][j]);
            }
        }
    }
    out
}

fn check_points<F: Real>(points: &Tensor<F>, what: &str) -> Result<(usize, usize)> {
    match points.shape() {
        [3, m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("{what}: expected [3, m, n] points, got {s:?}"))),
    }
}

fn point_at<F: Real>(p: &[F], hw: usize, idx: usize) -> [F; 3] {
    [p[idx], p[hw + idx], p[2 * hw + idx]]
}

/// `p_w = R^T (p + t)` for every pixel. Points are not clamped.
pub fn rigid_world_transform<F: Real>(points: &Tensor<F>, rot: &Mat3<F>, t: [F; 3]) -> Result<Tensor<F>> {
    let (m, n) = check_points(points, "rigid_world_transform")?;
    let hw = m * n;
    let rt = transpose3(rot);
    let p = points.data();
    let mut out = vec![F::zero(); 3 * hw];
    for idx in 0..hw {
        let q = point_at(p, hw, idx);
        let w = mat_vec(&rt, [q[0] + t[0], q[1] + t[1], q[2] + t[2]]);
        for k in 0..3 {
            out[k * hw + idx] = w[k];
        }
    }
    Ok(Tensor::from_parts(vec![3, m, n], out))
}

/// Lower corner and fractional offset of a coordinate.
#[inline]
fn cell<F: Real>(p: F) -> (isize, F) {
    let f = p.floor();
    (f.to_isize().unwrap_or(isize::MIN / 2), p - f)
}

/// Visits the (up to) 8 grid corners around `p` that lie in the grid, with
/// their weight and the weight derivatives with respect to each component.
#[inline]
fn for_each_corner<F: Real>(p: [F; 3], ext: GridExtents, mut visit: impl FnMut(usize, F, [F; 3])) {
    if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
        return;
    }
    let (x0, fx) = cell(p[0]);
    let (y0, fy) = cell(p[1]);
    let (z0, fz) = cell(p[2]);
    let one = F::one();
    for dz in 0..2isize {
        let z = z0 + dz;
        if z < 0 || z >= ext.depth as isize {
            continue;
        }
        let (wz, gz) = if dz == 0 { (one - fz, -one) } else { (fz, one) };
        for dx in 0..2isize {
            let x = x0 + dx;
            if x < 0 || x >= ext.rows as isize {
                continue;
            }
            let (wx, gx) = if dx == 0 { (one - fx, -one) } else { (fx, one) };
            for dy in 0..2isize {
                let y = y0 + dy;
                if y < 0 || y >= ext.cols as isize {
                    continue;
                }
                let (wy, gy) = if dy == 0 { (one - fy, -one) } else { (fy, one) };
                let flat = ((z as usize) * ext.rows + x as usize) * ext.cols + y as usize;
                visit(flat, wx * wy * wz, [gx * wy * wz, wx * gy * wz, wx * wy * gz]);
            }
        }
    }
}

/// Trilinear splat of `slice` (`[C, m, n]`) placed at `world_points`
/// (`[3, m, n]`) into a `[C, d_z, m_w, n_w]` grid.
pub fn splat_to_world<F: Real>(slice: &Tensor<F>, world_points: &Tensor<F>, ext: GridExtents) -> Result<Tensor<F>> {
    let (m, n) = check_points(world_points, "splat_to_world")?;
    let c = match slice.shape() {
        [c, sm, sn] if *sm == m && *sn == n => *c,
        s => return Err(Error::shape(format!("splat_to_world: slice {s:?} vs points [3, {m}, {n}]"))),
    };
    let hw = m * n;
    let cells = ext.depth * ext.rows * ext.cols;
    let mut grid = vec![F::zero(); c * cells];
    let (src, p) = (slice.data(), world_points.data());
    for idx in 0..hw {
        for_each_corner(point_at(p, hw, idx), ext, |flat, w, _| {
            for ch in 0..c {
                grid[ch * cells + flat] += w * src[ch * hw + idx];
            }
        });
    }
    Ok(Tensor::from_parts(vec![c, ext.depth, ext.rows, ext.cols], grid))
}

/// Gradients of [`splat_to_world`] with respect to `(slice, world_points)`.
pub fn splat_to_world_backward<F: Real>(
    slice: &Tensor<F>,
    world_points: &Tensor<F>,
    ext: GridExtents,
    grad_grid: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let c = slice.shape()[0];
    let (m, n) = (slice.shape()[1], slice.shape()[2]);
    let hw = m * n;
    let cells = ext.depth * ext.rows * ext.cols;
    let (src, p, gg) = (slice.data(), world_points.data(), grad_grid.data());
    let mut gs = vec![F::zero(); c * hw];
    let mut gp = vec![F::zero(); 3 * hw];
    for idx in 0..hw {
        let mut acc = [F::zero(); 3];
        for_each_corner(point_at(p, hw, idx), ext, |flat, w, dw| {
            let mut inner = F::zero();
            for ch in 0..c {
                let g = gg[ch * cells + flat];
                gs[ch * hw + idx] += w * g;
                inner += g * src[ch * hw + idx];
            }
            for k in 0..3 {
                acc[k] += dw[k] * inner;
            }
        });
        for k in 0..3 {
            gp[k * hw + idx] = acc[k];
        }
    }
    (
        Tensor::from_parts(slice.shape().to_vec(), gs),
        Tensor::from_parts(world_points.shape().to_vec(), gp),
    )
}

/// Camera parameters: rotation (axis-angle), positive scales and offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<F> {
    pub rot_axis_angle: [F; 3],
    pub s_x: F,
    pub s_y: F,
    pub x_0: F,
    pub y_0: F,
}

impl<F: Real> CameraIntrinsics<F> {
    pub fn canonical() -> Self {
        CameraIntrinsics {
            rot_axis_angle: [F::zero(); 3],
            s_x: F::one(),
            s_y: F::one(),
            x_0: F::zero(),
            y_0: F::zero(),
        }
    }

    /// Packed as `[rx, ry, rz, s_x, s_y, x_0, y_0]`.
    pub fn to_vec(&self) -> Vec<F> {
        let r = self.rot_axis_angle;
        vec![r[0], r[1], r[2], self.s_x, self.s_y, self.x_0, self.y_0]
    }

    pub fn from_slice(v: &[F]) -> Result<Self> {
        if v.len() != 7 {
            return Err(Error::shape(format!("camera intrinsics need 7 values, got {}", v.len())));
        }
        Ok(CameraIntrinsics {
            rot_axis_angle: [v[0], v[1], v[2]],
            s_x: v[3],
            s_y: v[4],
            x_0: v[5],
            y_0: v[6],
        })
    }

    fn affine(&self) -> Mat3<F> {
        let (z, o) = (F::zero(), F::one());
        [[self.s_x, z, self.x_0], [z, self.s_y, self.y_0], [z, z, o]]
    }
}

/// `K = R(rot) * [[s_x, 0, x_0], [0, s_y, y_0], [0, 0, 1]]`.
pub fn camera_matrix<F: Real>(intr: &CameraIntrinsics<F>) -> Mat3<F> {
    matmul3(&rotation_from_axis_angle(intr.rot_axis_angle), &intr.affine())
}

/// Gradient of [`camera_matrix`] packed like [`CameraIntrinsics::to_vec`].
pub fn camera_matrix_backward<F: Real>(intr: &CameraIntrinsics<F>, grad_k: &Mat3<F>) -> [F; 7] {
    let r = rotation_from_axis_angle(intr.rot_axis_angle);
    let a = intr.affine();
    // dA = R^T dK, dR = dK A^T
    let da = matmul3(&transpose3(&r), grad_k);
    let dr = matmul3(grad_k, &transpose3(&a));
    let jac = rotation_jacobian(intr.rot_axis_angle);
    let mut out = [F::zero(); 7];
    for (k, jk) in jac.iter().enumerate() {
        out[k] = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| dr[i][j] * jk[i][j]).sum();
    }
    out[3] = da[0][0];
    out[4] = da[1][1];
    out[5] = da[0][2];
    out[6] = da[1][2];
    out
}

/// Perspective-divided image position of a world point, or `None` when the
/// homogeneous coordinate is too close to zero.
#[inline]
fn project_point<F: Real>(k: &Mat3<F>, p: [F; 3]) -> Option<([F; 3], F, F)> {
    let h = mat_vec(k, p);
    if h[2].abs() < F::of(PERSPECTIVE_EPS) || !h[2].is_finite() {
        return None;
    }
    Some((h, h[0] / h[2], h[1] / h[2]))
}

#[inline]
fn for_each_pixel<F: Real>(x: F, y: F, rows: usize, cols: usize, mut visit: impl FnMut(usize, F, [F; 2])) {
    if !(x.is_finite() && y.is_finite()) {
        return;
    }
    let (x0, fx) = cell(x);
    let (y0, fy) = cell(y);
    let one = F::one();
    for dx in 0..2isize {
        let r = x0 + dx;
        if r < 0 || r >= rows as isize {
            continue;
        }
        let (wx, gx) = if dx == 0 { (one - fx, -one) } else { (fx, one) };
        for dy in 0..2isize {
            let c = y0 + dy;
            if c < 0 || c >= cols as isize {
                continue;
            }
            let (wy, gy) = if dy == 0 { (one - fy, -one) } else { (fy, one) };
            visit(r as usize * cols + c as usize, wx * wy, [gx * wy, wx * gy]);
        }
    }
}

fn check_projection_inputs<F: Real>(slice: &Tensor<F>, world_points: &Tensor<F>) -> Result<(usize, usize, usize)> {
    let (m, n) = check_points(world_points, "project_to_2d")?;
    match slice.shape() {
        [c, sm, sn] if *sm == m && *sn == n && *c >= 3 => Ok((*c - 3, m, n)),
        s => Err(Error::shape(format!(
            "project_to_2d: augmented slice {s:?} vs points [3, {m}, {n}]"
        ))),
    }
}

/// Bilinear splat of the first `C - 3` channels of the augmented slice at the
/// perspective projection `K p_w` of each point, into a `[C - 3, rows, cols]`
/// image.
pub fn project_to_2d<F: Real>(
    slice: &Tensor<F>,
    world_points: &Tensor<F>,
    k: &Mat3<F>,
    out_shape: (usize, usize),
) -> Result<Tensor<F>> {
    let (c, m, n) = check_projection_inputs(slice, world_points)?;
    let (rows, cols) = out_shape;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("project_to_2d: output shape must be positive"));
    }
    let (hw, ohw) = (m * n, rows * cols);
    let mut out = vec![F::zero(); c * ohw];
    let (src, p) = (slice.data(), world_points.data());
    for idx in 0..hw {
        let Some((_, x, y)) = project_point(k, point_at(p, hw, idx)) else {
            continue;
        };
        for_each_pixel(x, y, rows, cols, |flat, w, _| {
            for ch in 0..c {
                out[ch * ohw + flat] += w * src[ch * hw + idx];
            }
        });
    }
    Ok(Tensor::from_parts(vec![c, rows, cols], out))
}

/// Gradients of [`project_to_2d`] with respect to `(slice, world_points, K)`.
pub fn project_to_2d_backward<F: Real>(
    slice: &Tensor<F>,
    world_points: &Tensor<F>,
    k: &Mat3<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Mat3<F>) {
    let cfull = slice.shape()[0];
    let c = cfull - 3;
    let (m, n) = (slice.shape()[1], slice.shape()[2]);
    let (rows, cols) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (hw, ohw) = (m * n, rows * cols);
    let (src, p, go) = (slice.data(), world_points.data(), grad_out.data());
    let mut gs = vec![F::zero(); cfull * hw];
    let mut gp = vec![F::zero(); 3 * hw];
    let mut gk = [[F::zero(); 3]; 3];
    for idx in 0..hw {
        let pw = point_at(p, hw, idx);
        let Some((h, x, y)) = project_point(k, pw) else {
            continue;
        };
        let (mut gx, mut gy) = (F::zero(), F::zero());
        for_each_pixel(x, y, rows, cols, |flat, w, dw| {
            let mut inner = F::zero();
            for ch in 0..c {
                let g = go[ch * ohw + flat];
                gs[ch * hw + idx] += w * g;
                inner += g * src[ch * hw + idx];
            }
            gx += dw[0] * inner;
            gy += dw[1] * inner;
        });
        // x = u / w, y = v / w
        let winv = F::one() / h[2];
        let gh = [gx * winv, gy * winv, -(gx * h[0] + gy * h[1]) * winv * winv];
        for a in 0..3 {
            for b in 0..3 {
                gk[a][b] += gh[a] * pw[b];
            }
        }
        for b in 0..3 {
            gp[b * hw + idx] = (0..3).map(|a| k[a][b] * gh[a]).sum();
        }
    }
    (
        Tensor::from_parts(slice.shape().to_vec(), gs),
        Tensor::from_parts(world_points.shape().to_vec(), gp),
        gk,
    )
}

fn mat_from_tensor<F: Real>(t: &Tensor<F>) -> Mat3<F> {
    let d = t.data();
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

fn mat_to_tensor<F: Real>(m: &Mat3<F>) -> Tensor<F> {
    Tensor::from_parts(vec![3, 3], m.iter().flatten().copied().collect())
}

fn vec3<F: Real>(t: &Tensor<F>) -> [F; 3] {
    let d = t.data();
    [d[0], d[1], d[2]]
}

/// Tape operations wrapping the kernels above.
impl<'t, F: Real> Var<'t, F> {
    /// `[3] -> [3, 3]` rotation matrix.
    pub fn axis_angle_to_rotation(self) -> Var<'t, F> {
        let v = self.value();
        assert_eq!(v.numel(), 3, "axis-angle needs 3 values");
        let a = vec3(&v);
        let r = rotation_from_axis_angle(a);
        let shape = v.shape().to_vec();
        self.tape().op(&[self], mat_to_tensor(&r), move |g| {
            let gm = mat_from_tensor(g);
            let jac = rotation_jacobian(a);
            let gv: Vec<F> = jac
                .iter()
                .map(|jk| (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| gm[i][j] * jk[i][j]).sum())
                .collect();
            vec![Some(Tensor::from_parts(shape.clone(), gv))]
        })
    }

    /// Points `[3, m, n]`, rotation `[3, 3]`, translation `[3]` ->
    /// `R^T (p + t)`.
    pub fn rigid_transform(self, rot: Var<'t, F>, trans: Var<'t, F>) -> Var<'t, F> {
        let (p, r, t) = (self.value(), rot.value(), trans.value());
        let rm = mat_from_tensor(&r);
        let tv = vec3(&t);
        let out = rigid_world_transform(&p, &rm, tv).expect("rigid_transform: points must be [3, m, n]");
        let tshape = t.shape().to_vec();
        self.tape().op(&[self, rot, trans], out, move |g| {
            let hw = p.numel() / 3;
            let (pd, gd) = (p.data(), g.data());
            let mut gp = vec![F::zero(); 3 * hw];
            let mut gr = [[F::zero(); 3]; 3];
            let mut gt = [F::zero(); 3];
            for idx in 0..hw {
                let q = point_at(pd, hw, idx);
                let gw = point_at(gd, hw, idx);
                let shifted = [q[0] + tv[0], q[1] + tv[1], q[2] + tv[2]];
                // p_w[a] = sum_b R[b][a] * shifted[b]
                let back = mat_vec(&rm, gw);
                for b in 0..3 {
                    gp[b * hw + idx] = back[b];
                    gt[b] += back[b];
                    for a in 0..3 {
                        gr[b][a] += gw[a] * shifted[b];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(p.shape().to_vec(), gp)),
                Some(mat_to_tensor(&gr)),
                Some(Tensor::from_parts(tshape.clone(), gt.to_vec())),
            ]
        })
    }

    /// Augmented slice `[C, m, n]` splatted at `points` into
    /// `[C, d_z, m_w, n_w]`.
    pub fn splat(self, points: Var<'t, F>, ext: GridExtents) -> Var<'t, F> {
        let (s, p) = (self.value(), points.value());
        let grid = splat_to_world(&s, &p, ext).expect("splat: shapes");
        self.tape().op(&[self, points], grid, move |g| {
            let (gs, gp) = splat_to_world_backward(&s, &p, ext, g);
            vec![Some(gs), Some(gp)]
        })
    }

    /// Packed intrinsics `[7] -> K [3, 3]`.
    pub fn camera_matrix(self) -> Var<'t, F> {
        let v = self.value();
        let intr = CameraIntrinsics::from_slice(v.data()).expect("camera_matrix: 7 values");
        let k = camera_matrix(&intr);
        let shape = v.shape().to_vec();
        self.tape().op(&[self], mat_to_tensor(&k), move |g| {
            let gi = camera_matrix_backward(&intr, &mat_from_tensor(g));
            vec![Some(Tensor::from_parts(shape.clone(), gi.to_vec()))]
        })
    }

    /// Augmented slice `[C, m, n]` re-projected through `k` into
    /// `[C - 3, rows, cols]`.
    pub fn project(self, points: Var<'t, F>, k: Var<'t, F>, out_shape: (usize, usize)) -> Var<'t, F> {
        let (s, p, kv) = (self.value(), points.value(), k.value());
        let km = mat_from_tensor(&kv);
        let out = project_to_2d(&s, &p, &km, out_shape).expect("project: shapes");
        self.tape().op(&[self, points, k], out, move |g| {
            let (gs, gp, gk) = project_to_2d_backward(&s, &p, &km, g);
            vec![Some(gs), Some(gp), Some(mat_to_tensor(&gk))]
        })
    }
}
