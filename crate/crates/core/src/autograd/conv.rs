//! 3D convolution over `[C, T, H, W]` inputs via im2col + gemm.

use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn same(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    /// Output extent along each of (T, H, W).
    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            out[a] = if padded < self.kernel[a] {
                0
            } else {
                (padded - self.kernel[a]) / self.stride[a] + 1
            };
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

fn dims4(shape: &[usize]) -> (usize, [usize; 3]) {
    assert_eq!(shape.len(), 4, "conv3d expects [C, T, H, W], got {shape:?}");
    (shape[0], [shape[1], shape[2], shape[3]])
}

/// Unfolds `x` (`C x T x H x W`) into `(C*kt*kh*kw) x (To*Ho*Wo)` columns.
fn im2col<F: Real>(x: &[F], c: usize, dims: [usize; 3], g: &ConvGeometry) -> Vec<F> {
    let [t, h, w] = dims;
    let [to, ho, wo] = g.output_dims(dims);
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ncol = to * ho * wo;
    let mut cols = vec![F::zero(); c * kt * kh * kw * ncol];
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let out = &mut cols[row * ncol..(row + 1) * ncol];
                    let mut col = 0;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            col += ho * wo;
                            continue;
                        }
                        let xt = &xc[it as usize * h * w..(it as usize + 1) * h * w];
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                col += wo;
                                continue;
                            }
                            let xr = &xt[ih as usize * w..(ih as usize + 1) * w];
                            for ow in 0..wo {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    out[col] = xr[iw as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<F: Real>(cols: &[F], c: usize, dims: [usize; 3], g: &ConvGeometry) -> Vec<F> {
    let [t, h, w] = dims;
    let [to, ho, wo] = g.output_dims(dims);
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ncol = to * ho * wo;
    let mut x = vec![F::zero(); c * t * h * w];
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let mut col = 0;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            col += ho * wo;
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                col += wo;
                                continue;
                            }
                            let base = (it as usize * h + ih as usize) * w;
                            for ow in 0..wo {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    xc[base + iw as usize] += src[col];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// `y = conv(x, weight) + bias`; `weight` is `[O, C, kt, kh, kw]`, `bias` `[O]`.
pub fn conv3d_forward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeometry,
) -> Tensor<F> {
    let (c, dims) = dims4(x.shape());
    let o = weight.shape()[0];
    assert_eq!(
        weight.shape(),
        &[o, c, g.kernel[0], g.kernel[1], g.kernel[2]],
        "conv3d weight shape"
    );
    let out_dims = g.output_dims(dims);
    let ncol: usize = out_dims.iter().product();
    let ck = c * g.kernel.iter().product::<usize>();
    let mut out = vec![F::zero(); o * ncol];
    if let Some(b) = bias {
        for (oi, chunk) in out.chunks_mut(ncol.max(1)).enumerate().take(o) {
            chunk.fill(b.data()[oi]);
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    if g.is_pointwise() {
        gemm(Trans::No, Trans::No, o, ck, ncol, F::one(), weight.data(), x.data(), beta, &mut out);
    } else {
        let cols = im2col(x.data(), c, dims, g);
        gemm(Trans::No, Trans::No, o, ck, ncol, F::one(), weight.data(), &cols, beta, &mut out);
    }
    Tensor::from_parts(vec![o, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`; `grad_x` only when requested.
pub fn conv3d_backward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    g: &ConvGeometry,
    need_x: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let (c, dims) = dims4(x.shape());
    let o = weight.shape()[0];
    let ncol: usize = g.output_dims(dims).iter().product();
    let ck = c * g.kernel.iter().product::<usize>();
    let go = grad_out.data();

    let mut gb = vec![F::zero(); o];
    for (oi, b) in gb.iter_mut().enumerate() {
        *b = go[oi * ncol..(oi + 1) * ncol].iter().copied().sum();
    }

    let mut gw = vec![F::zero(); o * ck];
    let pointwise = g.is_pointwise();
    let cols_owned;
    let cols: &[F] = if pointwise {
        x.data()
    } else {
        cols_owned = im2col(x.data(), c, dims, g);
        &cols_owned
    };
    gemm(Trans::No, Trans::Yes, o, ncol, ck, F::one(), go, cols, F::zero(), &mut gw);

    let gx = need_x.then(|| {
        let mut gcols = vec![F::zero(); ck * ncol];
        gemm(Trans::Yes, Trans::No, ck, o, ncol, F::one(), weight.data(), go, F::zero(), &mut gcols);
        let data = if pointwise {
            gcols
        } else {
            col2im(&gcols, c, dims, g)
        };
        Tensor::from_parts(x.shape().to_vec(), data)
    });
    (
        gx,
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![o], gb),
    )
}
