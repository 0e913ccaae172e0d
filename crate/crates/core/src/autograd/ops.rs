use std::rc::Rc;

use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn same_shape<F: Real>(a: &Var<'_, F>, b: &Var<'_, F>, op: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op}: operand shapes differ");
}

impl<'t, F: Real> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        same_shape(&self, &other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .op(&[self, other], v, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        same_shape(&self, &other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(&[self, other], v, |g| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        same_shape(&self, &other, "mul");
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape.op(&[self, other], v, move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        })
    }

    /// Multiplies by a constant.
    pub fn scale(self, s: F) -> Var<'t, F> {
        let v = self.value().scale(s);
        self.tape.op(&[self], v, move |g| vec![Some(g.scale(s))])
    }

    /// Multiplies by a single-element variable.
    pub fn scale_by(self, s: Var<'t, F>) -> Var<'t, F> {
        assert_eq!(s.numel(), 1, "scale_by expects a scalar");
        let (x, sv) = (self.value(), s.value());
        let k = sv.item();
        let v = x.scale(k);
        self.tape.op(&[self, s], v, move |g| {
            vec![Some(g.scale(k)), Some(Tensor::from_parts(sv.shape().to_vec(), vec![g.dot(&x)]))]
        })
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum());
        self.tape
            .op(&[self], v, move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = F::of(self.numel() as f64);
        self.sum().scale(F::one() / n)
    }

    pub fn relu(self) -> Var<'t, F> {
        let x = self.value();
        let v = x.map(|a| a.max(F::zero()));
        self.tape.op(&[self], v, move |g| {
            vec![Some(g.zip_map(&x, |g, a| if a > F::zero() { g } else { F::zero() }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        let y = Rc::new(self.value().map(|a| F::one() / (F::one() + (-a).exp())));
        let yc = y.clone();
        self.tape.op_rc(&[self], y, move |g| {
            vec![Some(g.zip_map(&yc, |g, s| g * s * (F::one() - s)))]
        })
    }

    pub fn exp(self) -> Var<'t, F> {
        let y = Rc::new(self.value().map(|a| a.exp()));
        let yc = y.clone();
        self.tape
            .op_rc(&[self], y, move |g| vec![Some(g.zip_map(&yc, |g, e| g * e))])
    }

    pub fn square(self) -> Var<'t, F> {
        self.mul(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = (*x).clone().reshape(shape).expect("reshape: element count");
        self.tape.op(&[self], v, move |g| {
            vec![Some(g.clone().reshape(&old).expect("reshape grad"))]
        })
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.constant_rc(self.value())
    }

    /// Identity forward, gradient multiplied by `-scale` on the way back.
    pub fn grad_reverse(self, scale: F) -> Var<'t, F> {
        let v = (*self.value()).clone();
        self.tape
            .op(&[self], v, move |g| vec![Some(g.scale(-scale))])
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(self) -> Var<'t, F> {
        let x = self.value();
        let n = x.norm();
        self.tape.op(&[self], Tensor::scalar(n), move |g| {
            let gi = g.item();
            if n > F::zero() {
                vec![Some(x.scale(gi / n))]
            } else {
                vec![Some(Tensor::zeros(x.shape()))]
            }
        })
    }

    /// `x / ||x||` over the whole tensor.
    pub fn l2_normalize(self) -> Var<'t, F> {
        let x = self.value();
        let n = x.norm().max(F::of(1e-12));
        let y = Rc::new(x.scale(F::one() / n));
        let yc = y.clone();
        self.tape.op_rc(&[self], y, move |g| {
            let proj = yc.dot(g);
            vec![Some(g.zip_map(&yc, |g, y| (g - y * proj) / n))]
        })
    }

    pub fn dot(self, other: Var<'t, F>) -> Var<'t, F> {
        assert_eq!(self.numel(), other.numel(), "dot: length mismatch");
        let (a, b) = (self.value(), other.value());
        let v = Tensor::scalar(a.dot(&b));
        self.tape.op(&[self, other], v, move |g| {
            let gi = g.item();
            vec![Some(b.scale(gi).reshape(a.shape()).unwrap()), Some(a.scale(gi).reshape(b.shape()).unwrap())]
        })
    }

    /// `mat (N x D) . self (D) -> (N)`.
    pub fn matvec_by(self, mat: Var<'t, F>) -> Var<'t, F> {
        let (m, x) = (mat.value(), self.value());
        let ms = m.shape().to_vec();
        assert_eq!(ms.len(), 2, "matvec: matrix must be 2-D");
        let (n, d) = (ms[0], ms[1]);
        assert_eq!(x.numel(), d, "matvec: vector length");
        let mut out = vec![F::zero(); n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m.data()[i * d..(i + 1) * d]
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| a * b)
                .sum();
        }
        let xs = x.shape().to_vec();
        let need_m = mat.requires_grad();
        self.tape
            .op(&[self, mat], Tensor::from_parts(vec![n], out), move |g| {
                let gd = g.data();
                let mut gx = vec![F::zero(); d];
                for i in 0..n {
                    let row = &m.data()[i * d..(i + 1) * d];
                    for (o, &r) in gx.iter_mut().zip(row) {
                        *o += gd[i] * r;
                    }
                }
                let gm = need_m.then(|| {
                    let mut gm = vec![F::zero(); n * d];
                    for i in 0..n {
                        for (o, &v) in gm[i * d..(i + 1) * d].iter_mut().zip(x.data()) {
                            *o = gd[i] * v;
                        }
                    }
                    Tensor::from_parts(vec![n, d], gm)
                });
                vec![Some(Tensor::from_parts(xs.clone(), gx)), gm]
            })
    }

    /// `weight (O x I) . self (I) + bias (O)`.
    pub fn linear(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Var<'t, F> {
        self.matvec_by(weight).add(bias)
    }

    /// Flattened elements `start..end` as a vector.
    pub fn slice(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        assert!(start <= end && end <= x.numel(), "slice {start}..{end} of {}", x.numel());
        let shape = x.shape().to_vec();
        let v = Tensor::from_parts(vec![end - start], x.data()[start..end].to_vec());
        self.tape.op(&[self], v, move |g| {
            let mut gx = vec![F::zero(); shape.iter().product()];
            gx[start..end].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Concatenates flattened operands into one vector.
    pub fn concat(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let data: Vec<F> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let total = data.len();
        tape.op(parts, Tensor::from_parts(vec![total], data), move |g| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&shapes)
                .map(|(&n, s)| {
                    let piece = g.data()[off..off + n].to_vec();
                    off += n;
                    Some(Tensor::from_parts(s.clone(), piece))
                })
                .collect()
        })
    }

    /// Cross-entropy of `softmax(self)` against a (possibly soft) target
    /// distribution, computed with max subtraction.
    pub fn soft_cross_entropy(self, target: &[F]) -> Var<'t, F> {
        let z = self.value();
        assert_eq!(z.numel(), target.len(), "cross entropy: target length");
        let zmax = z.data().iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = zmax + z.data().iter().map(|&v| (v - zmax).exp()).sum::<F>().ln();
        let loss: F = target
            .iter()
            .zip(z.data())
            .map(|(&t, &v)| if t == F::zero() { F::zero() } else { -t * (v - lse) })
            .sum();
        let tsum: F = target.iter().copied().sum();
        let target = target.to_vec();
        let shape = z.shape().to_vec();
        self.tape.op(&[self], Tensor::scalar(loss), move |g| {
            let gi = g.item();
            let grad: Vec<F> = z
                .data()
                .iter()
                .zip(&target)
                .map(|(&v, &t)| gi * ((v - lse).exp() * tsum - t))
                .collect();
            vec![Some(Tensor::from_parts(shape.clone(), grad))]
        })
    }

    pub fn conv3d(self, weight: Var<'t, F>, bias: Var<'t, F>, geom: ConvGeometry) -> Var<'t, F> {
        let (x, w) = (self.value(), weight.value());
        let y = conv3d_forward(&x, &w, Some(&bias.value()), &geom);
        let need_x = self.requires_grad();
        self.tape.op(&[self, weight, bias], y, move |g| {
            let (gx, gw, gb) = conv3d_backward(&x, &w, g, &geom, need_x);
            vec![gx, Some(gw), Some(gb)]
        })
    }

    /// Per-sample group normalisation of `[C, ...]` with per-channel affine.
    pub fn group_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, groups: usize, eps: F) -> Var<'t, F> {
        let x = self.value();
        let c = x.shape()[0];
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let s = x.numel() / c;
        let cg = c / groups;
        let n = F::of((cg * s) as f64);
        let (gm, bt) = (gamma.value(), beta.value());
        let mut xhat = vec![F::zero(); x.numel()];
        let mut inv_std = vec![F::zero(); groups];
        for gi in 0..groups {
            let block = &x.data()[gi * cg * s..(gi + 1) * cg * s];
            let mean = block.iter().copied().sum::<F>() / n;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, &v) in xhat[gi * cg * s..(gi + 1) * cg * s].iter_mut().zip(block) {
                *o = (v - mean) * is;
            }
        }
        let mut y = vec![F::zero(); x.numel()];
        for ch in 0..c {
            let (ga, be) = (gm.data()[ch], bt.data()[ch]);
            for k in ch * s..(ch + 1) * s {
                y[k] = xhat[k] * ga + be;
            }
        }
        let shape = x.shape().to_vec();
        let xhat = Rc::new(xhat);
        self.tape
            .op(&[self, gamma, beta], Tensor::from_parts(shape.clone(), y), move |g| {
                let gd = g.data();
                let mut ggamma = vec![F::zero(); c];
                let mut gbeta = vec![F::zero(); c];
                let mut gxhat = vec![F::zero(); gd.len()];
                for ch in 0..c {
                    let ga = gm.data()[ch];
                    for k in ch * s..(ch + 1) * s {
                        ggamma[ch] += gd[k] * xhat[k];
                        gbeta[ch] += gd[k];
                        gxhat[k] = gd[k] * ga;
                    }
                }
                let mut gx = vec![F::zero(); gd.len()];
                for gi in 0..groups {
                    let r = gi * cg * s..(gi + 1) * cg * s;
                    let mean_g = gxhat[r.clone()].iter().copied().sum::<F>() / n;
                    let mean_gx = gxhat[r.clone()]
                        .iter()
                        .zip(&xhat[r.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        / n;
                    for k in r {
                        gx[k] = inv_std[gi] * (gxhat[k] - mean_g - xhat[k] * mean_gx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![c], ggamma)),
                    Some(Tensor::from_parts(vec![c], gbeta)),
                ]
            })
    }

    /// Non-overlapping average pooling of `[C, T, H, W]` (floor on ragged
    /// edges).
    pub fn avg_pool3d(self, kernel: [usize; 3]) -> Var<'t, F> {
        if kernel == [1, 1, 1] {
            return self;
        }
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "avg_pool3d expects [C, T, H, W]");
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let (to, ho, wo) = (t / kernel[0], h / kernel[1], w / kernel[2]);
        let inv = F::one() / F::of((kernel[0] * kernel[1] * kernel[2]) as f64);
        let mut out = vec![F::zero(); c * to * ho * wo];
        let xd = x.data();
        for ci in 0..c {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = F::zero();
                        for dt in 0..kernel[0] {
                            for dh in 0..kernel[1] {
                                let base = ((ci * t + ot * kernel[0] + dt) * h + oh * kernel[1] + dh) * w
                                    + ow * kernel[2];
                                for dw in 0..kernel[2] {
                                    acc += xd[base + dw];
                                }
                            }
                        }
                        out[((ci * to + ot) * ho + oh) * wo + ow] = acc * inv;
                    }
                }
            }
        }
        self.tape
            .op(&[self], Tensor::from_parts(vec![c, to, ho, wo], out), move |g| {
                let gd = g.data();
                let mut gx = vec![F::zero(); c * t * h * w];
                for ci in 0..c {
                    for ot in 0..to {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let v = gd[((ci * to + ot) * ho + oh) * wo + ow] * inv;
                                for dt in 0..kernel[0] {
                                    for dh in 0..kernel[1] {
                                        let base = ((ci * t + ot * kernel[0] + dt) * h + oh * kernel[1] + dh)
                                            * w
                                            + ow * kernel[2];
                                        for dw in 0..kernel[2] {
                                            gx[base + dw] = v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn mean_per_channel(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = shape[0];
        let s = x.numel() / c;
        let inv = F::one() / F::of(s as f64);
        let out: Vec<F> = x.data().chunks(s).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        self.tape.op(&[self], Tensor::from_parts(vec![c], out), move |g| {
            let mut gx = vec![F::zero(); c * s];
            for (ch, chunk) in gx.chunks_mut(s).enumerate() {
                chunk.fill(g.data()[ch] * inv);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// `[C, T, H, W] -> [C, H, W]` at time index `t`.
    pub fn select_time(self, t: usize) -> Var<'t, F> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "select_time expects [C, T, H, W]");
        assert!(t < s[1], "select_time index {t} out of {}", s[1]);
        let (c, tt, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(c * hw);
        for ci in 0..c {
            let base = (ci * tt + t) * hw;
            out.extend_from_slice(&x.data()[base..base + hw]);
        }
        self.tape
            .op(&[self], Tensor::from_parts(vec![c, s[2], s[3]], out), move |g| {
                let mut gx = vec![F::zero(); c * tt * hw];
                for ci in 0..c {
                    let base = (ci * tt + t) * hw;
                    gx[base..base + hw].copy_from_slice(&g.data()[ci * hw..(ci + 1) * hw]);
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
    }

    /// Stacks `[C, H, W]` slices into `[C, T, H, W]`.
    pub fn stack_time(slices: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!slices.is_empty(), "stack_time of nothing");
        let tape = slices[0].tape;
        let s0 = slices[0].shape();
        assert_eq!(s0.len(), 3, "stack_time expects [C, H, W] slices");
        let (c, hw) = (s0[0], s0[1] * s0[2]);
        let tt = slices.len();
        let values: Vec<_> = slices.iter().map(|v| v.value()).collect();
        let mut out = vec![F::zero(); c * tt * hw];
        for (t, v) in values.iter().enumerate() {
            assert_eq!(v.shape(), &s0[..], "stack_time: slice shapes differ");
            for ci in 0..c {
                let dst = (ci * tt + t) * hw;
                out[dst..dst + hw].copy_from_slice(&v.data()[ci * hw..(ci + 1) * hw]);
            }
        }
        tape.op(slices, Tensor::from_parts(vec![c, tt, s0[1], s0[2]], out), move |g| {
            (0..tt)
                .map(|t| {
                    let mut gs = Vec::with_capacity(c * hw);
                    for ci in 0..c {
                        let src = (ci * tt + t) * hw;
                        gs.extend_from_slice(&g.data()[src..src + hw]);
                    }
                    Some(Tensor::from_parts(s0.clone(), gs))
                })
                .collect()
        })
    }

    /// Mean over the second axis: `[C, T, ...] -> [C, ...]`.
    pub fn mean_axis1(self) -> Var<'t, F> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert!(s.len() >= 2, "mean_axis1 needs two axes");
        let (c, tt) = (s[0], s[1]);
        let rest = x.numel() / (c * tt);
        let inv = F::one() / F::of(tt as f64);
        let mut out = vec![F::zero(); c * rest];
        for ci in 0..c {
            for t in 0..tt {
                let src = &x.data()[(ci * tt + t) * rest..(ci * tt + t + 1) * rest];
                for (o, &v) in out[ci * rest..(ci + 1) * rest].iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        let mut oshape = vec![c];
        oshape.extend_from_slice(&s[2..]);
        self.tape.op(&[self], Tensor::from_parts(oshape, out), move |g| {
            let mut gx = vec![F::zero(); c * tt * rest];
            for ci in 0..c {
                for t in 0..tt {
                    let dst = (ci * tt + t) * rest;
                    for (k, o) in gx[dst..dst + rest].iter_mut().enumerate() {
                        *o = g.data()[ci * rest + k] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), gx))]
        })
    }

    /// Sum over the second axis: `[C, D, ...] -> [C, ...]`.
    pub fn sum_axis1(self) -> Var<'t, F> {
        let d = F::of(self.shape()[1] as f64);
        self.mean_axis1().scale(d)
    }

    /// Channel concatenation of `[C1, ...]` and `[C2, ...]`.
    pub fn concat_channels(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape()[1..], b.shape()[1..], "concat_channels: trailing shapes differ");
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let na = a.numel();
        self.tape
            .op(&[self, other], Tensor::from_parts(shape, data), move |g| {
                vec![
                    Some(Tensor::from_parts(sa.clone(), g.data()[..na].to_vec())),
                    Some(Tensor::from_parts(sb.clone(), g.data()[na..].to_vec())),
                ]
            })
    }
}

impl<F: Real> Tape<F> {
    /// Sum of same-shaped variables.
    pub fn add_all<'t>(&'t self, terms: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!terms.is_empty(), "add_all of nothing");
        terms[1..].iter().fold(terms[0], |acc, &t| acc.add(t))
    }
}
