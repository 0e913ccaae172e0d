//! Central finite-difference checks for tape gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Bound on `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_tol: f64,
    /// Check at most this many coordinates per input (random subset).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            rel_tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn with_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub grad_norm: f64,
    pub rel_tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.rel_tol && self.rel_error.is_finite()
    }
}

/// Uniform `[-scale, scale)` tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("sized")
}

/// Compares reverse-mode gradients of `f` against central differences with
/// respect to every input tensor.
pub fn check<Fun>(inputs: &[Tensor<f64>], f: Fun, cfg: &GradCheck) -> GradReport
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars);
        let g = tape.backward(out);
        vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    };

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let (mut diff2, mut a2, mut n2, mut max_abs, mut count) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k].data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            count += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_error = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    GradReport {
        rel_error,
        max_abs_error: max_abs,
        coords_checked: count,
        grad_norm: a2.sqrt(),
        rel_tol: cfg.rel_tol,
    }
}

/// Like [`check`] but perturbs the parameters of `store` (a random subset of
/// `cfg.max_coords` coordinates per tensor when set).
pub fn check_store<Fun>(store: &ParamStore<f64>, f: Fun, cfg: &GradCheck) -> GradReport
where
    Fun: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64>,
{
    let analytic = {
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let out = f(&tape, &p);
        p.grads(&tape.backward(out))
    };
    let eval = |s: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        f(&tape, &s.bind(&tape, false)).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs, mut count) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for k in 0..store.len() {
        let n = store.tensors()[k].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.tensors()[k].data()[i];
            work.tensors_mut()[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&work);
            work.tensors_mut()[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&work);
            work.tensors_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k].data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            count += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_error = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    GradReport {
        rel_error,
        max_abs_error: max_abs,
        coords_checked: count,
        grad_norm: a2.sqrt(),
        rel_tol: cfg.rel_tol,
    }
}
