//! Ring-buffer key queues and the momentum (EMA) key encoder update.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CAPACITY: usize = 2048;
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Fraction of capacity that must be filled before world-code lookups run.
pub const WARMUP_FRACTION: f64 = 0.25;

fn unit_tolerance<F: Real>() -> f64 {
    (100.0 * F::epsilon().f64()).max(1e-6)
}

fn check_unit<F: Real>(v: &[F], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if (n - 1.0).abs() > unit_tolerance::<F>() {
        return Err(Error::invalid(format!("{what} must be unit-norm, has norm {n}")));
    }
    Ok(())
}

/// Index-aligned queues of keys, optional world codes, and source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueState<F: Real> {
    capacity: usize,
    key_dim: usize,
    code_dim: Option<usize>,
    keys: Vec<F>,
    codes: Vec<F>,
    sources: Vec<u64>,
    cursor: usize,
    filled: usize,
}

impl<F: Real> QueueState<F> {
    /// Keys only (the code queue does not exist yet).
    pub fn keys_only(capacity: usize, key_dim: usize) -> Result<Self> {
        Self::build(capacity, key_dim, None)
    }

    /// Keys paired with world codes.
    pub fn paired(capacity: usize, key_dim: usize, code_dim: usize) -> Result<Self> {
        Self::build(capacity, key_dim, Some(code_dim))
    }

    fn build(capacity: usize, key_dim: usize, code_dim: Option<usize>) -> Result<Self> {
        if capacity == 0 || key_dim == 0 || code_dim == Some(0) {
            return Err(Error::invalid("queue capacity and dimensions must be positive"));
        }
        Ok(QueueState {
            capacity,
            key_dim,
            code_dim,
            keys: vec![F::zero(); capacity * key_dim],
            codes: vec![F::zero(); capacity * code_dim.unwrap_or(0)],
            sources: vec![0; capacity],
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn code_dim(&self) -> Option<usize> {
        self.code_dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn has_codes(&self) -> bool {
        self.code_dim.is_some()
    }

    pub fn key(&self, i: usize) -> &[F] {
        &self.keys[i * self.key_dim..(i + 1) * self.key_dim]
    }

    pub fn code(&self, i: usize) -> Option<&[F]> {
        self.code_dim.map(|d| &self.codes[i * d..(i + 1) * d])
    }

    pub fn source(&self, i: usize) -> u64 {
        self.sources[i]
    }

    pub fn warmed_up(&self) -> bool {
        self.filled as f64 >= WARMUP_FRACTION * self.capacity as f64
    }

    /// Filled keys as an `[filled, d]` matrix (slot order).
    pub fn keys_matrix(&self) -> Tensor<F> {
        Tensor::from_parts(
            vec![self.filled, self.key_dim],
            self.keys[..self.filled * self.key_dim].to_vec(),
        )
    }

    /// Writes one entry at the cursor, overwriting the oldest once full.
    pub fn enqueue_pair(&mut self, key: &[F], code: Option<&[F]>, source: u64) -> Result<()> {
        if key.len() != self.key_dim {
            return Err(Error::shape(format!("key of length {}, queue holds {}", key.len(), self.key_dim)));
        }
        check_unit(key, "queued key")?;
        match (self.code_dim, code) {
            (Some(d), Some(c)) => {
                if c.len() != d {
                    return Err(Error::shape(format!("code of length {}, queue holds {d}", c.len())));
                }
                check_unit(c, "queued world code")?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("paired queue needs a world code")),
            (None, Some(_)) => return Err(Error::invalid("keys-only queue cannot store world codes")),
        }
        let i = self.cursor;
        self.keys[i * self.key_dim..(i + 1) * self.key_dim].copy_from_slice(key);
        if let (Some(d), Some(c)) = (self.code_dim, code) {
            self.codes[i * d..(i + 1) * d].copy_from_slice(c);
        }
        self.sources[i] = source;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.filled = (self.filled + 1).min(self.capacity);
        Ok(())
    }

    /// Slot of the filled key nearest to `query` in L2 among entries whose
    /// source differs from `exclude`; lowest slot wins ties.
    pub fn top1_neighbor(&self, query: &[F], exclude: u64) -> Result<usize> {
        if query.len() != self.key_dim {
            return Err(Error::shape(format!("query of length {}, queue holds {}", query.len(), self.key_dim)));
        }
        let mut best: Option<(usize, F)> = None;
        for i in 0..self.filled {
            if self.sources[i] == exclude {
                continue;
            }
            let d2: F = self.key(i).iter().zip(query).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if best.map_or(true, |(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best.map(|(i, _)| i).ok_or(Error::LookupUnavailable)
    }

    /// Raw buffers `(keys, codes, sources, cursor, filled)` for checkpoints.
    pub fn raw(&self) -> (&[F], &[F], &[u64], usize, usize) {
        (&self.keys, &self.codes, &self.sources, self.cursor, self.filled)
    }

    pub fn from_raw(
        capacity: usize,
        key_dim: usize,
        code_dim: Option<usize>,
        keys: Vec<F>,
        codes: Vec<F>,
        sources: Vec<u64>,
        cursor: usize,
        filled: usize,
    ) -> Result<Self> {
        let ok = keys.len() == capacity * key_dim
            && codes.len() == capacity * code_dim.unwrap_or(0)
            && sources.len() == capacity
            && cursor < capacity
            && filled <= capacity;
        if !ok {
            return Err(Error::shape("inconsistent queue buffers"));
        }
        Ok(QueueState {
            capacity,
            key_dim,
            code_dim,
            keys,
            codes,
            sources,
            cursor,
            filled,
        })
    }
}

/// `key <- m * key + (1 - m) * query` for every parameter.
pub fn momentum_update<F: Real>(query: &ParamStore<F>, key: &mut ParamStore<F>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1], got {m}")));
    }
    query.check_same_layout(key)?;
    let (mf, qf) = (F::of(m), F::of(1.0 - m));
    for (k, q) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        for (a, &b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = mf * *a + qf * b;
        }
    }
    Ok(())
}
