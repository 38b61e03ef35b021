//! Regression-mean merging of linear layers weighted by input Gram matrices.

use std::collections::BTreeMap;

use super::{par_map, require_compatible, tagged};
use crate::container::{Checkpoint, Tensor};
use crate::dtype::{Dtype, OutDtype};
use crate::error::{Error, Result};

/// Metadata key carrying the accumulated sample count of a serialized GramSet.
pub const GRAM_SAMPLES_KEY: &str = "samerge.gram.samples";

/// Rows of activations folded per pass.
const CHUNK_ROWS: usize = 256;
const JITTER_ESCALATIONS: u32 = 3;

/// Dense symmetric `dim × dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Gram {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut g = Self::zeros(dim);
        for i in 0..dim {
            g.data[i * dim + i] = 1.0;
        }
        g
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let data = rows.iter().flat_map(|r| {
            assert_eq!(r.len(), dim, "Gram rows must be square");
            r.iter().copied()
        });
        Self { dim, data: data.collect() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Fold rows of an `[n, dim]` matrix into `Σ x·xᵀ`. The upper triangle
    /// is accumulated row by row and mirrored, so the result is exactly
    /// symmetric and independent of chunking.
    fn accumulate_rows(&mut self, rows: &[f64]) {
        let d = self.dim;
        for chunk in rows.chunks(CHUNK_ROWS * d.max(1)) {
            for x in chunk.chunks_exact(d) {
                for i in 0..d {
                    let xi = x[i];
                    let row = &mut self.data[i * d..(i + 1) * d];
                    for j in i..d {
                        row[j] += xi * x[j];
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                self.data[i * d + j] = self.data[j * d + i];
            }
        }
    }

    /// `γ·G + (1 − γ)·diag(G)`: off-diagonal entries scaled by γ.
    fn shrunk(&self, gamma: f64) -> Vec<f64> {
        let d = self.dim;
        let mut out = self.data.clone();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    out[i * d + j] *= gamma;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GramSet {
    pub grams: BTreeMap<String, Gram>,
    /// Activation rows folded in: per source file the largest row count
    /// among its tensors, summed over files.
    pub sample_count: u64,
}

impl GramSet {
    /// Add the activations of one dump (`name → [n, d]`) to the running sums.
    pub fn accumulate(&mut self, activations: &Checkpoint) -> Result<()> {
        let mut rows_in_file = 0u64;
        for (name, t) in activations.iter() {
            let [n, d] = t.shape() else {
                return Err(Error::format(format!(
                    "activation {name:?} must be 2-D [samples, features], got shape {:?}",
                    t.shape()
                )));
            };
            let gram = self.grams.entry(name.to_string()).or_insert_with(|| Gram::zeros(*d));
            if gram.dim != *d {
                return Err(Error::format(format!(
                    "activation {name:?} has {d} features, earlier dumps had {}",
                    gram.dim
                )));
            }
            gram.accumulate_rows(&t.to_f64());
            rows_in_file = rows_in_file.max(*n as u64);
        }
        self.sample_count += rows_in_file;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, g) in &self.grams {
            c.insert(name.clone(), Tensor::from_f64(Dtype::F64, vec![g.dim, g.dim], &g.data));
        }
        c.metadata.insert(GRAM_SAMPLES_KEY.into(), self.sample_count.to_string());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let sample_count = match c.metadata.get(GRAM_SAMPLES_KEY) {
            Some(s) => s.parse().map_err(|_| Error::format(format!("bad {GRAM_SAMPLES_KEY} value {s:?}")))?,
            None => 0,
        };
        let mut grams = BTreeMap::new();
        for (name, t) in c.iter() {
            let &[r, k] = t.shape() else {
                return Err(Error::format(format!("Gram {name:?} is not a matrix: {:?}", t.shape())));
            };
            if r != k {
                return Err(Error::format(format!("Gram {name:?} is not square: {r}×{k}")));
            }
            grams.insert(name.to_string(), Gram { dim: r, data: t.to_f64() });
        }
        Ok(Self { grams, sample_count })
    }
}

/// Accumulate Gram matrices over one or more activation dumps.
pub fn compute_gram(activations: &[&Checkpoint]) -> Result<GramSet> {
    let mut set = GramSet::default();
    for a in activations {
        set.accumulate(a)?;
    }
    Ok(set)
}

/// Lower-triangular Cholesky factor, or `None` if a pivot is not clearly
/// positive (relative to the largest diagonal entry).
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let max_diag = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag;
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !s.is_finite() || s <= floor {
            return None;
        }
        let pivot = s.sqrt();
        l[j * d + j] = pivot;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / pivot;
        }
    }
    Some(l)
}

/// Solve `L·Lᵀ·x = b` in place.
fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// Factor `s`, adding `δ·I` with `δ = 1e-8·trace/d` on failure and
/// escalating δ tenfold up to three times.
fn factor_with_jitter(s: &[f64], d: usize, name: &str) -> Result<Vec<f64>> {
    if let Some(l) = cholesky(s, d) {
        return Ok(l);
    }
    let trace: f64 = (0..d).map(|i| s[i * d + i]).sum();
    let mut delta = 1e-8 * trace / d as f64;
    if delta > 0.0 && delta.is_finite() {
        for _ in 0..=JITTER_ESCALATIONS {
            let mut jittered = s.to_vec();
            for i in 0..d {
                jittered[i * d + i] += delta;
            }
            if let Some(l) = cholesky(&jittered, d) {
                return Ok(l);
            }
            delta *= 10.0;
        }
    }
    Err(Error::Numerical(format!(
        "Gram sum for {name:?} is not positive definite even after jitter escalation"
    )))
}

/// RegMean: for Gram-covered `[out, in]` weights,
/// `W = (Σ_j W_j·G′_j)(Σ_j G′_j)⁻¹` with `G′ = γ·G + (1 − γ)·diag(G)`;
/// every other tensor is the unweighted mean.
pub fn regmean_merge(
    models: &[&Checkpoint],
    grams: &[&GramSet],
    gamma: f64,
    out: OutDtype,
) -> Result<Checkpoint> {
    if models.len() < 2 {
        return Err(Error::merge(format!("RegMean needs at least 2 models, got {}", models.len())));
    }
    if grams.len() != models.len() {
        return Err(Error::merge(format!("{} models but {} Gram sets", models.len(), grams.len())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma = {gamma} is outside [0, 1]")));
    }
    require_compatible(models)?;

    let first = models[0];
    let covered: std::collections::BTreeSet<&str> =
        grams.iter().flat_map(|g| g.grams.keys().map(String::as_str)).collect();
    for name in &covered {
        let t = first
            .get(name)
            .ok_or_else(|| Error::merge(format!("Gram {name:?} has no matching model tensor")))?;
        let &[_, fan_in] = t.shape() else {
            return Err(Error::merge(format!("Gram-covered tensor {name:?} is not 2-D: {:?}", t.shape())));
        };
        for (j, g) in grams.iter().enumerate() {
            let gram = g
                .grams
                .get(*name)
                .ok_or_else(|| Error::merge(format!("Gram set {j} lacks {name:?}")))?;
            if gram.dim != fan_in {
                return Err(Error::merge(format!(
                    "Gram {name:?} of set {j} is {}×{}, tensor input dimension is {fan_in}",
                    gram.dim, gram.dim
                )));
            }
        }
    }

    let n_models = models.len() as f64;
    let tensors = par_map(first.names(), |name| {
        let reference = &first.tensors[name];
        let dtype = out.resolve(reference.dtype());
        let shape = reference.shape().to_vec();
        if !covered.contains(name) {
            let mut acc = vec![0.0f64; reference.numel()];
            for m in models {
                for (a, v) in acc.iter_mut().zip(m.tensors[name].to_f64()) {
                    *a += v;
                }
            }
            let mean: Vec<f32> = acc.iter().map(|s| (s / n_models) as f32).collect();
            return Ok(Tensor::from_f32(dtype, shape, &mean));
        }

        let (rows, d) = (shape[0], shape[1]);
        let mut lhs = vec![0.0f64; rows * d]; // Σ W_j G′_j
        let mut sum = vec![0.0f64; d * d]; // Σ G′_j
        for (m, g) in models.iter().zip(grams) {
            let shrunk = g.grams[name].shrunk(gamma);
            let w = m.tensors[name].to_f64();
            for r in 0..rows {
                let wr = &w[r * d..(r + 1) * d];
                let out_row = &mut lhs[r * d..(r + 1) * d];
                for (k, wk) in wr.iter().enumerate() {
                    if *wk == 0.0 {
                        continue;
                    }
                    let grow = &shrunk[k * d..(k + 1) * d];
                    for c in 0..d {
                        out_row[c] += wk * grow[c];
                    }
                }
            }
            for (s, v) in sum.iter_mut().zip(&shrunk) {
                *s += v;
            }
        }
        // X·S = B  ⇔  S·xᵣ = bᵣ per row, S symmetric.
        let l = factor_with_jitter(&sum, d, name)?;
        for r in 0..rows {
            cholesky_solve(&l, d, &mut lhs[r * d..(r + 1) * d]);
        }
        if lhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("RegMean produced non-finite values for {name:?}")));
        }
        Ok(Tensor::from_f64(dtype, shape, &lhs))
    })?;
    Ok(tagged(tensors, "regmean", &[("gamma", gamma.to_string())]))
}
