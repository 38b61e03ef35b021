//! Baseline merging kernels over compatible checkpoints and task vectors.
//!
//! Elementwise arithmetic is f32 after widening; reductions (dot products,
//! norms, sign-election sums, means) are f64 in fixed sequential order. Work
//! is split per tensor across the rayon pool, so outputs are bit-identical
//! at any thread count.

mod regmean;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::container::{validate_compatibility, Checkpoint, CompatibilityReport, Mismatch, MismatchReason, Tensor};
use crate::dtype::{Dtype, OutDtype};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub use regmean::{compute_gram, regmean_merge, Gram, GramSet, GRAM_SAMPLES_KEY};

pub const METHOD_KEY: &str = "samerge.merge.method";
pub const TV_FINGERPRINT_KEY: &str = "samerge.tv.base_fingerprint";
pub const TV_LABEL_KEY: &str = "samerge.tv.label";

/// Parameter deltas against a base checkpoint, always stored as f32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor>,
    pub base_fingerprint: u64,
    pub source_label: String,
}

impl TaskVector {
    pub fn numel(&self) -> usize {
        self.deltas.values().map(Tensor::numel).sum()
    }

    /// Container form: f32 deltas with the fingerprint and label in metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint { tensors: self.deltas.clone(), metadata: BTreeMap::new() };
        c.metadata.insert(TV_FINGERPRINT_KEY.into(), format!("{:016x}", self.base_fingerprint));
        c.metadata.insert(TV_LABEL_KEY.into(), self.source_label.clone());
        c
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let fp = c
            .metadata
            .get(TV_FINGERPRINT_KEY)
            .ok_or_else(|| Error::format(format!("task vector lacks {TV_FINGERPRINT_KEY} metadata")))?;
        let base_fingerprint = u64::from_str_radix(fp, 16)
            .map_err(|_| Error::format(format!("bad base fingerprint {fp:?}")))?;
        let source_label = c.metadata.get(TV_LABEL_KEY).cloned().unwrap_or_default();
        if let Some((name, t)) = c.tensors.iter().find(|(_, t)| t.dtype() != Dtype::F32) {
            return Err(Error::format(format!("task vector tensor {name:?} is {}, expected F32", t.dtype())));
        }
        Ok(Self { deltas: c.tensors, base_fingerprint, source_label })
    }
}

/// Run `f` for every name on the rayon pool and collect in canonical order.
pub(crate) fn par_map<'a, I, F>(names: I, f: F) -> Result<BTreeMap<String, Tensor>>
where
    I: IntoIterator<Item = &'a str>,
    F: Fn(&str) -> Result<Tensor> + Sync + Send,
{
    let names: Vec<&str> = names.into_iter().collect();
    let out: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|n| f(n).map(|t| (n.to_string(), t)))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().collect())
}

pub(crate) fn require_compatible(ckpts: &[&Checkpoint]) -> Result<()> {
    validate_compatibility(ckpts).into_result()
}

/// Names and shapes of a task vector must mirror the checkpoint it applies to.
pub(crate) fn require_tv_matches(base: &Checkpoint, tv: &TaskVector) -> Result<()> {
    let mut mismatches = Vec::new();
    for (name, t) in &base.tensors {
        match tv.deltas.get(name) {
            None => mismatches.push(Mismatch { name: name.clone(), reason: MismatchReason::MissingInB, other: 1 }),
            Some(d) if d.shape() != t.shape() => {
                mismatches.push(Mismatch { name: name.clone(), reason: MismatchReason::ShapeMismatch, other: 1 })
            }
            Some(_) => {}
        }
    }
    for name in tv.deltas.keys() {
        if !base.tensors.contains_key(name) {
            mismatches.push(Mismatch { name: name.clone(), reason: MismatchReason::MissingInA, other: 1 });
        }
    }
    CompatibilityReport { compatible: mismatches.is_empty(), mismatches }.into_result()
}

pub(crate) fn require_provenance(base: &Checkpoint, tvs: &[&TaskVector], allow_cross_base: bool) -> Result<()> {
    if allow_cross_base {
        return Ok(());
    }
    let fp = base.fingerprint();
    for tv in tvs {
        if tv.base_fingerprint != fp {
            return Err(Error::Provenance(format!(
                "task vector {:?} was taken against base {:016x}, target is {fp:016x}",
                tv.source_label, tv.base_fingerprint
            )));
        }
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
    }
    Ok(())
}

fn tagged(tensors: BTreeMap<String, Tensor>, method: &str, params: &[(&str, String)]) -> Checkpoint {
    let mut c = Checkpoint { tensors, metadata: BTreeMap::new() };
    c.metadata.insert(METHOD_KEY.into(), method.into());
    for (k, v) in params {
        c.metadata.insert(format!("samerge.merge.{k}"), v.clone());
    }
    c
}

#[inline]
fn lerp_values(a: &[f32], b: &[f32], w: f64) -> Vec<f32> {
    let wa = w as f32;
    let wb = (1.0 - w) as f32;
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// `w·a + (1 − w)·b` per element.
pub fn lerp(a: &Checkpoint, b: &Checkpoint, w: f64, out: OutDtype) -> Result<Checkpoint> {
    check_unit("w", w)?;
    require_compatible(&[a, b])?;
    let tensors = par_map(a.names(), |name| {
        let (ta, tb) = (&a.tensors[name], &b.tensors[name]);
        let v = lerp_values(&ta.to_f32(), &tb.to_f32(), w);
        Ok(Tensor::from_f32(out.resolve(ta.dtype()), ta.shape().to_vec(), &v))
    })?;
    Ok(tagged(tensors, "lerp", &[("w", w.to_string())]))
}

pub const SLERP_EPS: f64 = 1e-6;

/// Spherical interpolation of one flattened tensor pair; falls back to
/// `lerp(w = 1 − t)` for near-colinear pairs or near-zero norms.
pub fn slerp_values(a: &[f32], b: &[f32], t: f64, eps: f64) -> Vec<f32> {
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na < eps || nb < eps {
        return lerp_values(a, b, 1.0 - t);
    }
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) / na) * (f64::from(*y) / nb))
        .sum();
    let omega = dot.clamp(-1.0, 1.0).acos();
    let sin_omega = omega.sin();
    if sin_omega < eps {
        return lerp_values(a, b, 1.0 - t);
    }
    let ca = ((1.0 - t) * omega).sin() / sin_omega;
    let cb = (t * omega).sin() / sin_omega;
    a.iter()
        .zip(b)
        .map(|(x, y)| (ca * f64::from(*x) + cb * f64::from(*y)) as f32)
        .collect()
}

/// Per-tensor spherical interpolation; `t = 0` yields `a`, `t = 1` yields `b`.
pub fn slerp(a: &Checkpoint, b: &Checkpoint, t: f64, eps: f64, out: OutDtype) -> Result<Checkpoint> {
    check_unit("t", t)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("slerp eps must be positive, got {eps}")));
    }
    require_compatible(&[a, b])?;
    let tensors = par_map(a.names(), |name| {
        let (ta, tb) = (&a.tensors[name], &b.tensors[name]);
        let v = slerp_values(&ta.to_f32(), &tb.to_f32(), t, eps);
        Ok(Tensor::from_f32(out.resolve(ta.dtype()), ta.shape().to_vec(), &v))
    })?;
    Ok(tagged(tensors, "slerp", &[("t", t.to_string()), ("eps", eps.to_string())]))
}

/// Elementwise `x − y` in f32 for every tensor of two compatible checkpoints.
pub(crate) fn difference(x: &Checkpoint, y: &Checkpoint) -> Result<BTreeMap<String, Tensor>> {
    require_compatible(&[x, y])?;
    par_map(x.names(), |name| {
        let (tx, ty) = (&x.tensors[name], &y.tensors[name]);
        let v: Vec<f32> = tx.to_f32().iter().zip(ty.to_f32()).map(|(p, q)| p - q).collect();
        Ok(Tensor::from_f32(Dtype::F32, tx.shape().to_vec(), &v))
    })
}

/// `model − base`.
pub fn extract_task_vector(model: &Checkpoint, base: &Checkpoint, label: &str) -> Result<TaskVector> {
    Ok(TaskVector {
        deltas: difference(model, base)?,
        base_fingerprint: base.fingerprint(),
        source_label: label.to_string(),
    })
}

/// `base + Σ scale_j·τ_j` accumulated in f32 in list order. Zero scales
/// contribute nothing, so an all-zero scale list returns `base` unchanged.
pub fn apply_task_vectors(
    base: &Checkpoint,
    tvs: &[(&TaskVector, f64)],
    allow_cross_base: bool,
    out: OutDtype,
) -> Result<Checkpoint> {
    for (tv, scale) in tvs {
        require_tv_matches(base, tv)?;
        if !scale.is_finite() {
            return Err(Error::Config(format!("scale for {:?} is not finite", tv.source_label)));
        }
    }
    let only: Vec<&TaskVector> = tvs.iter().map(|(tv, _)| *tv).collect();
    require_provenance(base, &only, allow_cross_base)?;
    let tensors = par_map(base.names(), |name| {
        let tb = &base.tensors[name];
        let mut acc = tb.to_f32();
        for (tv, scale) in tvs {
            if *scale == 0.0 {
                continue;
            }
            let s = *scale as f32;
            for (x, d) in acc.iter_mut().zip(tv.deltas[name].to_f32()) {
                *x += s * d;
            }
        }
        Ok(Tensor::from_f32(out.resolve(tb.dtype()), tb.shape().to_vec(), &acc))
    })?;
    let scales: Vec<String> = tvs.iter().map(|(_, s)| s.to_string()).collect();
    Ok(tagged(tensors, "ta", &[("scales", scales.join(","))]))
}

/// Number of entries kept out of `n` at the given density: `⌈density·n⌉`,
/// treating products within 1e-9 relative of an integer as that integer so
/// that e.g. `0.7 × 10` keeps 7 rather than 8.
pub fn keep_count(density: f64, n: usize) -> usize {
    let x = density * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Indices of the `keep` largest-magnitude values; equal magnitudes prefer
/// the lower index.
fn top_magnitude_mask(values: &[f32], keep: usize) -> Vec<bool> {
    let n = values.len();
    if keep >= n {
        return vec![true; n];
    }
    let mut mask = vec![false; n];
    if keep == 0 {
        return mask;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(keep - 1, |&i, &j| {
        values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j))
    });
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    /// Top `⌈k·n⌉` within each tensor.
    #[default]
    PerTensor,
    /// Top `⌈k·N⌉` across all tensors of a task vector (ties broken by
    /// canonical tensor order, then flat index).
    Global,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Disjoint mean of already-trimmed values for one element: elect the sign
/// of the sum, then average the entries that carry that sign.
#[inline]
fn elect_and_merge(trimmed: &[f32]) -> f32 {
    let total: f64 = trimmed.iter().map(|v| f64::from(*v)).sum();
    let elected = sign(total);
    if elected == 0 {
        return 0.0;
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for v in trimmed {
        let v = f64::from(*v);
        if sign(v) == elected {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64) as f32
    }
}

/// TIES merging: trim each task vector to its top-`density` magnitudes,
/// elect a sign per element, average the agreeing entries, and add
/// `scale × merged` to `base`.
pub fn ties_merge(
    base: &Checkpoint,
    tvs: &[&TaskVector],
    density: f64,
    scale: f64,
    scope: TrimScope,
    out: OutDtype,
) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::merge("TIES needs at least one task vector"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density = {density} is outside (0, 1]")));
    }
    if !scale.is_finite() {
        return Err(Error::Config("TIES scale is not finite".into()));
    }
    for tv in tvs {
        require_tv_matches(base, tv)?;
    }
    require_provenance(base, tvs, false)?;

    // Global scope: one mask per task vector, sliced per tensor below.
    let global_masks: Option<Vec<BTreeMap<&str, Vec<bool>>>> = (scope == TrimScope::Global).then(|| {
        tvs.iter()
            .map(|tv| {
                let flat: Vec<f32> = tv.deltas.values().flat_map(|t| t.to_f32()).collect();
                let mask = top_magnitude_mask(&flat, keep_count(density, flat.len()));
                let mut per = BTreeMap::new();
                let mut offset = 0;
                for (name, t) in &tv.deltas {
                    per.insert(name.as_str(), mask[offset..offset + t.numel()].to_vec());
                    offset += t.numel();
                }
                per
            })
            .collect()
    });

    let tensors = par_map(base.names(), |name| {
        let tb = &base.tensors[name];
        let n = tb.numel();
        let trimmed: Vec<Vec<f32>> = tvs
            .iter()
            .enumerate()
            .map(|(j, tv)| {
                let mut v = tv.deltas[name].to_f32();
                let mask = match &global_masks {
                    Some(m) => m[j][name].clone(),
                    None => top_magnitude_mask(&v, keep_count(density, n)),
                };
                for (x, keep) in v.iter_mut().zip(mask) {
                    if !keep {
                        *x = 0.0;
                    }
                }
                v
            })
            .collect();
        let s = scale as f32;
        let mut column = vec![0.0f32; tvs.len()];
        let values: Vec<f32> = tb
            .to_f32()
            .into_iter()
            .enumerate()
            .map(|(e, b)| {
                for (c, t) in column.iter_mut().zip(&trimmed) {
                    *c = t[e];
                }
                b + s * elect_and_merge(&column)
            })
            .collect();
        Ok(Tensor::from_f32(out.resolve(tb.dtype()), tb.shape().to_vec(), &values))
    })?;
    let scope_name = match scope {
        TrimScope::PerTensor => "per_tensor",
        TrimScope::Global => "global",
    };
    Ok(tagged(
        tensors,
        "ties",
        &[("density", density.to_string()), ("scale", scale.to_string()), ("trim_scope", scope_name.into())],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareConfig {
    pub drop_rate: f64,
    pub master_seed: u64,
}

/// Drop each delta with probability `p` and rescale survivors by
/// `1 / (1 − p)`. Each tensor draws from its own stream seeded from the
/// master seed and the tensor name.
pub fn dare_sparsify(tv: &TaskVector, cfg: DareConfig) -> Result<TaskVector> {
    let p = cfg.drop_rate;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("drop_rate = {p} is outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(tv.clone());
    }
    let rescale = 1.0 / (1.0 - p);
    let deltas = par_map(tv.deltas.keys().map(String::as_str), |name| {
        let t = &tv.deltas[name];
        let mut rng = SplitMix64::for_tensor(cfg.master_seed, name);
        let v: Vec<f32> = t
            .to_f32()
            .into_iter()
            .map(|x| if rng.next_f64() < p { 0.0 } else { (f64::from(x) * rescale) as f32 })
            .collect();
        Ok(Tensor::from_f32(Dtype::F32, t.shape().to_vec(), &v))
    })?;
    Ok(TaskVector { deltas, base_fingerprint: tv.base_fingerprint, source_label: tv.source_label.clone() })
}
