//! Task-vector transfer across models and cosine-similarity analysis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, Tensor};
use crate::dtype::OutDtype;
use crate::error::{Error, Result};
use crate::merge::{difference, par_map, require_provenance, require_tv_matches, TaskVector, METHOD_KEY};
use crate::schema::NameFilter;

/// Norms below this make a cosine similarity 0 rather than NaN.
pub const NORM_FLOOR: f64 = 1e-30;

/// `m − m′`, recording `m`'s fingerprint as the base.
pub fn tv_difference(m: &Checkpoint, m_prime: &Checkpoint, label: &str) -> Result<TaskVector> {
    Ok(TaskVector {
        deltas: difference(m, m_prime)?,
        base_fingerprint: m.fingerprint(),
        source_label: label.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn from_int(s: i32) -> Result<Self> {
        match s {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(Error::Config(format!("sign must be +1 or -1, got {other}"))),
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferSpec<'a> {
    pub tv: &'a TaskVector,
    pub scale: f64,
    pub sign: Sign,
    pub allow_cross_base: bool,
}

/// `target + sign·scale·τ` in f32.
pub fn transfer_task_vector(target: &Checkpoint, spec: &TransferSpec, out: OutDtype) -> Result<Checkpoint> {
    if !spec.scale.is_finite() {
        return Err(Error::Config(format!("transfer scale {} is not finite", spec.scale)));
    }
    require_tv_matches(target, spec.tv)?;
    require_provenance(target, &[spec.tv], spec.allow_cross_base)?;
    let coeff = spec.sign.factor() * spec.scale;
    let tensors = par_map(target.names(), |name| {
        let t = &target.tensors[name];
        let dtype = out.resolve(t.dtype());
        if coeff == 0.0 {
            return Ok(t.cast(dtype));
        }
        let c = coeff as f32;
        let v: Vec<f32> = t
            .to_f32()
            .iter()
            .zip(spec.tv.deltas[name].to_f32())
            .map(|(x, d)| x + c * d)
            .collect();
        Ok(Tensor::from_f32(dtype, t.shape().to_vec(), &v))
    })?;
    let mut c = Checkpoint { tensors, metadata: BTreeMap::new() };
    c.metadata.insert(METHOD_KEY.into(), "tv-transfer".into());
    c.metadata.insert("samerge.merge.scale".into(), spec.scale.to_string());
    c.metadata.insert("samerge.merge.sign".into(), (spec.sign.factor() as i32).to_string());
    c.metadata.insert("samerge.merge.tv_label".into(), spec.tv.source_label.clone());
    Ok(c)
}

/// Concatenate the selected deltas in canonical name order, widened to f64.
pub fn flatten_concat(tv: &TaskVector, filter: &NameFilter) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut any = false;
    for (name, t) in &tv.deltas {
        if filter.matches(name) {
            any = true;
            out.extend(t.to_f64());
        }
    }
    if !any {
        return Err(Error::analysis(format!(
            "no tensor of task vector {:?} passes the filter",
            tv.source_label
        )));
    }
    Ok(out)
}

/// `⟨u, v⟩ / (‖u‖·‖v‖)` with sequential f64 sums, clamped to [−1, 1]; 0 if
/// either norm is below [`NORM_FLOOR`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::analysis(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    /// Header `label,<l1>,…,<ln>`, then one `label,v1,…,vn` row per task
    /// vector with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("label").chain(self.labels.iter().map(String::as_str));
        w.write_record(header).expect("write to memory");
        for (l, row) in self.labels.iter().zip(&self.values) {
            let cells = std::iter::once(l.clone()).chain(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(cells).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 input")
    }
}

fn require_same_layout(tvs: &[&TaskVector]) -> Result<()> {
    let Some((first, rest)) = tvs.split_first() else { return Ok(()) };
    for tv in rest {
        let same = first.deltas.len() == tv.deltas.len()
            && first
                .deltas
                .iter()
                .zip(&tv.deltas)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(Error::analysis(format!(
                "task vectors {:?} and {:?} have different tensor layouts",
                first.source_label, tv.source_label
            )));
        }
    }
    Ok(())
}

/// Cosine similarity of every pair, computed for `i ≤ j` and mirrored.
pub fn pairwise_similarity(tvs: &[&TaskVector], filter: &NameFilter) -> Result<SimilarityMatrix> {
    if tvs.len() < 2 {
        return Err(Error::analysis(format!("need at least 2 task vectors, got {}", tvs.len())));
    }
    require_same_layout(tvs)?;
    let flat: Vec<Vec<f64>> = tvs.par_iter().map(|tv| flatten_concat(tv, filter)).collect::<Result<_>>()?;
    let n = tvs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let sims: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| cosine_similarity(&flat[i], &flat[j]))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), s) in pairs.iter().zip(sims) {
        values[i][j] = s;
        values[j][i] = s;
    }
    Ok(SimilarityMatrix { labels: tvs.iter().map(|t| t.source_label.clone()).collect(), values })
}
