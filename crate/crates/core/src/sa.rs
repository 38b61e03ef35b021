//! Selective attention merging.
//!
//! Only the Q, K and V projections are merged, as a per-block convex
//! combination of two task vectors taken against a shared pretrained base:
//!
//! ```text
//! out_i = base + λ_i·(m1 − base) + (1 − λ_i)·(m2 − base),   λ_i = λ^{α_i}
//! ```
//!
//! `m1` is the target-domain fine-tune and `m2` the donor. Every other
//! tensor, including the attention output projection, is copied from `m1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, Tensor};
use crate::dtype::OutDtype;
use crate::error::{Error, Result};
use crate::merge::{par_map, require_compatible, METHOD_KEY};
use crate::schema::{LayerMap, RoleKind, Stack};

/// Ranges λ and α were tuned over; values outside only produce a warning.
pub const TUNED_LAMBDA: (f64, f64) = (0.1, 0.3);
pub const TUNED_ALPHA: (f64, f64) = (0.7, 0.9);

/// How the exponent `α_i` grows with the block index `i` of a stack of depth `L`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `α_i = α·i / max(L − 1, 1)`: pure `m1` at block 0, `λ^α` at the top.
    #[default]
    NormalizedDepth,
    /// `α_i = α·i`.
    Unnormalized,
    /// `α_i = α` for every block.
    Constant,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::NormalizedDepth => "normalized-depth",
            ScheduleMode::Unnormalized => "unnormalized",
            ScheduleMode::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized-depth" | "normalized_depth" => Ok(ScheduleMode::NormalizedDepth),
            "unnormalized" => Ok(ScheduleMode::Unnormalized),
            "constant" => Ok(ScheduleMode::Constant),
            other => Err(Error::Config(format!(
                "unknown schedule_mode {other:?} (expected normalized-depth, unnormalized or constant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingSchedule {
    pub lambda: f64,
    pub alpha: f64,
    pub mode: ScheduleMode,
    pub per_stack: BTreeMap<Stack, Vec<f64>>,
}

impl MixingSchedule {
    /// `λ_i` for a block, or `None` past the stack depth.
    pub fn ratio(&self, stack: Stack, block: usize) -> Option<f64> {
        self.per_stack.get(&stack).and_then(|v| v.get(block)).copied()
    }
}

/// Exponent `α_i` of block `i` in a stack of `depth` blocks.
pub fn block_exponent(alpha: f64, i: usize, depth: usize, mode: ScheduleMode) -> f64 {
    match mode {
        ScheduleMode::NormalizedDepth => alpha * i as f64 / depth.saturating_sub(1).max(1) as f64,
        ScheduleMode::Unnormalized => alpha * i as f64,
        ScheduleMode::Constant => alpha,
    }
}

/// Per-stack ratios `λ_i = λ^{α_i}`.
pub fn mixing_schedule(
    lambda: f64,
    alpha: f64,
    depths: &[(Stack, usize)],
    mode: ScheduleMode,
) -> Result<MixingSchedule> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda = {lambda} is outside [0, 1]")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha = {alpha} must be positive")));
    }
    let per_stack = depths
        .iter()
        .map(|&(stack, depth)| {
            let ratios = (0..depth)
                .map(|i| lambda.powf(block_exponent(alpha, i, depth, mode)))
                .collect();
            (stack, ratios)
        })
        .collect();
    Ok(MixingSchedule { lambda, alpha, mode, per_stack })
}

/// Warnings for λ or α outside the tuned ranges.
pub fn range_warnings(lambda: f64, alpha: f64) -> Vec<String> {
    let mut w = Vec::new();
    if lambda < TUNED_LAMBDA.0 || lambda > TUNED_LAMBDA.1 {
        w.push(format!(
            "lambda = {lambda} is outside the tuned range [{}, {}]",
            TUNED_LAMBDA.0, TUNED_LAMBDA.1
        ));
    }
    if alpha < TUNED_ALPHA.0 || alpha > TUNED_ALPHA.1 {
        w.push(format!(
            "alpha = {alpha} is outside the tuned range [{}, {}]",
            TUNED_ALPHA.0, TUNED_ALPHA.1
        ));
    }
    w
}

#[derive(Debug, Clone)]
pub struct SaMergeJob<'a> {
    /// Pretrained model both fine-tunes started from.
    pub base: &'a Checkpoint,
    /// Target-domain fine-tune; supplies every non-merged tensor.
    pub m1: &'a Checkpoint,
    /// Donor fine-tune.
    pub m2: &'a Checkpoint,
    /// Built from `m1`.
    pub layer_map: &'a LayerMap,
    pub schedule: &'a MixingSchedule,
    pub include_biases: bool,
}

impl SaMergeJob<'_> {
    /// Whether the tensor takes part in the merge, and at which ratio.
    pub fn ratio_for(&self, name: &str) -> Result<Option<f64>> {
        let role = self.layer_map.role(name);
        if !role.kind.is_qkv() || (role.is_bias && !self.include_biases) {
            return Ok(None);
        }
        let block = role
            .block_index
            .ok_or_else(|| Error::schema(format!("attention tensor {name:?} has no block index")))?;
        self.schedule.ratio(role.stack, block).map(Some).ok_or_else(|| {
            Error::schema(format!(
                "{name:?} is {} block {block}, but the schedule covers only {} blocks",
                role.stack,
                self.schedule.per_stack.get(&role.stack).map_or(0, Vec::len)
            ))
        })
    }
}

pub fn sa_merge(job: &SaMergeJob, out: OutDtype) -> Result<Checkpoint> {
    require_compatible(&[job.m1, job.base, job.m2])?;
    if let Some(missing) = job.m1.names().find(|n| !job.layer_map.roles.contains_key(*n)) {
        return Err(Error::schema(format!("layer map does not cover {missing:?}")));
    }
    let tensors = par_map(job.m1.names(), |name| {
        let t1 = &job.m1.tensors[name];
        let Some(ratio) = job.ratio_for(name)? else {
            return Ok(if out == OutDtype::Keep { t1.clone() } else { t1.cast(out.resolve(t1.dtype())) });
        };
        let l1 = ratio as f32;
        let l2 = (1.0 - ratio) as f32;
        let b = job.base.tensors[name].to_f32();
        let v1 = t1.to_f32();
        let v2 = job.m2.tensors[name].to_f32();
        let merged: Vec<f32> = b
            .iter()
            .zip(v1.iter().zip(&v2))
            .map(|(b, (x1, x2))| {
                let tau1 = x1 - b;
                let tau2 = x2 - b;
                b + l1 * tau1 + l2 * tau2
            })
            .collect();
        Ok(Tensor::from_f32(out.resolve(t1.dtype()), t1.shape().to_vec(), &merged))
    })?;
    let mut c = Checkpoint { tensors, metadata: BTreeMap::new() };
    c.metadata.insert(METHOD_KEY.into(), "sa".into());
    c.metadata.insert("samerge.merge.lambda".into(), job.schedule.lambda.to_string());
    c.metadata.insert("samerge.merge.alpha".into(), job.schedule.alpha.to_string());
    c.metadata.insert("samerge.merge.schedule_mode".into(), job.schedule.mode.to_string());
    c.metadata.insert("samerge.merge.include_biases".into(), job.include_biases.to_string());
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockRow {
    pub block: usize,
    pub lambda: f64,
    pub merged_tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub per_stack: BTreeMap<Stack, Vec<BlockRow>>,
    pub merged_tensors: usize,
    pub retained_tensors: usize,
    /// Largest `|out − m1|` over merged tensors (f64 of the decoded values).
    pub max_abs_diff_vs_m1: f64,
}

pub fn sa_merge_report(job: &SaMergeJob, out: &Checkpoint) -> Result<MergeReport> {
    let mut per_stack: BTreeMap<Stack, Vec<BlockRow>> = BTreeMap::new();
    for stack in [Stack::Encoder, Stack::Decoder] {
        let rows = (0..job.layer_map.depth(stack))
            .map(|block| BlockRow {
                block,
                lambda: job.schedule.ratio(stack, block).unwrap_or(f64::NAN),
                merged_tensors: 0,
            })
            .collect();
        per_stack.insert(stack, rows);
    }
    let mut merged = 0;
    let mut retained = 0;
    let mut max_diff = 0.0f64;
    for name in job.m1.names() {
        if job.ratio_for(name)?.is_none() {
            retained += 1;
            continue;
        }
        merged += 1;
        let role = job.layer_map.role(name);
        if let (Some(rows), Some(b)) = (per_stack.get_mut(&role.stack), role.block_index) {
            if let Some(row) = rows.get_mut(b) {
                row.merged_tensors += 1;
            }
        }
        let produced = out
            .get(name)
            .ok_or_else(|| Error::merge(format!("merged output lacks {name:?}")))?
            .to_f64();
        for (o, m) in produced.iter().zip(job.m1.tensors[name].to_f64()) {
            max_diff = max_diff.max((o - m).abs());
        }
    }
    Ok(MergeReport { per_stack, merged_tensors: merged, retained_tensors: retained, max_abs_diff_vs_m1: max_diff })
}

/// Kinds that [`sa_merge`] mixes.
pub const MERGED_KINDS: [RoleKind; 3] = [RoleKind::AttnQ, RoleKind::AttnK, RoleKind::AttnV];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_lambda_is_all_ones() {
        for mode in [ScheduleMode::NormalizedDepth, ScheduleMode::Unnormalized, ScheduleMode::Constant] {
            let s = mixing_schedule(1.0, 0.8, &[(Stack::Encoder, 6), (Stack::Decoder, 3)], mode).unwrap();
            assert!(s.per_stack.values().flatten().all(|l| *l == 1.0));
        }
    }

    #[test]
    fn first_block_is_pure_target() {
        let s = mixing_schedule(0.3, 0.9, &[(Stack::Encoder, 4)], ScheduleMode::NormalizedDepth).unwrap();
        assert_eq!(s.per_stack[&Stack::Encoder][0], 1.0);
    }

    #[test]
    fn depth_zero_and_one() {
        let s = mixing_schedule(0.2, 0.8, &[(Stack::Encoder, 1), (Stack::Decoder, 0)], ScheduleMode::NormalizedDepth)
            .unwrap();
        assert_eq!(s.per_stack[&Stack::Encoder], [1.0]);
        assert!(s.per_stack[&Stack::Decoder].is_empty());
    }

    #[test]
    fn constant_mode_is_flat() {
        let s = mixing_schedule(0.2, 0.8, &[(Stack::Encoder, 3)], ScheduleMode::Constant).unwrap();
        let expected = 0.2f64.powf(0.8);
        assert!(s.per_stack[&Stack::Encoder].iter().all(|l| *l == expected));
        let s = mixing_schedule(0.0, 0.8, &[(Stack::Encoder, 3)], ScheduleMode::Constant).unwrap();
        assert!(s.per_stack[&Stack::Encoder].iter().all(|l| *l == 0.0));
    }

    #[test]
    fn unnormalized_grows_with_index() {
        let s = mixing_schedule(0.5, 1.0, &[(Stack::Encoder, 3)], ScheduleMode::Unnormalized).unwrap();
        assert_eq!(s.per_stack[&Stack::Encoder], [1.0, 0.5, 0.25]);
    }

    #[test]
    fn rejects_bad_parameters_and_warns_outside_tuned_range() {
        assert!(mixing_schedule(1.2, 0.8, &[], ScheduleMode::Constant).is_err());
        assert!(mixing_schedule(0.2, 0.0, &[], ScheduleMode::Constant).is_err());
        assert!(range_warnings(0.2, 0.8).is_empty());
        assert_eq!(range_warnings(0.5, 1.0).len(), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("constant".parse::<ScheduleMode>().unwrap(), ScheduleMode::Constant);
        assert_eq!(ScheduleMode::NormalizedDepth.to_string(), "normalized-depth");
        assert!("linear".parse::<ScheduleMode>().is_err());
    }
}
