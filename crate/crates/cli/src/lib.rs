//! Library side of the `samerge` command: recipes, job execution, reports
//! and heatmaps.

pub mod commands;
pub mod heatmap;
pub mod recipe;
pub mod report;
pub mod run;

use std::path::Path;
use std::time::Instant;

use samerge_core::{Error, Result};

use crate::recipe::{expand_sweeps, MergeRecipe, Plan, Sweep};
use crate::report::JobReport;

/// Reports of the runs attempted, and the error that stopped the batch.
#[derive(Debug)]
pub struct MergeOutcome {
    pub reports: Vec<JobReport>,
    pub error: Option<Error>,
}

fn plan_all(path: &Path, sweeps: &[Sweep]) -> Result<Vec<Plan>> {
    let recipe = MergeRecipe::from_file(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    expand_sweeps(&recipe, sweeps)?.into_iter().map(|(_, r)| r.plan(dir)).collect()
}

/// Parse, plan and run a recipe file, one report per sweep point. Every
/// plan is validated before the first checkpoint is read; the batch stops
/// at the first failing run.
pub fn merge_recipe_file(path: &Path, sweeps: &[Sweep]) -> MergeOutcome {
    let plans = match plan_all(path, sweeps) {
        Ok(p) => p,
        Err(e) => {
            let mut report = JobReport::new("merge");
            report.fail(&e);
            return MergeOutcome { reports: vec![report], error: Some(e) };
        }
    };
    let mut reports = Vec::with_capacity(plans.len());
    for plan in &plans {
        let started = Instant::now();
        let mut report = JobReport::new("merge");
        let outcome = run::run_plan(plan, &mut report);
        report.wall_time_s = started.elapsed().as_secs_f64();
        if let Err(e) = outcome {
            report.fail(&e);
            reports.push(report);
            return MergeOutcome { reports, error: Some(e) };
        }
        reports.push(report);
    }
    MergeOutcome { reports, error: None }
}
