//! Execute a validated merge plan.

use std::path::Path;

use log::info;
use samerge_core::merge::{
    apply_task_vectors, dare_sparsify, extract_task_vector, lerp, regmean_merge, slerp, ties_merge, DareConfig,
    GramSet, TaskVector,
};
use samerge_core::sa::{mixing_schedule, sa_merge, sa_merge_report, SaMergeJob};
use samerge_core::schema::{build_layer_map, resolve_scheme, Stack};
use samerge_core::container::MismatchReason;
use samerge_core::{load_checkpoint, save_checkpoint, validate_compatibility, Checkpoint, OutDtype, Result};
use serde_json::json;

use crate::recipe::{Plan, Resolved};
use crate::report::{JobReport, Stats};

fn load(report: &mut JobReport, role: &str, path: &Path) -> Result<Checkpoint> {
    info!("loading {role} from {}", path.display());
    let c = load_checkpoint(path)?;
    report.record_input(role, path, &c);
    Ok(c)
}

fn label_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn task_vectors(base: &Checkpoint, models: &[Checkpoint], paths: &[std::path::PathBuf]) -> Result<Vec<TaskVector>> {
    models.iter().zip(paths).map(|(m, p)| extract_task_vector(m, base, &label_of(p))).collect()
}

pub fn save_output(report: &mut JobReport, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(ckpt, path)?;
    info!("wrote {} ({} tensors)", path.display(), ckpt.len());
    report.record_output(path, ckpt);
    Ok(())
}

/// Run one plan, filling `report` as it goes so that a failure still
/// leaves the inputs that were read.
pub fn run_plan(plan: &Plan, report: &mut JobReport) -> Result<()> {
    report.method = Some(plan.method.to_string());
    report.params = Some(serde_json::to_value(&plan.params).expect("params serialize"));
    report.warnings.extend(plan.warnings.iter().cloned());
    for w in &plan.warnings {
        log::warn!("{w}");
    }

    let base = match &plan.base {
        Some(p) => Some(load(report, "base", p)?),
        None => None,
    };
    let roles: Vec<String> = match plan.params {
        Resolved::Sa { .. } => vec!["m1".into(), "m2".into()],
        _ => (0..plan.models.len()).map(|i| format!("model{i}")).collect(),
    };
    let models = plan
        .models
        .iter()
        .zip(&roles)
        .map(|(p, r)| load(report, r, p))
        .collect::<Result<Vec<_>>>()?;
    let out = plan.out_dtype;

    let (merged, reference) = match &plan.params {
        Resolved::Lerp { w } => (lerp(&models[0], &models[1], *w, out)?, &models[0]),
        Resolved::Slerp { t, eps } => (slerp(&models[0], &models[1], *t, *eps, out)?, &models[0]),
        Resolved::Ta { scales } => {
            let base = base.as_ref().expect("planned with base");
            let tvs = task_vectors(base, &models, &plan.models)?;
            let pairs: Vec<(&TaskVector, f64)> = tvs.iter().zip(scales.iter().copied()).collect();
            (apply_task_vectors(base, &pairs, false, out)?, base)
        }
        Resolved::Ties { density, scale, trim_scope } => {
            let base = base.as_ref().expect("planned with base");
            let tvs = task_vectors(base, &models, &plan.models)?;
            let refs: Vec<&TaskVector> = tvs.iter().collect();
            (ties_merge(base, &refs, *density, *scale, *trim_scope, out)?, base)
        }
        Resolved::DareTa { drop_rate, scales } => {
            let base = base.as_ref().expect("planned with base");
            let tvs = task_vectors(base, &models, &plan.models)?;
            let sparse = tvs
                .iter()
                .enumerate()
                .map(|(j, tv)| {
                    dare_sparsify(tv, DareConfig { drop_rate: *drop_rate, master_seed: plan.seed.wrapping_add(j as u64) })
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(&TaskVector, f64)> = sparse.iter().zip(scales.iter().copied()).collect();
            let mut c = apply_task_vectors(base, &pairs, false, out)?;
            c.metadata.insert(samerge_core::merge::METHOD_KEY.into(), "dare_ta".into());
            c.metadata.insert("samerge.merge.drop_rate".into(), drop_rate.to_string());
            c.metadata.insert("samerge.merge.seed".into(), plan.seed.to_string());
            (c, base)
        }
        Resolved::Regmean { gamma } => {
            let grams = plan
                .grams
                .iter()
                .enumerate()
                .map(|(j, p)| load(report, &format!("gram{j}"), p).and_then(|c| GramSet::from_checkpoint(&c)))
                .collect::<Result<Vec<_>>>()?;
            let mrefs: Vec<&Checkpoint> = models.iter().collect();
            let grefs: Vec<&GramSet> = grams.iter().collect();
            (regmean_merge(&mrefs, &grefs, *gamma, out)?, &models[0])
        }
        Resolved::Sa { lambda, alpha, schedule_mode, include_biases } => {
            let base = base.as_ref().expect("planned with base");
            let (m1, m2) = (&models[0], &models[1]);
            let scheme = resolve_scheme(&plan.scheme, m1)?;
            info!("naming scheme {}", scheme.scheme_id);
            let layer_map = build_layer_map(m1, &scheme)?;
            let depths = [(Stack::Encoder, layer_map.encoder_depth), (Stack::Decoder, layer_map.decoder_depth)];
            let schedule = mixing_schedule(*lambda, *alpha, &depths, *schedule_mode)?;
            let job = SaMergeJob { base, m1, m2, layer_map: &layer_map, schedule: &schedule, include_biases: *include_biases };
            let c = sa_merge(&job, out)?;
            let sa_report = sa_merge_report(&job, &c)?;
            report.details = Some(json!({
                "scheme": scheme.scheme_id,
                "encoder_depth": layer_map.encoder_depth,
                "decoder_depth": layer_map.decoder_depth,
                "merge_report": sa_report,
            }));
            (c, m1)
        }
    };

    let mut check = validate_compatibility(&[reference, &merged]);
    if out != OutDtype::Keep {
        check.mismatches.retain(|m| m.reason != MismatchReason::DtypeMismatch);
        check.compatible = check.mismatches.is_empty();
    }
    check.into_result()?;
    report.stats = Some(Stats::compare(&merged, reference));
    save_output(report, &merged, &plan.output)
}
