//! Subcommands other than `merge`.

use std::path::{Path, PathBuf};

use log::info;
use samerge_core::analysis::{pairwise_similarity, transfer_task_vector, tv_difference, Sign, TransferSpec};
use samerge_core::fixtures::{generate_synthetic_checkpoint, make_family, FixtureSpec};
use samerge_core::merge::{compute_gram, extract_task_vector, TaskVector};
use samerge_core::schema::{build_layer_map, detect_scheme, resolve_scheme, NameFilter, NamingScheme, RoleKind};
use samerge_core::{load_checkpoint, validate_compatibility, Checkpoint, Dtype, Error, OutDtype, Result};
use serde_json::json;

use crate::heatmap::emit_heatmap;
use crate::report::{JobReport, Stats};
use crate::run::save_output;

fn load(report: &mut JobReport, role: &str, path: &Path) -> Result<Checkpoint> {
    info!("loading {role} from {}", path.display());
    let c = load_checkpoint(path)?;
    report.record_input(role, path, &c);
    Ok(c)
}

fn default_label(label: Option<&str>, path: &Path) -> String {
    label.map(str::to_string).unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    })
}

fn save_tv(report: &mut JobReport, tv: &TaskVector, out: &Path) -> Result<()> {
    let c = tv.to_checkpoint();
    save_output(report, &c, out)?;
    report.details = Some(json!({
        "label": tv.source_label,
        "base_fingerprint": format!("{:016x}", tv.base_fingerprint),
        "numel": tv.numel(),
    }));
    Ok(())
}

/// `model − base`.
pub fn tv_extract(model: &Path, base: &Path, out: &Path, label: Option<&str>, report: &mut JobReport) -> Result<()> {
    let b = load(report, "base", base)?;
    let m = load(report, "model", model)?;
    let tv = extract_task_vector(&m, &b, &default_label(label, model))?;
    save_tv(report, &tv, out)
}

/// `m − m′`.
pub fn tv_diff(m: &Path, m_prime: &Path, out: &Path, label: Option<&str>, report: &mut JobReport) -> Result<()> {
    let a = load(report, "m", m)?;
    let b = load(report, "m_prime", m_prime)?;
    let tv = tv_difference(&a, &b, &default_label(label, m_prime))?;
    save_tv(report, &tv, out)
}

pub struct ApplyArgs<'a> {
    pub target: &'a Path,
    pub tv: &'a Path,
    pub scale: f64,
    pub sign: i32,
    pub allow_cross_base: bool,
    pub out_dtype: OutDtype,
    pub out: &'a Path,
}

pub fn tv_apply(a: &ApplyArgs, report: &mut JobReport) -> Result<()> {
    let sign = Sign::from_int(a.sign)?;
    if !a.scale.is_finite() {
        return Err(Error::Config(format!("scale {} is not finite", a.scale)));
    }
    report.params = Some(json!({ "scale": a.scale, "sign": a.sign, "allow_cross_base": a.allow_cross_base }));
    let target = load(report, "target", a.target)?;
    let tv = TaskVector::from_checkpoint(load(report, "tv", a.tv)?)?;
    let spec = TransferSpec { tv: &tv, scale: a.scale, sign, allow_cross_base: a.allow_cross_base };
    if tv.base_fingerprint != target.fingerprint() {
        report.warnings.push(format!(
            "task vector {:?} was extracted against a different base; applying across bases",
            tv.source_label
        ));
    }
    let out = transfer_task_vector(&target, &spec, a.out_dtype)?;
    report.stats = Some(Stats::compare(&out, &target));
    save_output(report, &out, a.out)
}

pub struct AnalyzeArgs<'a> {
    pub tvs: &'a [PathBuf],
    pub filter: &'a [String],
    pub roles: &'a [String],
    pub scheme: &'a str,
    pub csv: Option<&'a Path>,
    pub json: Option<&'a Path>,
    pub svg: Option<&'a Path>,
}

fn parse_role(s: &str) -> Result<RoleKind> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| Error::Config(format!("unknown role {s:?} (expected attn_q, attn_k, attn_v, attn_out or other)")))
}

pub fn analyze(a: &AnalyzeArgs, report: &mut JobReport) -> Result<()> {
    if a.tvs.len() < 2 {
        return Err(Error::Config(format!("analyze needs at least 2 task vectors, got {}", a.tvs.len())));
    }
    if !a.filter.is_empty() && !a.roles.is_empty() {
        return Err(Error::Config("--filter and --roles are mutually exclusive".into()));
    }
    let kinds = a.roles.iter().map(|r| parse_role(r)).collect::<Result<Vec<_>>>()?;
    let globs = if a.filter.is_empty() { None } else { Some(NameFilter::globs(a.filter)?) };
    let tvs = a
        .tvs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = load(report, &format!("tv{i}"), p)?;
            let mut tv = TaskVector::from_checkpoint(c)?;
            if tv.source_label.is_empty() {
                tv.source_label = default_label(None, p);
            }
            Ok(tv)
        })
        .collect::<Result<Vec<_>>>()?;
    let filter = match (globs, kinds.is_empty()) {
        (Some(g), _) => g,
        (None, true) => NameFilter::All,
        (None, false) => {
            let probe = Checkpoint { tensors: tvs[0].deltas.clone(), metadata: Default::default() };
            NameFilter::Roles { scheme: resolve_scheme(a.scheme, &probe)?, kinds }
        }
    };
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    let m = pairwise_similarity(&refs, &filter)?;
    if let Some(p) = a.csv {
        std::fs::write(p, m.to_csv())?;
        info!("wrote {}", p.display());
    }
    if let Some(p) = a.json {
        std::fs::write(p, m.to_json())?;
        info!("wrote {}", p.display());
    }
    if let Some(p) = a.svg {
        emit_heatmap(&m, p)?;
        info!("wrote {}", p.display());
    }
    report.details = Some(serde_json::to_value(&m).expect("matrix serializes"));
    Ok(())
}

pub fn gram(activations: &[PathBuf], out: &Path, report: &mut JobReport) -> Result<()> {
    if activations.is_empty() {
        return Err(Error::Config("gram needs at least one activation file".into()));
    }
    let dumps = activations
        .iter()
        .enumerate()
        .map(|(i, p)| load(report, &format!("activations{i}"), p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = dumps.iter().collect();
    let set = compute_gram(&refs)?;
    report.details = Some(json!({
        "sample_count": set.sample_count,
        "grams": set.grams.iter().map(|(n, g)| (n.clone(), g.dim)).collect::<std::collections::BTreeMap<_, _>>(),
    }));
    save_output(report, &set.to_checkpoint(), out)
}

pub fn validate(paths: &[PathBuf], report: &mut JobReport) -> Result<()> {
    if paths.len() < 2 {
        return Err(Error::Config(format!("validate needs at least 2 checkpoints, got {}", paths.len())));
    }
    let ckpts = paths
        .iter()
        .enumerate()
        .map(|(i, p)| load(report, &format!("ckpt{i}"), p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let r = validate_compatibility(&refs);
    info!("{r}");
    report.details = Some(json!({
        "compatible": r.compatible,
        "summary": r.to_string(),
        "mismatches": r.mismatches,
    }));
    r.into_result()
}

/// Flag overrides for `gen-fixture`; `None` keeps the spec file's value.
#[derive(Debug, Default, Clone)]
pub struct FixtureOverrides {
    pub scheme: Option<String>,
    pub encoder_blocks: Option<usize>,
    pub decoder_blocks: Option<usize>,
    pub d_model: Option<usize>,
    pub seed: Option<u64>,
    pub extra_tensors: Option<usize>,
    pub dtype: Option<Dtype>,
}

pub fn fixture_spec(file: Option<&Path>, o: &FixtureOverrides) -> Result<FixtureSpec> {
    let mut spec = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("fixture spec: {e}")))?
        }
        None => FixtureSpec::default(),
    };
    if let Some(v) = &o.scheme {
        spec.scheme_id = v.clone();
    }
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { spec.$f = v; })* };
    }
    apply!(encoder_blocks, decoder_blocks, d_model, seed, extra_tensors, dtype);
    spec.validate()?;
    Ok(spec)
}

/// `dir/stem.ext` → `dir/stem-child<k>.ext`.
pub fn child_path(out: &Path, k: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-child{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}-child{k}"),
    };
    out.with_file_name(name)
}

pub fn gen_fixture(spec: &FixtureSpec, out: &Path, children: usize, sigma: f64, report: &mut JobReport) -> Result<()> {
    report.params = Some(serde_json::to_value(spec).expect("spec serializes"));
    if children == 0 {
        let c = generate_synthetic_checkpoint(spec)?;
        return save_output(report, &c, out);
    }
    let (base, kids) = make_family(spec, children, sigma)?;
    save_output(report, &base, out)?;
    let mut written = Vec::new();
    for (k, kid) in kids.iter().enumerate() {
        let p = child_path(out, k + 1);
        let mut sub = JobReport::new("gen-fixture");
        save_output(&mut sub, kid, &p)?;
        written.push(json!({ "path": p.display().to_string(), "fingerprint": kid.fingerprint_hex() }));
    }
    report.details = Some(json!({ "sigma": sigma, "children": written }));
    Ok(())
}

pub fn info(path: &Path, list_tensors: bool, report: &mut JobReport) -> Result<()> {
    let c = load(report, "checkpoint", path)?;
    let mut by_dtype = std::collections::BTreeMap::new();
    for (_, t) in c.iter() {
        *by_dtype.entry(t.dtype().as_str()).or_insert(0usize) += 1;
    }
    let layout = match detect_scheme(&c) {
        Ok(id) => {
            let scheme = NamingScheme::builtin(&id).expect("detected id is built in");
            match build_layer_map(&c, &scheme) {
                Ok(map) => json!({ "scheme": id, "encoder_depth": map.encoder_depth, "decoder_depth": map.decoder_depth }),
                Err(e) => json!({ "scheme": id, "layer_map_error": e.to_string() }),
            }
        }
        Err(_) => json!({ "scheme": null }),
    };
    let mut details = json!({
        "tensors": c.len(),
        "numel": c.numel(),
        "dtypes": by_dtype,
        "fingerprint": c.fingerprint_hex(),
        "metadata": c.metadata,
        "layout": layout,
    });
    if list_tensors {
        details["tensor_list"] = c
            .iter()
            .map(|(n, t)| json!({ "name": n, "dtype": t.dtype().as_str(), "shape": t.shape() }))
            .collect();
    }
    report.details = Some(details);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_paths() {
        assert_eq!(child_path(Path::new("/x/base.safetensors"), 2), Path::new("/x/base-child2.safetensors"));
        assert_eq!(child_path(Path::new("base"), 1), Path::new("base-child1"));
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.toml");
        std::fs::write(&p, "scheme_id = \"w2v2-like\"\nencoder_blocks = 3\nd_model = 4\n").unwrap();
        let spec = fixture_spec(Some(&p), &FixtureOverrides { d_model: Some(6), ..Default::default() }).unwrap();
        assert_eq!((spec.scheme_id.as_str(), spec.encoder_blocks, spec.d_model), ("w2v2-like", 3, 6));
        let bad = FixtureOverrides { d_model: Some(0), ..Default::default() };
        assert!(matches!(fixture_spec(None, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn roles_parse() {
        assert_eq!(parse_role("attn_q").unwrap(), RoleKind::AttnQ);
        assert!(parse_role("mlp").is_err());
    }
}
