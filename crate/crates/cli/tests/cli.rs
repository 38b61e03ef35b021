//! End-to-end behaviour of the `samerge` binary.

mod common;

use std::fs;

use common::{p, prepare_workspace, recipe_text, samerge, write_family, METHODS};
use samerge_core::fixtures::FixtureSpec;
use samerge_core::load_checkpoint;
use samerge_core::merge::TaskVector;

fn small() -> FixtureSpec {
    FixtureSpec { encoder_blocks: 2, decoder_blocks: 1, d_model: 4, seed: 3, ..Default::default() }
}

#[test]
fn lerp_with_unit_weight_returns_first_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, kids) = write_family(dir.path(), &small(), 2, 0.1);
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, "method = \"lerp\"\noutput = \"o.safetensors\"\n[models]\nlist = [\"child1.safetensors\", \"child2.safetensors\"]\n[hyperparams]\nw = 1.0\n").unwrap();
    let out = samerge(&["merge", p(&recipe)], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let merged = load_checkpoint(dir.path().join("o.safetensors")).unwrap();
    let a = load_checkpoint(&kids[0]).unwrap();
    assert_eq!(merged.tensors, a.tensors);
    assert_eq!(out.report["stats"]["merged"], 0);
}

#[test]
fn missing_role_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, "method = \"sa\"\noutput = \"o\"\n[models]\nbase = \"b\"\nm1 = \"a\"\n").unwrap();
    let out = samerge(&["merge", p(&recipe)], None);
    assert_eq!(out.code, 2);
    assert_eq!(out.report["status"], "error");
    assert!(out.report["error"]["message"].as_str().unwrap().contains("m2"));
    assert!(out.report["inputs"].as_array().unwrap().is_empty(), "nothing may be read before validation");
}

#[test]
fn missing_input_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, "method = \"lerp\"\noutput = \"o\"\n[models]\nlist = [\"nope.safetensors\", \"nope2.safetensors\"]\n").unwrap();
    assert_eq!(samerge(&["merge", p(&recipe)], None).code, 4);
}

#[test]
fn malformed_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.safetensors");
    fs::write(&bad, [255u8, 0, 0, 0, 0, 0, 0, 0, b'{']).unwrap();
    let out = samerge(&["info", p(&bad)], None);
    assert_eq!(out.code, 4);
    assert_eq!(out.report["error"]["kind"], "format");
}

#[test]
fn validate_reports_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let (base, kids) = write_family(dir.path(), &small(), 2, 0.1);
    let ok = samerge(&["validate", p(&base), p(&kids[0]), p(&kids[1])], None);
    assert_eq!(ok.code, 0);
    assert_eq!(ok.report["details"]["summary"], "compatible");

    let other = dir.path().join("other.safetensors");
    let g = samerge(&["gen-fixture", "--encoder-blocks", "3", "--d-model", "4", "--out", p(&other)], None);
    assert_eq!(g.code, 0);
    let bad = samerge(&["validate", p(&base), p(&other)], None);
    assert_eq!(bad.code, 3);
    assert!(!bad.report["details"]["mismatches"].as_array().unwrap().is_empty());
}

#[test]
fn analyze_writes_matrix_files() {
    let dir = tempfile::tempdir().unwrap();
    let (base, kids) = write_family(dir.path(), &small(), 3, 0.1);
    let mut tvs = Vec::new();
    for (k, kid) in kids.iter().enumerate() {
        let tv = dir.path().join(format!("tv{k}.safetensors"));
        let label = format!("aug{k}");
        let out = samerge(&["tv", "extract", "--model", p(kid), "--base", p(&base), "--out", p(&tv), "--label", &label], None);
        assert_eq!(out.code, 0, "{}", out.stderr);
        tvs.push(tv);
    }
    let (csv, json, svg) = (dir.path().join("m.csv"), dir.path().join("m.json"), dir.path().join("m.svg"));
    let mut args = vec!["analyze", "--tvs"];
    args.extend(tvs.iter().map(|t| p(t)));
    args.extend(["--csv", p(&csv), "--json", p(&json), "--svg", p(&svg)]);
    let out = samerge(&args, None);
    assert_eq!(out.code, 0, "{}", out.stderr);

    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows[0], ["label", "aug0", "aug1", "aug2"]);
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate().skip(1) {
        let diag: f64 = row[i].parse().unwrap();
        assert!((diag - 1.0).abs() < 1e-12);
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(m["labels"].as_array().unwrap().len(), 3);
    let svg_text = fs::read_to_string(&svg).unwrap();
    assert_eq!(svg_text.matches("class=\"cell\"").count(), 9);

    let roles = samerge(&["analyze", "--tvs", p(&tvs[0]), p(&tvs[1]), "--roles", "attn_q,attn_k"], None);
    assert_eq!(roles.code, 0, "{}", roles.stderr);
    let none = samerge(&["analyze", "--tvs", p(&tvs[0]), p(&tvs[1]), "--filter", "nothing.*"], None);
    assert_eq!(none.code, 3);
}

#[test]
fn tv_apply_scale_zero_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let (base, kids) = write_family(dir.path(), &small(), 2, 0.1);
    let tv = dir.path().join("tv.safetensors");
    assert_eq!(samerge(&["tv", "extract", "--model", p(&kids[0]), "--base", p(&base), "--out", p(&tv)], None).code, 0);

    let same = dir.path().join("same.safetensors");
    let out = samerge(&["tv", "apply", "--target", p(&base), "--tv", p(&tv), "--scale", "0", "--out", p(&same)], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(load_checkpoint(&same).unwrap().tensors, load_checkpoint(&base).unwrap().tensors);

    let back = dir.path().join("back.safetensors");
    assert_eq!(samerge(&["tv", "apply", "--target", p(&base), "--tv", p(&tv), "--out", p(&back)], None).code, 0);
    let (got, want) = (load_checkpoint(&back).unwrap(), load_checkpoint(&kids[0]).unwrap());
    for (name, t) in want.iter() {
        assert!(got.get(name).unwrap().max_ulp_distance(t).unwrap() <= 1);
    }

    let cross = dir.path().join("cross.safetensors");
    let denied = samerge(&["tv", "apply", "--target", p(&kids[1]), "--tv", p(&tv), "--sign", "-1", "--out", p(&cross)], None);
    assert_eq!(denied.code, 3);
    assert_eq!(denied.report["error"]["kind"], "provenance");
    let allowed = samerge(
        &["tv", "apply", "--target", p(&kids[1]), "--tv", p(&tv), "--sign", "-1", "--allow-cross-base", "--out", p(&cross)],
        None,
    );
    assert_eq!(allowed.code, 0);
    assert_eq!(allowed.report["warnings"].as_array().unwrap().len(), 1);
    assert_eq!(samerge(&["tv", "apply", "--target", p(&base), "--tv", p(&tv), "--sign", "2", "--out", p(&cross)], None).code, 2);
}

#[test]
fn tv_diff_orientation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, kids) = write_family(dir.path(), &small(), 2, 0.1);
    let d = dir.path().join("d.safetensors");
    let out = samerge(&["tv", "diff", "--m", p(&kids[0]), "--m-prime", p(&kids[1]), "--out", p(&d)], None);
    assert_eq!(out.code, 0);
    let tv = TaskVector::from_checkpoint(load_checkpoint(&d).unwrap()).unwrap();
    let (a, b) = (load_checkpoint(&kids[0]).unwrap(), load_checkpoint(&kids[1]).unwrap());
    let name = "encoder.layers.0.fc1.weight";
    let want: Vec<f32> = a.tensors[name].to_f32().iter().zip(b.tensors[name].to_f32()).map(|(x, y)| x - y).collect();
    assert_eq!(tv.deltas[name].to_f32(), want);
    assert_eq!(tv.base_fingerprint, a.fingerprint());
}

#[test]
fn every_method_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    prepare_workspace(dir.path(), &small());
    for method in METHODS {
        let recipe = dir.path().join(format!("{method}.toml"));
        fs::write(&recipe, recipe_text(method, &format!("{method}.safetensors"), 3)).unwrap();
        let first = samerge(&["merge", p(&recipe)], None);
        assert_eq!(first.code, 0, "{method}: {}", first.stderr);
        let bytes = fs::read(dir.path().join(format!("{method}.safetensors"))).unwrap();
        let second = samerge(&["merge", p(&recipe)], None);
        assert_eq!(fs::read(dir.path().join(format!("{method}.safetensors"))).unwrap(), bytes, "{method}");
        assert_eq!(first.report["output_fingerprint"], second.report["output_fingerprint"]);
        assert_eq!(first.report["stats"], second.report["stats"]);
    }
}

#[test]
fn out_dtype_converts() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), &small(), 2, 0.1);
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, recipe_text("sa", "half.safetensors", 2).replace("seed = 42", "seed = 42\nout_dtype = \"bf16\"")).unwrap();
    let out = samerge(&["merge", p(&recipe)], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let c = load_checkpoint(dir.path().join("half.safetensors")).unwrap();
    assert!(c.tensors.values().all(|t| t.dtype() == samerge_core::Dtype::BF16));
}

#[test]
fn sweep_writes_one_output_per_point() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), &small(), 2, 0.1);
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, recipe_text("sa", "sa.safetensors", 2)).unwrap();
    let out = samerge(&["merge", p(&recipe), "--sweep", "lambda=0.1,0.3", "--sweep", "alpha=0.7,0.9"], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(out.report.as_array().unwrap().len(), 4);
    assert!(dir.path().join("sa.lambda=0.3.alpha=0.7.safetensors").exists());
    let bad = samerge(&["merge", p(&recipe), "--sweep", "lambda=0.1,7"], None);
    assert_eq!(bad.code, 2);
}

#[test]
fn gen_fixture_from_toml_and_info() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "scheme_id = \"w2v2-like\"\nencoder_blocks = 3\nd_model = 4\nseed = 9\ndtype = \"f16\"\n").unwrap();
    let out_path = dir.path().join("fx.safetensors");
    let out = samerge(&["gen-fixture", p(&spec), "--children", "2", "--sigma", "0.2", "--out", p(&out_path)], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(dir.path().join("fx-child2.safetensors").exists());
    let info = samerge(&["info", p(&out_path), "--tensors"], None);
    assert_eq!(info.code, 0);
    assert_eq!(info.report["details"]["layout"]["scheme"], "w2v2-like");
    assert_eq!(info.report["details"]["layout"]["encoder_depth"], 3);
    assert_eq!(info.report["details"]["dtypes"]["F16"], info.report["details"]["tensors"]);
    assert_eq!(samerge(&["gen-fixture", "--d-model", "0", "--out", p(&out_path)], None).code, 2);
}

#[test]
fn threads_env_fallback_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("fx.safetensors");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_samerge"))
        .args(["gen-fixture", "--out", p(&out_path), "--log-level", "off"])
        .env("SAMERGE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn singular_regmean_still_completes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small();
    let (_, kids) = write_family(dir.path(), &spec, 2, 0.1);
    for (j, kid) in kids.iter().enumerate() {
        // One activation row: every Gram has rank 1.
        let model = load_checkpoint(kid).unwrap();
        let act = dir.path().join(format!("act{j}.safetensors"));
        common::write_activations(&model, 1, j as u64, &act);
        let gram = dir.path().join(format!("gram{}.safetensors", j + 1));
        assert_eq!(samerge(&["gram", "--activations", p(&act), "--out", p(&gram)], None).code, 0);
    }
    let recipe = dir.path().join("r.toml");
    fs::write(&recipe, recipe_text("regmean", "rm.safetensors", 2).replace("gamma = 0.9", "gamma = 1.0")).unwrap();
    let out = samerge(&["merge", p(&recipe)], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
}
