//! Helpers shared by the command-line test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use samerge_core::fixtures::{make_family, FixtureSpec};
use samerge_core::rng::SplitMix64;
use samerge_core::{save_checkpoint, Checkpoint, Dtype, Tensor};
use serde_json::Value;

pub struct Output {
    pub code: i32,
    pub report: Value,
    pub stderr: String,
}

pub fn samerge(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_samerge"));
    cmd.args(args).arg("--log-level").arg("warn").env_remove("SAMERGE_THREADS");
    if let Some(n) = threads {
        cmd.arg("--threads").arg(n.to_string());
    }
    let out = cmd.output().expect("spawn samerge");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report = serde_json::from_str(&stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {stdout}"));
    Output { code: out.status.code().expect("exit code"), report, stderr: String::from_utf8_lossy(&out.stderr).into() }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Base plus children written as `base.safetensors`, `child1.safetensors`, ...
pub fn write_family(dir: &Path, spec: &FixtureSpec, children: usize, sigma: f64) -> (PathBuf, Vec<PathBuf>) {
    let (base, kids) = make_family(spec, children, sigma).unwrap();
    let base_path = dir.join("base.safetensors");
    save_checkpoint(&base, &base_path).unwrap();
    let kid_paths = kids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let path = dir.join(format!("child{}.safetensors", k + 1));
            save_checkpoint(c, &path).unwrap();
            path
        })
        .collect();
    (base_path, kid_paths)
}

/// Random `[rows, in]` activations for every 2-D Q/K/V weight of `model`.
pub fn write_activations(model: &Checkpoint, rows: usize, seed: u64, path: &Path) {
    let mut act = Checkpoint::new();
    for (name, t) in model.iter() {
        let &[_, fan_in] = t.shape() else { continue };
        if !(name.contains("q_proj") || name.contains("k_proj") || name.contains("v_proj")) {
            continue;
        }
        let mut rng = SplitMix64::for_tensor(seed, name);
        let v: Vec<f32> = (0..rows * fan_in).map(|_| rng.next_normal() as f32).collect();
        act.insert(name, Tensor::from_f32(Dtype::F32, vec![rows, fan_in], &v));
    }
    save_checkpoint(&act, path).unwrap();
}

/// A runnable recipe for `method` over the family in `dir`, writing
/// `out_name`. RegMean recipes expect `gram1/2.safetensors` next to it.
pub fn recipe_text(method: &str, out_name: &str, children: usize) -> String {
    let list: Vec<String> = (1..=children).map(|k| format!("\"child{k}.safetensors\"")).collect();
    let list = list.join(", ");
    let body = match method {
        "lerp" => "[models]\nlist = [\"child1.safetensors\", \"child2.safetensors\"]\n[hyperparams]\nw = 0.3\n".to_string(),
        "slerp" => "[models]\nm1 = \"child1.safetensors\"\nm2 = \"child2.safetensors\"\n[hyperparams]\nt = 0.4\n".to_string(),
        "ta" => format!("[models]\nbase = \"base.safetensors\"\nlist = [{list}]\n[hyperparams]\nscales = [0.5]\n"),
        "ties" => format!("[models]\nbase = \"base.safetensors\"\nlist = [{list}]\n[hyperparams]\ndensity = 0.5\nscale = 1.0\n"),
        "dare_ta" => format!("[models]\nbase = \"base.safetensors\"\nlist = [{list}]\n[hyperparams]\ndrop_rate = 0.3\n"),
        "regmean" => "[models]\nlist = [\"child1.safetensors\", \"child2.safetensors\"]\ngrams = [\"gram1.safetensors\", \"gram2.safetensors\"]\n[hyperparams]\ngamma = 0.9\n".to_string(),
        "sa" => "[models]\nbase = \"base.safetensors\"\nm1 = \"child1.safetensors\"\nm2 = \"child2.safetensors\"\n[hyperparams]\nlambda = 0.2\nalpha = 0.8\n".to_string(),
        other => panic!("no recipe for {other}"),
    };
    format!("method = \"{method}\"\nseed = 42\noutput = \"{out_name}\"\n{body}")
}

pub const METHODS: [&str; 7] = ["lerp", "slerp", "ta", "ties", "dare_ta", "regmean", "sa"];

/// Fixture family, activation dumps and Gram files in `dir`.
pub fn prepare_workspace(dir: &Path, spec: &FixtureSpec) {
    let (_, kids) = write_family(dir, spec, 3, 0.05);
    for (j, kid) in kids.iter().take(2).enumerate() {
        let model = samerge_core::load_checkpoint(kid).unwrap();
        let act = dir.join(format!("act{}.safetensors", j + 1));
        write_activations(&model, 3 * spec.d_model, 100 + j as u64, &act);
        let gram = dir.join(format!("gram{}.safetensors", j + 1));
        let out = samerge(&["gram", "--activations", p(&act), "--out", p(&gram)], None);
        assert_eq!(out.code, 0, "{}", out.stderr);
    }
}
