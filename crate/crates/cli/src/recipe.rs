//! Merge recipes.
//!
//! A recipe is TOML (or JSON, picked by the `.json` extension):
//!
//! ```toml
//! method = "sa"
//! seed = 0
//! out_dtype = "keep"
//! scheme = "auto"
//! output = "merged.safetensors"
//!
//! [models]
//! base = "base.safetensors"
//! m1 = "child.safetensors"
//! m2 = "adult.safetensors"
//!
//! [hyperparams]
//! lambda = 0.2
//! alpha = 0.8
//! ```
//!
//! Relative paths resolve against the recipe's directory. Everything here
//! is checked before any checkpoint is opened.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use samerge_core::merge::TrimScope;
use samerge_core::sa::{range_warnings, ScheduleMode};
use samerge_core::schema::NamingScheme;
use samerge_core::{Error, OutDtype, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lerp,
    Slerp,
    Ta,
    Ties,
    DareTa,
    Regmean,
    Sa,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Lerp, Method::Slerp, Method::Ta, Method::Ties, Method::DareTa, Method::Regmean, Method::Sa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lerp => "lerp",
            Method::Slerp => "slerp",
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::DareTa => "dare_ta",
            Method::Regmean => "regmean",
            Method::Sa => "sa",
        }
    }

    /// Hyperparameters the method reads.
    fn knobs(self) -> &'static [&'static str] {
        match self {
            Method::Lerp => &["w"],
            Method::Slerp => &["t", "eps"],
            Method::Ta => &["scales"],
            Method::Ties => &["density", "scale", "trim_scope"],
            Method::DareTa => &["drop_rate", "scales"],
            Method::Regmean => &["gamma"],
            Method::Sa => &["lambda", "alpha", "schedule_mode", "include_biases"],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub base: Option<PathBuf>,
    pub m1: Option<PathBuf>,
    pub m2: Option<PathBuf>,
    #[serde(default)]
    pub list: Vec<PathBuf>,
    #[serde(default)]
    pub grams: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub w: Option<f64>,
    pub t: Option<f64>,
    pub eps: Option<f64>,
    pub scales: Option<Vec<f64>>,
    pub density: Option<f64>,
    pub scale: Option<f64>,
    pub trim_scope: Option<TrimScope>,
    pub drop_rate: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub schedule_mode: Option<ScheduleMode>,
    pub include_biases: Option<bool>,
}

impl Hyperparams {
    fn set_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! check {
            ($($f:ident),*) => { $(if self.$f.is_some() { v.push(stringify!($f)); })* };
        }
        check!(w, t, eps, scales, density, scale, trim_scope, drop_rate, gamma, lambda, alpha, schedule_mode, include_biases);
        v
    }

    /// Override one field from a `key=value` string (used by `--sweep`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<f64> {
            v.trim().parse().map_err(|_| Error::Config(format!("{key}: {v:?} is not a number")))
        }
        match key {
            "w" => self.w = Some(num(key, value)?),
            "t" => self.t = Some(num(key, value)?),
            "eps" => self.eps = Some(num(key, value)?),
            "density" => self.density = Some(num(key, value)?),
            "scale" => self.scale = Some(num(key, value)?),
            "drop_rate" => self.drop_rate = Some(num(key, value)?),
            "gamma" => self.gamma = Some(num(key, value)?),
            "lambda" => self.lambda = Some(num(key, value)?),
            "alpha" => self.alpha = Some(num(key, value)?),
            "scales" => {
                self.scales = Some(value.split(';').map(|s| num(key, s)).collect::<Result<_>>()?);
            }
            "schedule_mode" => self.schedule_mode = Some(value.parse()?),
            "trim_scope" => {
                self.trim_scope = Some(match value {
                    "per_tensor" => TrimScope::PerTensor,
                    "global" => TrimScope::Global,
                    other => return Err(Error::Config(format!("trim_scope {other:?} is not per_tensor or global"))),
                })
            }
            "include_biases" => {
                self.include_biases =
                    Some(value.parse().map_err(|_| Error::Config(format!("include_biases: {value:?} is not a boolean")))?)
            }
            other => return Err(Error::Config(format!("unknown hyperparameter {other:?}"))),
        }
        Ok(())
    }
}

fn default_scheme() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: Method,
    #[serde(default)]
    pub models: Models,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dtype: OutDtype,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub output: PathBuf,
}

/// Hyperparameters with defaults filled in and ranges checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Resolved {
    Lerp { w: f64 },
    Slerp { t: f64, eps: f64 },
    Ta { scales: Vec<f64> },
    Ties { density: f64, scale: f64, trim_scope: TrimScope },
    DareTa { drop_rate: f64, scales: Vec<f64> },
    Regmean { gamma: f64 },
    Sa { lambda: f64, alpha: f64, schedule_mode: ScheduleMode, include_biases: bool },
}

/// A validated job: resolved hyperparameters, absolute paths, warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub method: Method,
    pub params: Resolved,
    pub base: Option<PathBuf>,
    /// Models in role order: `[m1, m2]` for sa, `[a, b]` for lerp/slerp,
    /// the fine-tunes for the task-vector methods and regmean.
    pub models: Vec<PathBuf>,
    pub grams: Vec<PathBuf>,
    pub seed: u64,
    pub out_dtype: OutDtype,
    pub scheme: String,
    pub output: PathBuf,
    pub warnings: Vec<String>,
}

impl MergeRecipe {
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("recipe: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("recipe: {e}")))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }

    /// Check roles and ranges and resolve relative paths against `dir`.
    pub fn plan(&self, dir: &Path) -> Result<Plan> {
        let m = &self.models;
        let h = &self.hyperparams;
        let missing = |role: &str| Error::Config(format!("method {} needs models.{role}", self.method));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        let mut warnings = Vec::new();

        let unused: Vec<&str> = h.set_names().into_iter().filter(|n| !self.method.knobs().contains(n)).collect();
        if !unused.is_empty() {
            warnings.push(format!("hyperparameters ignored by {}: {}", self.method, unused.join(", ")));
        }

        let (base, models) = match self.method {
            Method::Sa => {
                let base = m.base.as_ref().ok_or_else(|| missing("base"))?;
                let m1 = m.m1.as_ref().ok_or_else(|| missing("m1"))?;
                let m2 = m.m2.as_ref().ok_or_else(|| missing("m2"))?;
                if !m.list.is_empty() {
                    return Err(Error::Config("method sa takes base, m1 and m2, not models.list".into()));
                }
                (Some(base), vec![m1, m2])
            }
            Method::Lerp | Method::Slerp => {
                let pair: Vec<&PathBuf> = match (&m.m1, &m.m2, m.list.len()) {
                    (Some(a), Some(b), 0) => vec![a, b],
                    (None, None, 2) => m.list.iter().collect(),
                    _ => {
                        return Err(Error::Config(format!(
                            "method {} needs exactly 2 models (models.list = [a, b], or models.m1 and models.m2)",
                            self.method
                        )))
                    }
                };
                if m.base.is_some() {
                    warnings.push(format!("models.base is ignored by {}", self.method));
                }
                (None, pair)
            }
            Method::Ta | Method::Ties | Method::DareTa => {
                let base = m.base.as_ref().ok_or_else(|| missing("base"))?;
                if m.list.is_empty() {
                    return Err(Error::Config(format!("method {} needs at least 1 model in models.list", self.method)));
                }
                (Some(base), m.list.iter().collect())
            }
            Method::Regmean => {
                if m.list.len() < 2 {
                    return Err(Error::Config("method regmean needs at least 2 models in models.list".into()));
                }
                if m.grams.len() != m.list.len() {
                    return Err(Error::Config(format!(
                        "method regmean needs one entry in models.grams per model ({} models, {} grams)",
                        m.list.len(),
                        m.grams.len()
                    )));
                }
                (None, m.list.iter().collect())
            }
        };
        if self.method != Method::Regmean && !m.grams.is_empty() {
            warnings.push(format!("models.grams is ignored by {}", self.method));
        }

        let n = models.len();
        let params = match self.method {
            Method::Lerp => Resolved::Lerp { w: unit("w", h.w.unwrap_or(0.5))? },
            Method::Slerp => {
                let eps = h.eps.unwrap_or(samerge_core::merge::SLERP_EPS);
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::Config(format!("eps = {eps} must be positive")));
                }
                Resolved::Slerp { t: unit("t", h.t.unwrap_or(0.5))?, eps }
            }
            Method::Ta => Resolved::Ta { scales: scales(h.scales.as_deref(), n)? },
            Method::Ties => {
                let density = h.density.unwrap_or(0.5);
                if !(density > 0.0 && density <= 1.0) {
                    return Err(Error::Config(format!("density = {density} is outside (0, 1]")));
                }
                Resolved::Ties { density, scale: finite("scale", h.scale.unwrap_or(1.0))?, trim_scope: h.trim_scope.unwrap_or_default() }
            }
            Method::DareTa => {
                let drop_rate = h.drop_rate.unwrap_or(0.5);
                if !(0.0..1.0).contains(&drop_rate) {
                    return Err(Error::Config(format!("drop_rate = {drop_rate} is outside [0, 1)")));
                }
                Resolved::DareTa { drop_rate, scales: scales(h.scales.as_deref(), n)? }
            }
            Method::Regmean => Resolved::Regmean { gamma: unit("gamma", h.gamma.unwrap_or(0.9))? },
            Method::Sa => {
                let lambda = unit("lambda", h.lambda.unwrap_or(0.2))?;
                let alpha = h.alpha.unwrap_or(0.8);
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::Config(format!("alpha = {alpha} must be positive")));
                }
                warnings.extend(range_warnings(lambda, alpha));
                Resolved::Sa {
                    lambda,
                    alpha,
                    schedule_mode: h.schedule_mode.unwrap_or_default(),
                    include_biases: h.include_biases.unwrap_or(true),
                }
            }
        };

        Ok(Plan {
            method: self.method,
            params,
            base: base.map(resolve),
            models: models.into_iter().map(resolve).collect(),
            grams: if self.method == Method::Regmean { m.grams.iter().map(resolve).collect() } else { Vec::new() },
            seed: self.seed,
            out_dtype: self.out_dtype,
            scheme: scheme_spec(&self.scheme, dir),
            output: resolve(&self.output),
            warnings,
        })
    }
}

/// `auto` and built-in ids pass through; anything else is a scheme file
/// path, resolved like the model paths.
fn scheme_spec(spec: &str, dir: &Path) -> String {
    if spec == "auto" || NamingScheme::builtin(spec).is_some() || Path::new(spec).is_absolute() {
        spec.to_string()
    } else {
        dir.join(spec).display().to_string()
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} = {v} is not finite")))
    }
}

fn unit(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
    }
}

/// One scale per model; a single value is broadcast.
fn scales(given: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    let v = match given {
        None => vec![1.0; n],
        Some([one]) => vec![*one; n],
        Some(s) if s.len() == n => s.to_vec(),
        Some(s) => return Err(Error::Config(format!("{} scales given for {n} models", s.len()))),
    };
    for s in &v {
        finite("scale", *s)?;
    }
    Ok(v)
}

/// `key=v1,v2,...` from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {s:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep {key:?} has no values")));
        }
        Ok(Sweep { key: key.trim().to_string(), values })
    }
}

/// Every combination of the sweeps, in row-major order (last sweep fastest).
pub fn expand_sweeps(recipe: &MergeRecipe, sweeps: &[Sweep]) -> Result<Vec<(String, MergeRecipe)>> {
    let mut out = vec![(String::new(), recipe.clone())];
    for sw in sweeps {
        let mut next = Vec::with_capacity(out.len() * sw.values.len());
        for (tag, r) in &out {
            for v in &sw.values {
                let mut r = r.clone();
                r.hyperparams.set(&sw.key, v)?;
                let tag = if tag.is_empty() { format!("{}={v}", sw.key) } else { format!("{tag}.{}={v}", sw.key) };
                next.push((tag, r));
            }
        }
        out = next;
    }
    if !sweeps.is_empty() {
        for (tag, r) in &mut out {
            r.output = tagged_path(&r.output, tag);
        }
    }
    Ok(out)
}

/// `out.safetensors` + `lambda=0.1` → `out.lambda=0.1.safetensors`.
fn tagged_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}
