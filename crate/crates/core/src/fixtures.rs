//! Synthetic checkpoint families for tests and demos.
//!
//! Values come from the per-tensor SplitMix64 stream mapped to a standard
//! normal by inverse CDF, so a spec always yields the same bytes.

use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, Tensor};
use crate::dtype::Dtype;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::schema::{NameFilter, W2V2_LIKE, WHISPER_LIKE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    #[serde(default = "default_scheme")]
    pub scheme_id: String,
    #[serde(default)]
    pub encoder_blocks: usize,
    #[serde(default)]
    pub decoder_blocks: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default)]
    pub seed: u64,
    /// Feed-forward `[d, d]` weights per block (`fc1`, `fc2`, ...).
    #[serde(default)]
    pub extra_tensors: usize,
    #[serde(default = "default_dtype", with = "dtype_serde")]
    pub dtype: Dtype,
}

fn default_scheme() -> String {
    WHISPER_LIKE.to_string()
}

fn default_d_model() -> usize {
    8
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

mod dtype_serde {
    use super::Dtype;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Dtype, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&d.as_str().to_ascii_lowercase())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Dtype, D::Error> {
        let s = String::deserialize(d)?;
        s.to_ascii_uppercase().parse().map_err(serde::de::Error::custom)
    }
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            scheme_id: default_scheme(),
            encoder_blocks: 2,
            decoder_blocks: 0,
            d_model: default_d_model(),
            seed: 0,
            extra_tensors: 1,
            dtype: Dtype::F32,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be at least 1".into()));
        }
        if self.encoder_blocks == 0 && self.decoder_blocks == 0 {
            return Err(Error::Config("at least one of encoder_blocks, decoder_blocks must be nonzero".into()));
        }
        if self.dtype == Dtype::F64 {
            return Err(Error::Config("fixtures are f32, f16 or bf16".into()));
        }
        match self.scheme_id.as_str() {
            WHISPER_LIKE => Ok(()),
            W2V2_LIKE if self.decoder_blocks == 0 => Ok(()),
            W2V2_LIKE => Err(Error::Config(format!("{W2V2_LIKE} is encoder-only; decoder_blocks must be 0"))),
            other => Err(Error::Config(format!("unknown fixture scheme {other:?}"))),
        }
    }

    /// Names and shapes the spec produces, in generation order.
    pub fn layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let d = self.d_model;
        let mut out = Vec::new();
        let attention = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                out.push((format!("{prefix}.{proj}.weight"), vec![d, d]));
                out.push((format!("{prefix}.{proj}.bias"), vec![d]));
            }
        };
        let encoder_module = if self.scheme_id == W2V2_LIKE { "attention" } else { "self_attn" };
        for i in 0..self.encoder_blocks {
            attention(format!("encoder.layers.{i}.{encoder_module}"), &mut out);
            for j in 1..=self.extra_tensors {
                out.push((format!("encoder.layers.{i}.fc{j}.weight"), vec![d, d]));
            }
        }
        for i in 0..self.decoder_blocks {
            attention(format!("decoder.layers.{i}.self_attn"), &mut out);
            attention(format!("decoder.layers.{i}.encoder_attn"), &mut out);
            for j in 1..=self.extra_tensors {
                out.push((format!("decoder.layers.{i}.fc{j}.weight"), vec![d, d]));
            }
        }
        Ok(out)
    }
}

pub fn generate_synthetic_checkpoint(spec: &FixtureSpec) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    for (name, shape) in spec.layout()? {
        let n: usize = shape.iter().product();
        let mut rng = SplitMix64::for_tensor(spec.seed, &name);
        let values: Vec<f32> = (0..n).map(|_| rng.next_normal() as f32).collect();
        c.insert(name, Tensor::from_f32(spec.dtype, shape, &values));
    }
    c.metadata.insert("samerge.fixture.scheme".into(), spec.scheme_id.clone());
    c.metadata.insert("samerge.fixture.seed".into(), spec.seed.to_string());
    Ok(c)
}

/// Add `N(0, σ²)` noise to the tensors selected by `filter`; the rest, and
/// the metadata, are copied unchanged.
pub fn perturb_checkpoint(ckpt: &Checkpoint, sigma: f64, seed: u64, filter: &NameFilter) -> Result<Checkpoint> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("sigma = {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(ckpt.clone());
    }
    let mut out = ckpt.clone();
    for (name, t) in out.tensors.iter_mut() {
        if !filter.matches(name) {
            continue;
        }
        let mut rng = SplitMix64::for_tensor(seed, name);
        let values: Vec<f32> = t
            .to_f32()
            .into_iter()
            .map(|v| v + (sigma * rng.next_normal()) as f32)
            .collect();
        *t = Tensor::from_f32(t.dtype(), t.shape().to_vec(), &values);
    }
    Ok(out)
}

/// A base and `n_children` perturbed copies; child `k` uses seed
/// `spec.seed + k + 1`.
pub fn make_family(spec: &FixtureSpec, n_children: usize, sigma: f64) -> Result<(Checkpoint, Vec<Checkpoint>)> {
    if n_children == 0 {
        return Err(Error::Config("a family needs at least one child".into()));
    }
    let base = generate_synthetic_checkpoint(spec)?;
    let children = (0..n_children as u64)
        .map(|k| perturb_checkpoint(&base, sigma, spec.seed.wrapping_add(k + 1), &NameFilter::All))
        .collect::<Result<Vec<_>>>()?;
    Ok((base, children))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::validate_compatibility;
    use crate::schema::detect_scheme;

    #[test]
    fn deterministic_bytes() {
        let spec = FixtureSpec { seed: 11, ..FixtureSpec::default() };
        let a = generate_synthetic_checkpoint(&spec).unwrap().to_bytes().unwrap();
        let b = generate_synthetic_checkpoint(&spec).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_count_arithmetic() {
        let spec = FixtureSpec { encoder_blocks: 2, decoder_blocks: 0, d_model: 4, extra_tensors: 3, ..Default::default() };
        assert_eq!(generate_synthetic_checkpoint(&spec).unwrap().len(), 2 * (8 + 3));
        let spec = FixtureSpec { encoder_blocks: 1, decoder_blocks: 2, d_model: 4, extra_tensors: 1, ..Default::default() };
        assert_eq!(generate_synthetic_checkpoint(&spec).unwrap().len(), (8 + 1) + 2 * (16 + 1));
    }

    #[test]
    fn detected_scheme_matches_spec() {
        for (scheme, dec) in [(WHISPER_LIKE, 2), (W2V2_LIKE, 0)] {
            let spec = FixtureSpec { scheme_id: scheme.into(), decoder_blocks: dec, ..Default::default() };
            assert_eq!(detect_scheme(&generate_synthetic_checkpoint(&spec).unwrap()).unwrap(), scheme);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(FixtureSpec { d_model: 0, ..Default::default() }.validate().is_err());
        assert!(FixtureSpec { encoder_blocks: 0, ..Default::default() }.validate().is_err());
        assert!(FixtureSpec { scheme_id: "gpt".into(), ..Default::default() }.validate().is_err());
        assert!(FixtureSpec { scheme_id: W2V2_LIKE.into(), decoder_blocks: 1, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let base = generate_synthetic_checkpoint(&FixtureSpec::default()).unwrap();
        let same = perturb_checkpoint(&base, 0.0, 5, &NameFilter::All).unwrap();
        assert_eq!(same.to_bytes().unwrap(), base.to_bytes().unwrap());
    }

    #[test]
    fn family_is_compatible_and_distinct() {
        let (base, kids) = make_family(&FixtureSpec::default(), 2, 0.1).unwrap();
        assert_eq!(kids.len(), 2);
        assert!(validate_compatibility(&[&base, &kids[0], &kids[1]]).compatible);
        assert_ne!(kids[0], kids[1]);
        assert!(make_family(&FixtureSpec::default(), 0, 0.1).is_err());
    }

    #[test]
    fn spec_parses_from_toml_style_json() {
        let s: FixtureSpec =
            serde_json::from_str(r#"{"scheme_id":"w2v2-like","encoder_blocks":3,"dtype":"bf16"}"#).unwrap();
        assert_eq!(s.dtype, Dtype::BF16);
        assert_eq!(s.d_model, 8);
    }
}
