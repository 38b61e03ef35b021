//! Structural roles of tensor names.
//!
//! A [`NamingScheme`] is an ordered rule list; the first rule whose anchored
//! glob matches a tensor name decides its role. Globs support `*` (any run
//! of characters) and a single `<i>` capturing a block index (one or more
//! ASCII digits).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    Other,
}

impl RoleKind {
    pub fn is_attention(self) -> bool {
        self != RoleKind::Other
    }

    /// Q, K or V: the projections selective attention merging touches.
    pub fn is_qkv(self) -> bool {
        matches!(self, RoleKind::AttnQ | RoleKind::AttnK | RoleKind::AttnV)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
    None,
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
            Stack::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
    None,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
            AttnKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TensorRole {
    pub kind: RoleKind,
    pub stack: Stack,
    pub block_index: Option<usize>,
    pub attn_kind: AttnKind,
    pub is_bias: bool,
}

impl TensorRole {
    pub const OTHER: TensorRole = TensorRole {
        kind: RoleKind::Other,
        stack: Stack::None,
        block_index: None,
        attn_kind: AttnKind::None,
        is_bias: false,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Lit(u8),
    Star,
    Index,
}

/// Anchored glob with `*` wildcards and at most one `<i>` index capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    tokens: Vec<Token>,
}

impl Pattern {
    pub fn new(source: &str) -> Result<Self> {
        let bytes = source.as_bytes();
        let mut tokens = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i..].starts_with(b"<i>") {
                tokens.push(Token::Index);
                i += 3;
            } else if bytes[i] == b'*' {
                if tokens.last() != Some(&Token::Star) {
                    tokens.push(Token::Star);
                }
                i += 1;
            } else {
                tokens.push(Token::Lit(bytes[i]));
                i += 1;
            }
        }
        if tokens.iter().filter(|t| **t == Token::Index).count() > 1 {
            return Err(Error::Config(format!("pattern {source:?} has more than one <i> capture")));
        }
        Ok(Self { source: source.to_string(), tokens })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn has_index(&self) -> bool {
        self.tokens.contains(&Token::Index)
    }

    /// `None` on no match; `Some(capture)` otherwise.
    pub fn captures(&self, name: &str) -> Option<Option<usize>> {
        match_tokens(&self.tokens, name.as_bytes(), None)
    }

    pub fn is_match(&self, name: &str) -> bool {
        self.captures(name).is_some()
    }
}

fn match_tokens(tokens: &[Token], s: &[u8], cap: Option<usize>) -> Option<Option<usize>> {
    match tokens.split_first() {
        None => s.is_empty().then_some(cap),
        Some((Token::Lit(c), rest)) => match s.split_first() {
            Some((b, tail)) if b == c => match_tokens(rest, tail, cap),
            _ => None,
        },
        Some((Token::Star, rest)) => (0..=s.len()).find_map(|k| match_tokens(rest, &s[k..], cap)),
        Some((Token::Index, rest)) => {
            let digits = s.iter().take_while(|b| b.is_ascii_digit()).count();
            // Longest run first; shorter runs only matter for odd patterns like `<i>1`.
            (1..=digits).rev().find_map(|k| {
                let idx = std::str::from_utf8(&s[..k]).ok()?.parse::<usize>().ok()?;
                match_tokens(rest, &s[k..], Some(idx))
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub pattern: Pattern,
    pub kind: RoleKind,
    pub stack: Stack,
    pub attn_kind: AttnKind,
}

/// One entry of a user scheme file.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub pattern: String,
    pub kind: RoleKind,
    #[serde(default = "default_stack")]
    pub stack: Stack,
    #[serde(default = "default_attn_kind")]
    pub attn_kind: AttnKind,
}

fn default_stack() -> Stack {
    Stack::None
}

fn default_attn_kind() -> AttnKind {
    AttnKind::None
}

impl Rule {
    pub fn new(spec: &RuleSpec) -> Result<Self> {
        let pattern = Pattern::new(&spec.pattern)?;
        let bad = |why: &str| Err(Error::Config(format!("rule {:?}: {why}", spec.pattern)));
        if spec.kind.is_attention() {
            if !pattern.has_index() {
                return bad("attention rules need an <i> block-index capture");
            }
            if spec.attn_kind == AttnKind::None {
                return bad("attention rules need attn_kind self or cross");
            }
            if spec.stack == Stack::None {
                return bad("attention rules need stack encoder or decoder");
            }
        } else if spec.attn_kind != AttnKind::None {
            return bad("kind other requires attn_kind none");
        }
        Ok(Self { pattern, kind: spec.kind, stack: spec.stack, attn_kind: spec.attn_kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamingScheme {
    pub scheme_id: String,
    pub rules: Vec<Rule>,
}

pub const WHISPER_LIKE: &str = "whisper-like";
pub const W2V2_LIKE: &str = "w2v2-like";

const PROJECTIONS: [(&str, RoleKind); 4] = [
    ("q_proj", RoleKind::AttnQ),
    ("k_proj", RoleKind::AttnK),
    ("v_proj", RoleKind::AttnV),
    ("out_proj", RoleKind::AttnOut),
];

fn projection_rules(stack: Stack, module: &str, attn_kind: AttnKind) -> Vec<Rule> {
    let mut rules = Vec::new();
    for (proj, kind) in PROJECTIONS {
        for param in ["weight", "bias"] {
            let src = format!("*{stack}.layers.<i>.{module}.{proj}.{param}");
            rules.push(Rule {
                pattern: Pattern::new(&src).expect("built-in pattern"),
                kind,
                stack,
                attn_kind,
            });
        }
    }
    rules
}

impl NamingScheme {
    /// Encoder-decoder layout: `encoder.layers.<i>.self_attn.*`,
    /// `decoder.layers.<i>.self_attn.*`, `decoder.layers.<i>.encoder_attn.*`.
    pub fn whisper_like() -> Self {
        let mut rules = projection_rules(Stack::Encoder, "self_attn", AttnKind::SelfAttn);
        rules.extend(projection_rules(Stack::Decoder, "self_attn", AttnKind::SelfAttn));
        rules.extend(projection_rules(Stack::Decoder, "encoder_attn", AttnKind::Cross));
        Self { scheme_id: WHISPER_LIKE.to_string(), rules }
    }

    /// Encoder-only layout: `encoder.layers.<i>.attention.*`.
    pub fn w2v2_like() -> Self {
        Self {
            scheme_id: W2V2_LIKE.to_string(),
            rules: projection_rules(Stack::Encoder, "attention", AttnKind::SelfAttn),
        }
    }

    /// Built-in schemes in registration order (the detection tie-break).
    pub fn builtins() -> Vec<Self> {
        vec![Self::whisper_like(), Self::w2v2_like()]
    }

    pub fn builtin(scheme_id: &str) -> Option<Self> {
        Self::builtins().into_iter().find(|s| s.scheme_id == scheme_id)
    }

    pub fn from_rule_specs(scheme_id: impl Into<String>, specs: &[RuleSpec]) -> Result<Self> {
        let rules = specs.iter().map(Rule::new).collect::<Result<Vec<_>>>()?;
        Ok(Self { scheme_id: scheme_id.into(), rules })
    }

    /// Load a user scheme: a JSON list of
    /// `{"pattern", "kind", "stack", "attn_kind"}` objects.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let specs: Vec<RuleSpec> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("scheme file {}: {e}", path.display())))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_rule_specs(format!("user:{id}"), &specs)
    }

    pub fn classify(&self, name: &str) -> TensorRole {
        classify_tensor(name, self)
    }
}

/// First matching rule wins; unmatched names are [`RoleKind::Other`].
pub fn classify_tensor(name: &str, scheme: &NamingScheme) -> TensorRole {
    for rule in &scheme.rules {
        if let Some(index) = rule.pattern.captures(name) {
            if !rule.kind.is_attention() {
                return TensorRole { is_bias: is_bias(name), ..TensorRole::OTHER };
            }
            return TensorRole {
                kind: rule.kind,
                stack: rule.stack,
                block_index: index,
                attn_kind: rule.attn_kind,
                is_bias: is_bias(name),
            };
        }
    }
    TensorRole { is_bias: is_bias(name), ..TensorRole::OTHER }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}

fn looks_like_attention(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.contains("attn") || n.contains("attention")
}

fn looks_fused(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    looks_like_attention(&n) && (n.contains("qkv") || n.contains("in_proj"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerMap {
    pub scheme_id: String,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub roles: BTreeMap<String, TensorRole>,
}

impl LayerMap {
    pub fn depth(&self, stack: Stack) -> usize {
        match stack {
            Stack::Encoder => self.encoder_depth,
            Stack::Decoder => self.decoder_depth,
            Stack::None => 0,
        }
    }

    pub fn role(&self, name: &str) -> TensorRole {
        self.roles.get(name).copied().unwrap_or(TensorRole::OTHER)
    }
}

/// Classify every tensor and derive per-stack depths.
///
/// Fails when a stack's block indices have a gap, when a Q/K/V weight
/// triple is incomplete, or when a fused QKV projection is present.
pub fn build_layer_map(ckpt: &Checkpoint, scheme: &NamingScheme) -> Result<LayerMap> {
    let mut roles = BTreeMap::new();
    let mut blocks: BTreeMap<Stack, BTreeSet<usize>> = BTreeMap::new();
    // (stack, block, attn kind) -> Q/K/V weights seen
    let mut triples: BTreeMap<(Stack, usize, AttnKind), BTreeSet<RoleKind>> = BTreeMap::new();

    for name in ckpt.names() {
        let role = classify_tensor(name, scheme);
        if role.kind == RoleKind::Other && looks_fused(name) {
            return Err(Error::schema(format!(
                "fused QKV projection {name:?} is not supported; split it into q/k/v tensors"
            )));
        }
        if let (true, Some(block)) = (role.kind.is_attention(), role.block_index) {
            blocks.entry(role.stack).or_default().insert(block);
            if role.kind.is_qkv() && !role.is_bias {
                triples.entry((role.stack, block, role.attn_kind)).or_default().insert(role.kind);
            }
        }
        roles.insert(name.to_string(), role);
    }

    let mut depth = |stack: Stack| -> Result<usize> {
        let Some(seen) = blocks.remove(&stack) else { return Ok(0) };
        let d = seen.last().map_or(0, |m| m + 1);
        if let Some(missing) = (0..d).find(|i| !seen.contains(i)) {
            return Err(Error::schema(format!("missing block {missing} in {stack} stack")));
        }
        Ok(d)
    };
    let encoder_depth = depth(Stack::Encoder)?;
    let decoder_depth = depth(Stack::Decoder)?;

    for ((stack, block, attn), kinds) in &triples {
        for need in [RoleKind::AttnQ, RoleKind::AttnK, RoleKind::AttnV] {
            if !kinds.contains(&need) {
                return Err(Error::schema(format!(
                    "{stack} block {block} {attn}-attention has no {need:?} weight"
                )));
            }
        }
    }

    Ok(LayerMap { scheme_id: scheme.scheme_id.clone(), encoder_depth, decoder_depth, roles })
}

/// Pick the built-in scheme that classifies the largest fraction of
/// attention-like names; ties go to the earlier registration.
pub fn detect_scheme(ckpt: &Checkpoint) -> Result<String> {
    let attention_like: Vec<&str> = ckpt.names().filter(|n| looks_like_attention(n)).collect();
    let mut best: Option<(usize, String)> = None;
    for scheme in NamingScheme::builtins() {
        let hits = attention_like
            .iter()
            .filter(|n| classify_tensor(n, &scheme).kind.is_attention())
            .count();
        if hits > 0 && best.as_ref().is_none_or(|(b, _)| hits > *b) {
            best = Some((hits, scheme.scheme_id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| {
        Error::Detection(format!(
            "no built-in naming scheme matches any of {} tensor names; pass a scheme explicitly",
            ckpt.len()
        ))
    })
}

/// Resolve `"auto"`, a built-in id, or a path to a user scheme file.
pub fn resolve_scheme(spec: &str, ckpt: &Checkpoint) -> Result<NamingScheme> {
    if spec == "auto" {
        let id = detect_scheme(ckpt)?;
        return Ok(NamingScheme::builtin(&id).expect("detected id is built in"));
    }
    if let Some(s) = NamingScheme::builtin(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if path.exists() {
        return NamingScheme::from_json_file(path);
    }
    Err(Error::Config(format!(
        "unknown scheme {spec:?}: expected auto, {WHISPER_LIKE}, {W2V2_LIKE} or a scheme file path"
    )))
}

/// Tensor-name selector shared by analysis and fixture perturbation.
#[derive(Debug, Clone, Default)]
pub enum NameFilter {
    #[default]
    All,
    /// Any of the globs matches.
    Globs(Vec<Pattern>),
    /// The role under `scheme` is one of `kinds`.
    Roles { scheme: NamingScheme, kinds: Vec<RoleKind> },
}

impl NameFilter {
    pub fn globs<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let compiled = patterns.iter().map(|p| Pattern::new(p.as_ref())).collect::<Result<_>>()?;
        Ok(NameFilter::Globs(compiled))
    }

    pub fn matches(&self, name: &str) -> bool {
        match self {
            NameFilter::All => true,
            NameFilter::Globs(ps) => ps.iter().any(|p| p.is_match(name)),
            NameFilter::Roles { scheme, kinds } => kinds.contains(&classify_tensor(name, scheme).kind),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Tensor;
    use crate::dtype::Dtype;

    fn role(kind: RoleKind, stack: Stack, block: usize, attn: AttnKind, bias: bool) -> TensorRole {
        TensorRole { kind, stack, block_index: Some(block), attn_kind: attn, is_bias: bias }
    }

    #[test]
    fn whisper_names_classify() {
        let s = NamingScheme::whisper_like();
        assert_eq!(
            s.classify("model.encoder.layers.3.self_attn.q_proj.weight"),
            role(RoleKind::AttnQ, Stack::Encoder, 3, AttnKind::SelfAttn, false)
        );
        assert_eq!(
            s.classify("model.decoder.layers.0.encoder_attn.v_proj.bias"),
            role(RoleKind::AttnV, Stack::Decoder, 0, AttnKind::Cross, true)
        );
        assert_eq!(
            s.classify("model.decoder.layers.12.self_attn.out_proj.weight"),
            role(RoleKind::AttnOut, Stack::Decoder, 12, AttnKind::SelfAttn, false)
        );
        assert_eq!(s.classify("model.encoder.layers.3.fc1.weight").kind, RoleKind::Other);
        assert_eq!(s.classify("model.encoder.layers.3.self_attn_layer_norm.weight").kind, RoleKind::Other);
    }

    #[test]
    fn w2v2_names_classify() {
        let s = NamingScheme::w2v2_like();
        assert_eq!(
            s.classify("wav2vec2.encoder.layers.11.attention.k_proj.weight"),
            role(RoleKind::AttnK, Stack::Encoder, 11, AttnKind::SelfAttn, false)
        );
        assert_eq!(s.classify("model.encoder.layers.3.self_attn.q_proj.weight").kind, RoleKind::Other);
    }

    #[test]
    fn glob_semantics() {
        let p = Pattern::new("a.<i>.*.w").unwrap();
        assert_eq!(p.captures("a.17.x.y.w"), Some(Some(17)));
        assert_eq!(p.captures("a..x.w"), None);
        assert_eq!(p.captures("a.1.x.wz"), None);
        assert_eq!(Pattern::new("fc*").unwrap().captures("fc"), Some(None));
        assert!(Pattern::new("<i>.<i>").is_err());
    }

    fn ckpt(names: &[&str]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for n in names {
            c.insert(*n, Tensor::from_f32(Dtype::F32, vec![1], &[0.0]));
        }
        c
    }

    fn encoder_block(i: usize) -> Vec<String> {
        ["q_proj", "k_proj", "v_proj", "out_proj"]
            .iter()
            .map(|p| format!("encoder.layers.{i}.self_attn.{p}.weight"))
            .collect()
    }

    #[test]
    fn depths_and_gaps() {
        let names: Vec<String> = (0..4).flat_map(encoder_block).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let map = build_layer_map(&ckpt(&refs), &NamingScheme::whisper_like()).unwrap();
        assert_eq!((map.encoder_depth, map.decoder_depth), (4, 0));
        assert_eq!(map.roles.len(), 16);

        let names: Vec<String> = [0, 1, 3].into_iter().flat_map(encoder_block).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let err = build_layer_map(&ckpt(&refs), &NamingScheme::whisper_like()).unwrap_err();
        assert!(err.to_string().contains("missing block 2"), "{err}");
    }

    #[test]
    fn incomplete_triple_is_schema_error() {
        let c = ckpt(&[
            "encoder.layers.0.self_attn.q_proj.weight",
            "encoder.layers.0.self_attn.k_proj.weight",
        ]);
        assert!(matches!(build_layer_map(&c, &NamingScheme::whisper_like()), Err(Error::Schema(_))));
    }

    #[test]
    fn fused_qkv_rejected() {
        let c = ckpt(&["encoder.layers.0.self_attn.in_proj_weight"]);
        let err = build_layer_map(&c, &NamingScheme::whisper_like()).unwrap_err();
        assert!(err.to_string().contains("fused"));
    }

    #[test]
    fn detection() {
        let names: Vec<String> = (0..2).flat_map(encoder_block).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert_eq!(detect_scheme(&ckpt(&refs)).unwrap(), WHISPER_LIKE);
        let c = ckpt(&["encoder.layers.0.attention.q_proj.weight", "encoder.layers.0.attention.k_proj.weight"]);
        assert_eq!(detect_scheme(&c).unwrap(), W2V2_LIKE);
        assert!(matches!(detect_scheme(&ckpt(&["t0", "t1"])), Err(Error::Detection(_))));
    }

    #[test]
    fn user_rules_validate() {
        let ok = RuleSpec {
            pattern: "blk.<i>.attn_q.weight".into(),
            kind: RoleKind::AttnQ,
            stack: Stack::Encoder,
            attn_kind: AttnKind::SelfAttn,
        };
        let s = NamingScheme::from_rule_specs("gguf", std::slice::from_ref(&ok)).unwrap();
        assert_eq!(s.classify("blk.5.attn_q.weight").block_index, Some(5));
        let no_index = RuleSpec { pattern: "attn_q".into(), ..ok.clone() };
        assert!(NamingScheme::from_rule_specs("x", &[no_index]).is_err());
        let bad_other = RuleSpec { kind: RoleKind::Other, ..ok };
        assert!(NamingScheme::from_rule_specs("x", &[bad_other]).is_err());
        let parsed: Vec<RuleSpec> = serde_json::from_str(
            r#"[{"pattern":"x.<i>.k","kind":"attn_k","stack":"decoder","attn_kind":"cross"}]"#,
        )
        .unwrap();
        assert_eq!(parsed[0].attn_kind, AttnKind::Cross);
    }
}
