//! Run configuration: one JSON document covering every pipeline stage.

use std::path::{Path, PathBuf};

use mdlab::decode::DecodeConfig;
use mdlab::model::ModelSpec;
use mdlab::prior::{PriorSource, Reconstruction, Placement, SuppressionSpec};
use mdlab::rope::{GateKind, RopeScalerSpec, ScalerKind, SegmentSet};
use mdlab::trainer::corpus::CONTENT_END;
use mdlab::trainer::{CorpusConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuppressionConfig {
    /// Off means decodes run without the suppression hook.
    pub enabled: bool,
    pub lambda: f64,
    pub layers: Vec<usize>,
    pub reconstruction: Reconstruction,
    pub placement: Placement,
    pub prior: PriorSource,
    /// Subspace dimension.
    pub k: usize,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        let s = SuppressionSpec::default();
        Self {
            enabled: false,
            lambda: s.lambda,
            layers: s.layers,
            reconstruction: s.reconstruction,
            placement: s.placement,
            prior: PriorSource::VocabMean,
            k: 3,
        }
    }
}

impl SuppressionConfig {
    pub fn spec(&self) -> SuppressionSpec {
        SuppressionSpec {
            lambda: self.lambda,
            layers: self.layers.clone(),
            reconstruction: self.reconstruction,
            placement: self.placement,
        }
    }
}

/// Grid axes for `ablate`. Empty axes fall back to the single configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub steps: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub prior: Vec<PriorSource>,
    pub gate: Vec<GateKind>,
    pub segments: Vec<SegmentSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Scenes decoded per run.
    pub n_scenes: usize,
    /// Seed of the evaluation scene stream.
    pub scene_seed: u64,
    pub n_bands: usize,
    /// Scenes whose attention maps feed the attention CSVs.
    pub attention_scenes: usize,
    /// Seed of the random-token drift baseline.
    pub baseline_seed: u64,
    /// Timed decodes per arm of the `timing` command.
    pub timing_repeats: usize,
    pub ablate: AblateConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_scenes: 40,
            scene_seed: 1000,
            n_bands: 2,
            attention_scenes: 8,
            baseline_seed: 77,
            timing_repeats: 3,
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub subspace: Option<PathBuf>,
    /// Input directory of `report`; defaults to the output directory.
    pub ablate_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub decode: DecodeConfig,
    pub scaler: RopeScalerSpec,
    pub suppression: SuppressionConfig,
    pub analysis: AnalysisConfig,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            decode: DecodeConfig::default(),
            scaler: RopeScalerSpec::identity(),
            suppression: SuppressionConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

/// Named hyperparameter profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    LladaV,
    Lavida,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::LladaV, Preset::Lavida];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LladaV => "llada_v",
            Preset::Lavida => "lavida",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `(λ, β, η)`.
    pub fn hyperparameters(self) -> (f64, f64, f64) {
        match self {
            Preset::LladaV => (0.1, 0.01, 8.0),
            Preset::Lavida => (0.3, 0.01, 12.0),
        }
    }

    pub fn config(self) -> RunConfig {
        let (lambda, beta, eta) = self.hyperparameters();
        RunConfig {
            scaler: RopeScalerSpec::monotonic(beta, eta, 0.6),
            suppression: SuppressionConfig {
                enabled: true,
                lambda,
                ..SuppressionConfig::default()
            },
            ..RunConfig::default()
        }
    }
}

fn prefixed(section: &str, list: Vec<String>) -> impl Iterator<Item = String> + '_ {
    list.into_iter().map(move |v| format!("{section}.{v}"))
}

/// Every invariant violation, each led by the offending field path.
pub fn validate_config(c: &RunConfig) -> Vec<String> {
    let mut v = Vec::new();
    if c.schema_version != SCHEMA_VERSION {
        v.push(format!(
            "schema_version: expected {SCHEMA_VERSION}, got {}",
            c.schema_version
        ));
    }
    let model_ok = c.model.violations().is_empty();
    v.extend(prefixed("model", c.model.violations()));
    v.extend(prefixed("train", c.train.violations()));
    v.extend(prefixed("corpus", c.corpus.violations()));
    v.extend(prefixed("decode", c.decode.violations()));
    v.extend(c.scaler.violations().into_iter().map(|s| {
        // Gate-level problems are reported at the scaler itself.
        if s.starts_with("gate:") {
            format!("scaler: {s}")
        } else {
            format!("scaler.{s}")
        }
    }));
    if model_ok {
        v.extend(prefixed("suppression", c.suppression.spec().violations(c.model.n_layers)));
        let k_max = c.model.n_layers.min(c.model.d_model);
        if c.suppression.k == 0 || c.suppression.k > k_max {
            v.push(format!(
                "suppression.k: must lie in 1..={k_max} (min of layers and width), got {}",
                c.suppression.k
            ));
        }
        if let PriorSource::Topk { n } = c.suppression.prior {
            let content = c.model.content_ids().len();
            if n == 0 || n > content {
                v.push(format!("suppression.prior.n: must lie in 1..={content}, got {n}"));
            }
        }
        if let Some(id) = (0..CONTENT_END).find(|&i| c.model.is_special(i) || i as usize >= c.model.vocab_size) {
            v.push(format!(
                "model.vocab_size: corpus uses ids 0..{CONTENT_END} but id {id} is special or out of range"
            ));
        }
        if c.model.n_heads > 0 && c.model.d_model % c.model.n_heads == 0 {
            let pairs = c.model.d_head() / 2;
            if c.analysis.n_bands == 0 || pairs % c.analysis.n_bands != 0 {
                v.push(format!(
                    "analysis.n_bands: must divide the {pairs} frequency pairs per head, got {}",
                    c.analysis.n_bands
                ));
            }
        }
    }
    if c.decode.gen_len != c.corpus.gen_len {
        v.push(format!(
            "decode.gen_len: must equal corpus.gen_len ({}), got {}",
            c.corpus.gen_len, c.decode.gen_len
        ));
    }
    if c.analysis.n_scenes == 0 {
        v.push("analysis.n_scenes: must be >= 1".into());
    }
    if c.analysis.attention_scenes > c.analysis.n_scenes {
        v.push(format!(
            "analysis.attention_scenes: must not exceed n_scenes ({}), got {}",
            c.analysis.n_scenes, c.analysis.attention_scenes
        ));
    }
    if c.analysis.timing_repeats == 0 {
        v.push("analysis.timing_repeats: must be >= 1".into());
    }
    let ab = &c.analysis.ablate;
    if let Some(&t) = ab.steps.iter().find(|&&t| t == 0 || t > c.decode.gen_len) {
        v.push(format!(
            "analysis.ablate.steps: {t} outside 1..={} (gen_len)",
            c.decode.gen_len
        ));
    }
    if let Some(l) = ab.lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        v.push(format!("analysis.ablate.lambda: {l} must be finite and >= 0"));
    }
    if let Some(b) = ab.beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        v.push(format!("analysis.ablate.beta: {b} must be finite and >= 0"));
    }
    if ab.gate.contains(&GateKind::Power) && c.scaler.tau0 == 0.0 {
        v.push("analysis.ablate.gate: power gate requires scaler.tau0 > 0".into());
    }
    if c.scaler.kind == ScalerKind::Identity && !ab.beta.is_empty() {
        // A beta axis only matters for the monotonic scaler.
        v.push("analysis.ablate.beta: requires scaler.kind = \"monotonic\"".into());
    }
    v
}

/// Set `key` (dotted path) to `raw`, parsed as JSON when possible and
/// as a string otherwise. Intermediate objects must already exist.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set {key}: empty path component")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(CliError::Config(format!(
                "--set {key}: `{}` is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty path")
}

/// Parse a config document, apply `--set` overrides, and validate.
pub fn load_config_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| {
        CliError::Config(format!(
            "config parse error at line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    // Start from the defaults so partial documents and overrides of absent
    // sections both work.
    let mut full = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    merge(&mut full, doc.take());
    for (k, v) in overrides {
        apply_override(&mut full, k, v)?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(full)
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    let violations = validate_config(&config);
    if !violations.is_empty() {
        return Err(CliError::Invalid(violations));
    }
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut c = load_config_str(&text, overrides)?;
    // Relative artifact paths are relative to the config file.
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut c.paths.checkpoint, &mut c.paths.subspace, &mut c.paths.ablate_dir]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(c)
}

/// Recursive object merge; `patch` wins on leaves.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}
