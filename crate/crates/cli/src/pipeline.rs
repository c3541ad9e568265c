//! Building blocks shared by the commands and the acceptance checks.

use std::path::Path;

use mdlab::analysis::attention::{classes_at, records_from_matrices, DistanceRow, MassRow};
use mdlab::analysis::{self, lexical, DistanceBins};
use mdlab::container::Container;
use mdlab::decode::{decode, DecodeConfig, DecodeTrace, Interventions};
use mdlab::model::{forward_with, ForwardOptions, Model};
use mdlab::prior::{build_subspace_with, prior_embedding, PriorSource, PriorSubspace, SuppressionSpec};
use mdlab::rope::{RopeScalerSpec, ScalerKind};
use mdlab::trainer::{Corpus, SceneSample};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Scenes counted for corpus token frequencies.
pub const FREQ_SCENES: usize = 2000;

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    Ok(Model::from_container(&Container::load(path)?)?)
}

pub fn checkpoint_path(c: &RunConfig) -> Result<&Path, CliError> {
    c.paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::MissingArtifact("paths.checkpoint is not set".into()))
}

pub fn corpus(c: &RunConfig) -> Result<Corpus, CliError> {
    Ok(Corpus::new(c.corpus.clone(), &c.model)?)
}

/// The evaluation scenes, identical across commands for one config.
pub fn scenes(c: &RunConfig, corpus: &Corpus) -> Vec<SceneSample> {
    corpus.stream(c.analysis.scene_seed).take(c.analysis.n_scenes).collect()
}

/// Fit the prior subspace for `source` on `model`.
pub fn fit_subspace(c: &RunConfig, model: &Model, source: &PriorSource) -> Result<PriorSubspace, CliError> {
    let freqs = match source {
        PriorSource::FreqWeighted => {
            let corpus = corpus(c)?;
            Some(corpus.token_frequencies(FREQ_SCENES, c.seed, c.model.vocab_size))
        }
        _ => None,
    };
    let e = prior_embedding(source, model, &c.scaler, freqs.as_deref())?;
    let mut sub = build_subspace_with(&e, model, &c.scaler, c.suppression.k, c.suppression.placement)?;
    sub.source = source.clone();
    Ok(sub)
}

/// The configured subspace sidecar, or a fresh fit when none is configured.
pub fn load_or_fit_subspace(c: &RunConfig, model: &Model) -> Result<PriorSubspace, CliError> {
    match &c.paths.subspace {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingArtifact(format!("subspace {}", p.display())));
            }
            Ok(PriorSubspace::from_container(&Container::load(p)?, c.suppression.prior.clone())?)
        }
        None => fit_subspace(c, model, &c.suppression.prior),
    }
}

/// Owned intervention settings; borrow with [`Setup::interventions`].
#[derive(Clone, Debug)]
pub struct Setup {
    pub scaler: Option<RopeScalerSpec>,
    pub suppression: Option<(SuppressionSpec, PriorSubspace)>,
}

impl Setup {
    pub fn baseline() -> Self {
        Self {
            scaler: None,
            suppression: None,
        }
    }

    /// Interventions as configured: the scaler unless it is the identity,
    /// suppression when enabled.
    pub fn from_config(c: &RunConfig, sub: Option<&PriorSubspace>) -> Self {
        Self {
            scaler: (c.scaler.kind != ScalerKind::Identity).then(|| c.scaler.clone()),
            suppression: match (c.suppression.enabled, sub) {
                (true, Some(s)) => Some((c.suppression.spec(), s.clone())),
                _ => None,
            },
        }
    }

    pub fn interventions(&self) -> Interventions<'_> {
        Interventions {
            scaler: self.scaler.as_ref(),
            suppression: self.suppression.as_ref().map(|(s, sub)| (s, sub)),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.scaler.is_none() && self.suppression.is_none()
    }
}

/// Decode every scene; scene `i` uses seed `config.seed + i`. Results keep
/// scene order regardless of scheduling.
pub fn decode_scenes(
    model: &Model,
    scenes: &[SceneSample],
    config: &DecodeConfig,
    setup: &Setup,
) -> Result<Vec<DecodeTrace>, CliError> {
    let mask = model.spec.mask_id;
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            decode(&s.masked_layout(mask), model, &cfg, setup.interventions()).map_err(CliError::from)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub steps: usize,
    pub gen_len: usize,
    pub lambda: f64,
    pub beta: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub distinct3: f64,
    pub repetition_ratio: f64,
}

/// Per-scene lexical metrics; scenes too short for a metric are skipped in
/// that metric's mean.
pub fn metrics_row(
    run_id: &str,
    traces: &[DecodeTrace],
    c: &RunConfig,
    setup: &Setup,
) -> MetricsRow {
    let lex: Vec<_> = traces
        .iter()
        .map(|t| lexical(&t.metric_tokens(c.model.eot_id, c.decode.eot_truncate)))
        .collect();
    let mean = |f: &dyn Fn(&analysis::Lexical) -> Option<f64>| {
        let v: Vec<f64> = lex.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MetricsRow {
        run_id: run_id.to_string(),
        steps: c.decode.steps,
        gen_len: c.decode.gen_len,
        lambda: setup.suppression.as_ref().map_or(0.0, |(s, _)| s.lambda),
        beta: setup.scaler.as_ref().map_or(0.0, |s| if s.kind == ScalerKind::Monotonic { s.beta } else { 0.0 }),
        distinct1: mean(&|l| l.distinct1),
        distinct2: mean(&|l| l.distinct2),
        distinct3: mean(&|l| l.distinct3),
        repetition_ratio: mean(&|l| l.repetition_ratio),
    }
}

pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io {
        context: "csv".into(),
        source: e.into_error(),
    })
}

/// CSV with an explicit header, for files that may have no rows.
pub fn csv_with_header<R: Serialize>(header: &[&str], rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io {
        context: "csv".into(),
        source: e.into_error(),
    })
}

/// Attention maps of every step of `trace`, re-forwarded under `scaler`
/// (and optionally suppression) on the trace's own layouts.
pub fn attention_records(
    model: &Model,
    trace: &DecodeTrace,
    setup: &Setup,
) -> Result<Vec<analysis::AttentionRecord>, CliError> {
    let identity = RopeScalerSpec::identity();
    let scaler = setup.scaler.as_ref().unwrap_or(&identity);
    let hook = setup
        .suppression
        .as_ref()
        .map(|(s, sub)| mdlab::prior::MpsHook::new(sub, s, model.spec.n_layers));
    let mut out = Vec::new();
    for st in &trace.steps {
        let layout = trace.layout_at(st.step);
        let classes = classes_at(trace, st.step, model.spec.mask_id);
        let ft = forward_with(
            model,
            &layout,
            scaler,
            hook.as_ref().map(|h| h as &dyn mdlab::model::StateHook<f32>),
            ForwardOptions {
                record_attention: true,
                record_qk: false,
            },
        )?;
        let att = ft.attention.expect("attention recorded");
        out.extend(records_from_matrices(st.step, &att, &classes));
    }
    Ok(out)
}

/// Merge per-scene distance tables into one count-weighted table.
pub fn merge_distance_tables(tables: &[Vec<DistanceRow>]) -> Vec<DistanceRow> {
    let Some(first) = tables.first() else {
        return Vec::new();
    };
    let mut out = first.clone();
    for (i, row) in out.iter_mut().enumerate() {
        let (mut s, mut n) = (0.0, 0usize);
        for t in tables {
            s += t[i].mean * t[i].count as f64;
            n += t[i].count;
        }
        row.count = n;
        row.mean = if n == 0 { 0.0 } else { s / n as f64 };
    }
    out
}

/// Average per-scene mass tables over scenes that reach each step.
pub fn merge_mass_tables(tables: &[Vec<MassRow>]) -> Vec<MassRow> {
    let mut acc: std::collections::BTreeMap<(usize, usize), (MassRow, f64, usize)> = Default::default();
    for t in tables {
        for r in t {
            let e = acc
                .entry((r.step, r.tgt as usize))
                .or_insert_with(|| (r.clone(), 0.0, 0));
            e.1 += r.mean_mass;
            e.2 += 1;
        }
    }
    acc.into_values()
        .map(|(mut r, s, n)| {
            r.mean_mass = s / n as f64;
            r
        })
        .collect()
}

/// Distance bins covering every pair of positions in a sequence.
pub fn bins_for(c: &RunConfig) -> DistanceBins {
    let n = c.corpus.n_visual + mdlab::trainer::corpus::PROMPT.len() + c.decode.gen_len;
    DistanceBins::covering(n - 1)
}
