//! Directional measurements on a trained checkpoint: step sweeps, prior
//! drift against a random-token baseline, and the effects of suppression
//! and frequency scaling. Every comparison is paired per scene.

use std::time::Instant;

use mdlab::analysis::attention::{class_mean, far_tercile_mean, TokenClass};
use mdlab::analysis::drift::{drift_trace, mean, per_step_mean, random_token_baseline, DriftRecord};
use mdlab::analysis::{lexical, paired_sign_test};
use mdlab::decode::{DecodeConfig, DecodeTrace};
use mdlab::model::Model;
use mdlab::prior::PriorSubspace;
use mdlab::trainer::SceneSample;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::pipeline::{attention_records, decode_scenes, Setup};

/// Paired comparison of per-scene values `a` against `b`, testing `a > b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Paired {
    pub mean_a: f64,
    pub mean_b: f64,
    pub wins: usize,
    pub losses: usize,
    pub p_value: f64,
}

impl Paired {
    pub fn new(a: &[f64], b: &[f64]) -> Self {
        let (wins, losses, p_value) = paired_sign_test(a, b);
        Self {
            mean_a: avg(a),
            mean_b: avg(b),
            wins,
            losses,
            p_value,
        }
    }

    /// Mean effect points the right way and the one-sided sign test
    /// rejects at `alpha`.
    pub fn holds(&self, alpha: f64) -> bool {
        self.mean_a > self.mean_b && self.p_value < alpha
    }
}

pub fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn config_for(base: &DecodeConfig, steps: usize) -> DecodeConfig {
    DecodeConfig {
        steps,
        ..base.clone()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub steps: usize,
    /// Per scene.
    pub distinct2: Vec<f64>,
    pub repetition: Vec<f64>,
}

/// Baseline lexical metrics per scene for each step count.
pub fn step_sweep(
    model: &Model,
    scenes: &[SceneSample],
    base: &DecodeConfig,
    steps: &[usize],
) -> Result<Vec<SweepPoint>, CliError> {
    steps
        .iter()
        .map(|&t| {
            let traces = decode_scenes(model, scenes, &config_for(base, t), &Setup::baseline())?;
            let lex: Vec<_> = traces
                .iter()
                .map(|tr| lexical(&tr.metric_tokens(model.spec.eot_id, base.eot_truncate)))
                .collect();
            Ok(SweepPoint {
                steps: t,
                distinct2: lex.iter().map(|l| l.distinct2.unwrap_or(f64::NAN)).collect(),
                repetition: lex.iter().map(|l| l.repetition_ratio.unwrap_or(f64::NAN)).collect(),
            })
        })
        .collect()
}

/// Per-scene mean of one drift cosine for masked states and for the
/// random-token baseline at the same positions.
#[derive(Clone, Debug, Serialize)]
pub struct DriftComparison {
    pub steps: usize,
    pub masked: Vec<f64>,
    pub random: Vec<f64>,
}

pub fn drift_comparison(
    model: &Model,
    sub: &PriorSubspace,
    scenes: &[SceneSample],
    base: &DecodeConfig,
    steps: usize,
    baseline_seed: u64,
    field: fn(&DriftRecord) -> f64,
) -> Result<DriftComparison, CliError> {
    let traces = decode_scenes(model, scenes, &config_for(base, steps), &Setup::baseline())?;
    let pairs: Vec<(f64, f64)> = traces
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let m = drift_trace(tr, sub)?;
            let r = random_token_baseline(tr, sub, model, Default::default(), baseline_seed.wrapping_add(i as u64))?;
            Ok((mean(&m, field).unwrap_or(f64::NAN), mean(&r, field).unwrap_or(f64::NAN)))
        })
        .collect::<Result<_, mdlab::Error>>()?;
    Ok(DriftComparison {
        steps,
        masked: pairs.iter().map(|p| p.0).collect(),
        random: pairs.iter().map(|p| p.1).collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuppressionEffect {
    /// Repetition ratio per scene: (intervened, baseline).
    pub repetition: (Vec<f64>, Vec<f64>),
    /// Per step: per-scene mean subspace cosine of masked states,
    /// (intervened, baseline).
    pub subspace_cosine: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Decode with and without `setup`'s suppression.
pub fn suppression_effect(
    model: &Model,
    sub: &PriorSubspace,
    scenes: &[SceneSample],
    config: &DecodeConfig,
    setup: &Setup,
) -> Result<SuppressionEffect, CliError> {
    let base = decode_scenes(model, scenes, config, &Setup::baseline())?;
    let with = decode_scenes(model, scenes, config, setup)?;
    let rep = |trs: &[DecodeTrace]| -> Vec<f64> {
        trs.iter()
            .map(|t| lexical(&t.metric_tokens(model.spec.eot_id, config.eot_truncate)).repetition_ratio.unwrap_or(f64::NAN))
            .collect()
    };
    let mut per_step = vec![(Vec::new(), Vec::new()); config.steps];
    for (b, w) in base.iter().zip(&with) {
        for (s, v) in per_step_mean(&drift_trace(w, sub)?, |r| r.c_subspace) {
            per_step[s - 1].0.push(v);
        }
        for (s, v) in per_step_mean(&drift_trace(b, sub)?, |r| r.c_subspace) {
            per_step[s - 1].1.push(v);
        }
    }
    Ok(SuppressionEffect {
        repetition: (rep(&with), rep(&base)),
        subspace_cosine: per_step,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingEffect {
    /// Per scene: far-tercile gen→visual attention (intervened, baseline).
    pub far_visual: (Vec<f64>, Vec<f64>),
    /// Per scene: gen→mask attention over all distances (intervened, baseline).
    pub mask: (Vec<f64>, Vec<f64>),
}

/// Re-forward each baseline step's inputs with and without the scaler, so
/// weights and inputs are identical and only the rotation differs.
pub fn scaling_effect(
    model: &Model,
    scenes: &[SceneSample],
    config: &DecodeConfig,
    setup: &Setup,
) -> Result<ScalingEffect, CliError> {
    let base = decode_scenes(model, scenes, config, &Setup::baseline())?;
    let rows: Vec<[f64; 4]> = base
        .par_iter()
        .map(|tr| {
            let b = attention_records(model, tr, &Setup::baseline())?;
            let w = attention_records(model, tr, setup)?;
            Ok([
                far_tercile_mean(&w, TokenClass::Visual).unwrap_or(f64::NAN),
                far_tercile_mean(&b, TokenClass::Visual).unwrap_or(f64::NAN),
                class_mean(&w, TokenClass::Mask).unwrap_or(f64::NAN),
                class_mean(&b, TokenClass::Mask).unwrap_or(f64::NAN),
            ])
        })
        .collect::<Result<_, CliError>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    Ok(ScalingEffect {
        far_visual: (col(0), col(1)),
        mask: (col(2), col(3)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub baseline_step_seconds: f64,
    pub intervened_step_seconds: f64,
    /// `(intervened − baseline) / baseline`.
    pub overhead: f64,
    pub steps_timed: usize,
}

/// Per-step latency with and without `setup`. Arms alternate and each keeps
/// its fastest repeat, which filters scheduler noise. Runs single-threaded.
pub fn timing(
    model: &Model,
    scenes: &[SceneSample],
    config: &DecodeConfig,
    setup: &Setup,
    repeats: usize,
) -> Result<Timing, CliError> {
    let mask = model.spec.mask_id;
    let run = |s: &Setup| -> Result<f64, CliError> {
        let t0 = Instant::now();
        for (i, sc) in scenes.iter().enumerate() {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            mdlab::decode::decode(&sc.masked_layout(mask), model, &cfg, s.interventions())?;
        }
        Ok(t0.elapsed().as_secs_f64())
    };
    let baseline = Setup::baseline();
    let (mut best_b, mut best_i) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        best_b = best_b.min(run(&baseline)?);
        best_i = best_i.min(run(setup)?);
    }
    let steps = scenes.len() * config.steps;
    Ok(Timing {
        baseline_step_seconds: best_b / steps as f64,
        intervened_step_seconds: best_i / steps as f64,
        overhead: (best_i - best_b) / best_b,
        steps_timed: steps,
    })
}
