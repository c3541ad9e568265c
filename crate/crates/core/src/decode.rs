//! Iterative parallel unmasking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_with, ForwardOptions, Model, SequenceLayout, StateHook};
use crate::numkit::{Matrix, Real};
use crate::prior::{MpsHook, PriorSubspace, SuppressionSpec};
use crate::rope::RopeScalerSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Selection {
    /// Commit the argmax token; confidence is its probability.
    #[default]
    Greedy,
    /// Sample a token per position; confidence is the sampled token's probability.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub gen_len: usize,
    pub steps: usize,
    pub selection: Selection,
    pub temperature: f64,
    pub seed: u64,
    pub record_attention: bool,
    /// Truncate at the first eot before computing metrics.
    pub eot_truncate: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            gen_len: 32,
            steps: 8,
            selection: Selection::Greedy,
            temperature: 1.0,
            seed: 0,
            record_attention: false,
            eot_truncate: false,
        }
    }
}

impl DecodeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.gen_len == 0 {
            v.push("gen_len: must be >= 1".to_string());
        }
        if self.steps == 0 || self.steps > self.gen_len {
            v.push(format!(
                "steps: must lie in 1..={} (gen_len), got {}",
                self.gen_len, self.steps
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            v.push(format!("temperature: must be > 0, got {}", self.temperature));
        }
        v
    }
}

/// Optional interventions applied during decoding.
#[derive(Clone, Copy, Debug, Default)]
pub struct Interventions<'a> {
    pub scaler: Option<&'a RopeScalerSpec>,
    pub suppression: Option<(&'a SuppressionSpec, &'a PriorSubspace)>,
}

/// Per-step commitment counts: `⌊L/T⌋` each, plus one for the first `L mod T` steps.
pub fn quotas(gen_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > gen_len {
        return Err(Error::invalid(format!(
            "steps {steps} outside 1..={gen_len}"
        )));
    }
    let base = gen_len / steps;
    let extra = gen_len % steps;
    Ok((0..steps).map(|t| base + usize::from(t < extra)).collect())
}

/// One refinement pass. Positions are generation-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Generation tokens at the start of the step.
    pub tokens_before: Vec<u32>,
    /// Masked positions at the start of the step, ascending.
    pub masked_before: Vec<usize>,
    pub committed: BTreeMap<usize, u32>,
    /// Confidence of every position in `masked_before`.
    pub confidences: BTreeMap<usize, f64>,
    /// Final-layer states of `masked_before` rows, before suppression.
    pub hidden_pre: Matrix<f32>,
    /// What the head saw for the same rows.
    pub hidden_post: Matrix<f32>,
    /// `[layer][head]` attention over the full sequence.
    pub attention: Option<Vec<Vec<Matrix<f32>>>>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    committed: &'a BTreeMap<usize, u32>,
    confidences: &'a BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tensors: Option<&'a str>,
}

impl StepRecord {
    /// One JSON object; `tensors` names a sidecar holding this step's
    /// hidden/attention tensors.
    pub fn to_json_line(&self, tensors: Option<&str>) -> String {
        serde_json::to_string(&StepLine {
            step: self.step,
            committed: &self.committed,
            confidences: &self.confidences,
            tensors,
        })
        .expect("step record serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    /// The starting layout (generation fully masked).
    pub layout: SequenceLayout,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<u32>,
}

impl DecodeTrace {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&r.to_json_line(None));
            s.push('\n');
        }
        s
    }

    /// Tokens used for metrics, optionally cut at the first `eot`.
    pub fn metric_tokens(&self, eot_id: u32, truncate: bool) -> Vec<u32> {
        if !truncate {
            return self.tokens.clone();
        }
        let end = self.tokens.iter().position(|&t| t == eot_id).unwrap_or(self.tokens.len());
        self.tokens[..end].to_vec()
    }

    /// Layout as it stood at the start of `step` (1-based).
    pub fn layout_at(&self, step: usize) -> SequenceLayout {
        let mut l = self.layout.clone();
        l.generation = self.steps[step - 1].tokens_before.clone();
        l
    }
}

/// Mutable decoding state.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub layout: SequenceLayout,
    pub step: usize,
    quotas: Vec<usize>,
    rng: ChaCha8Rng,
}

impl DecodeState {
    pub fn new(layout: SequenceLayout, config: &DecodeConfig, mask_id: u32) -> Result<Self> {
        if let Some(first) = config.violations().first() {
            return Err(Error::invalid(format!("decode {first}")));
        }
        if layout.generation.len() != config.gen_len {
            return Err(Error::invalid(format!(
                "generation span has {} positions, config gen_len is {}",
                layout.generation.len(),
                config.gen_len
            )));
        }
        if layout.generation.iter().any(|&t| t != mask_id) {
            return Err(Error::invalid("generation span must start fully masked"));
        }
        Ok(Self {
            layout,
            step: 0,
            quotas: quotas(config.gen_len, config.steps)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.quotas.len()
    }
}

/// Forward, score every masked position, commit this step's quota.
pub fn decode_step<T: Real>(
    state: &mut DecodeState,
    model: &Model<T>,
    config: &DecodeConfig,
    interventions: Interventions<'_>,
) -> Result<StepRecord> {
    let mask_id = model.spec.mask_id;
    let gen_start = state.layout.generation_span().start;
    let masked_before: Vec<usize> = state
        .layout
        .generation
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == mask_id)
        .map(|(i, _)| i)
        .collect();
    if state.is_done() || masked_before.is_empty() {
        return Err(Error::invalid("no masked positions remain"));
    }

    let identity = RopeScalerSpec::identity();
    let scaler = interventions.scaler.unwrap_or(&identity);
    let hook = interventions
        .suppression
        .map(|(spec, sub)| MpsHook::new(sub, spec, model.spec.n_layers));
    let trace = forward_with(
        model,
        &state.layout,
        scaler,
        hook.as_ref().map(|h| h as &dyn StateHook<T>),
        ForwardOptions {
            record_attention: config.record_attention,
            record_qk: false,
        },
    )?;

    let l = model.spec.n_layers;
    let rows = |m: &Matrix<T>| {
        Matrix::from_fn(masked_before.len(), m.cols(), |r, c| {
            m.get(gen_start + masked_before[r], c).wide() as f32
        })
    };
    let hidden_pre = rows(&trace.hidden[l]);
    let hidden_post = rows(&trace.final_states);

    let mut candidates: Vec<(usize, u32, f64)> = Vec::with_capacity(masked_before.len());
    for &p in &masked_before {
        let logits = trace.logits.row(gen_start + p);
        let probs = token_probs(logits, mask_id, config.temperature);
        let (tok, conf) = match config.selection {
            Selection::Greedy => argmax(&probs),
            Selection::Sample => {
                let u: f64 = state.rng.random();
                sample(&probs, u)
            }
        };
        candidates.push((p, tok, conf));
    }
    let confidences = candidates.iter().map(|&(p, _, c)| (p, c)).collect();

    // Highest confidence first, ties to the lower position.
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let quota = state.quotas[state.step].min(candidates.len());
    let committed: BTreeMap<usize, u32> = candidates[..quota].iter().map(|&(p, t, _)| (p, t)).collect();

    let tokens_before = state.layout.generation.clone();
    for (&p, &t) in &committed {
        state.layout.generation[p] = t;
    }
    state.step += 1;

    let attention = trace.attention.map(|att| {
        att.iter()
            .map(|heads| heads.iter().map(|m| m.cast::<f32>()).collect())
            .collect()
    });
    Ok(StepRecord {
        step: state.step,
        tokens_before,
        masked_before,
        committed,
        confidences,
        hidden_pre,
        hidden_post,
        attention,
    })
}

/// Softmax over `logits / temperature` with the mask token excluded.
pub fn token_probs<T: Real>(logits: &[T], mask_id: u32, temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if i == mask_id as usize {
                f64::NEG_INFINITY
            } else {
                x.wide() / temperature
            }
        })
        .collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn argmax(probs: &[f64]) -> (u32, f64) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best as u32, probs[best])
}

fn sample(probs: &[f64], u: f64) -> (u32, f64) {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        acc += p;
        if u < acc {
            return (i as u32, p);
        }
    }
    (last as u32, probs[last])
}

/// Run all `T` steps from a fully masked generation span.
pub fn decode<T: Real>(
    layout: &SequenceLayout,
    model: &Model<T>,
    config: &DecodeConfig,
    interventions: Interventions<'_>,
) -> Result<DecodeTrace> {
    let mut state = DecodeState::new(layout.clone(), config, model.spec.mask_id)?;
    let mut steps = Vec::with_capacity(config.steps);
    while !state.is_done() {
        steps.push(decode_step(&mut state, model, config, interventions)?);
    }
    Ok(DecodeTrace {
        layout: layout.clone(),
        steps,
        tokens: state.layout.generation,
    })
}
