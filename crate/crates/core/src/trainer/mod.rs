//! Masked-diffusion training of the toy model.

pub mod corpus;
pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Weights};
use crate::numkit::Real;

pub use corpus::{gen_corpus, Corpus, CorpusConfig, SceneObject, SceneSample};
pub use grad::{loss_and_grads, mask_forward_process, zero_grads, LossWeighting, MaskedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub weighting: LossWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 16,
            total_steps: 3000,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            weighting: LossWeighting::InvT,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            v.push(format!("lr: must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            v.push("beta1: must lie in [0, 1)".to_string());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            v.push("beta2: must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            v.push("eps: must be > 0".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size: must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            v.push("min_lr_ratio: must lie in [0, 1]".to_string());
        }
        if !(self.grad_clip >= 0.0) {
            v.push("grad_clip: must be >= 0".to_string());
        }
        v
    }

    /// Learning rate at 0-based `step`: linear warmup then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Divergence guard: loss above `10 ln V` for this many consecutive steps aborts.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome<T = f32> {
    pub model: Model<T>,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    /// Mean loss over the last `window` logged steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(window)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Training log as CSV text with header `step,loss,grad_norm`.
pub fn log_csv(log: &[LogRow]) -> String {
    let mut s = String::from("step,loss,grad_norm\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.grad_norm));
    }
    s
}

struct Adam<T> {
    m: Weights<T>,
    v: Weights<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            m: zero_grads(spec),
            v: zero_grads(spec),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut Weights<T>, g: &Weights<T>, lr: f64, cfg: &TrainConfig, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let params = w.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        let gs = g.params();
        for (((p, m), v), gp) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            for i in 0..p.len() {
                let gi = gp.data[i].wide() * scale;
                let mi = cfg.beta1 * m[i].wide() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i].wide() + (1.0 - cfg.beta2) * gi * gi;
                m[i] = T::cast(mi);
                v[i] = T::cast(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                p[i] = T::cast(p[i].wide() - update);
            }
        }
    }
}

/// Draw one training batch from the corpus.
pub fn draw_batch<R: Rng>(corpus: &Corpus, batch_size: usize, mask_id: u32, rng: &mut R) -> Result<Vec<MaskedSample>> {
    (0..batch_size)
        .map(|_| {
            let s = corpus.sample(rng);
            let t = 1.0 - rng.random::<f64>();
            MaskedSample::new(s.visual, s.prompt, &s.response, t, mask_id, rng)
        })
        .collect()
}

/// Train from a seeded initialization. `on_step` sees every log row.
pub fn train(
    spec: &ModelSpec,
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if let Some(first) = config.violations().first() {
        return Err(Error::invalid(format!("train {first}")));
    }
    let weights = Weights::<f32>::init(spec, config.seed);
    let mut model = Model::new(spec.clone(), weights)?;
    let mut adam = Adam::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let threshold = 10.0 * (spec.vocab_size as f64).ln();
    let mut above = 0usize;
    let mut log = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let batch = draw_batch(corpus, config.batch_size, spec.mask_id, &mut rng)?;
        let (loss, grads) = loss_and_grads(&model, &batch, config.weighting)?;
        let gn = grad::grad_norm(&grads);
        if !loss.is_finite() || !gn.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                threshold,
                window: 1,
            });
        }
        above = if loss > threshold { above + 1 } else { 0 };
        if above >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                step,
                loss,
                threshold,
                window: DIVERGENCE_WINDOW,
            });
        }
        let scale = if config.grad_clip > 0.0 && gn > config.grad_clip {
            config.grad_clip / gn
        } else {
            1.0
        };
        adam.step(&mut model.weights, &grads, config.lr_at(step), config, scale);
        let row = LogRow {
            step,
            loss,
            grad_norm: gn,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(110) - 0.1).abs() < 1e-12);
        assert!(c.lr_at(60) < 1.0 && c.lr_at(60) > 0.1);
    }

    #[test]
    fn log_csv_header() {
        let s = log_csv(&[LogRow {
            step: 0,
            loss: 1.5,
            grad_norm: 0.25,
        }]);
        assert_eq!(s, "step,loss,grad_norm\n0,1.5,0.25\n");
    }
}
