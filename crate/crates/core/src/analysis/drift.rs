//! Alignment of contextualized masked states with the prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{DecodeTrace, Interventions};
use crate::error::{Error, Result};
use crate::model::{forward, Model, StateHook};
use crate::numkit::{cosine, Matrix, Real};
use crate::prior::{cosine_to_prior, MpsHook, PriorSubspace};
use crate::rope::RopeScalerSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftRecord {
    pub step: usize,
    /// Generation-relative.
    pub position: usize,
    /// Alignment inside the prior subspace.
    pub c_subspace: f64,
    /// Full-space cosine to the prior embedding.
    pub c_raw_embed: f64,
    /// Full-space cosine to the prior's final-layer state.
    pub c_raw_final: f64,
}

fn record(step: usize, position: usize, h: &[f32], sub: &PriorSubspace) -> DriftRecord {
    DriftRecord {
        step,
        position,
        c_subspace: cosine_to_prior(h, sub),
        c_raw_embed: cosine(&h.iter().map(|&x| x as f64).collect::<Vec<_>>(), &sub.prior_embedding),
        c_raw_final: cosine(&h.iter().map(|&x| x as f64).collect::<Vec<_>>(), &sub.prior_final),
    }
}

/// Records for every still-masked position at every step, computed on the
/// states the head saw.
pub fn drift_trace(trace: &DecodeTrace, sub: &PriorSubspace) -> Result<Vec<DriftRecord>> {
    let mut out = Vec::new();
    for rec in &trace.steps {
        if rec.hidden_post.rows() != rec.masked_before.len() {
            return Err(Error::invalid(format!("step {} carries no hidden states", rec.step)));
        }
        for (r, &p) in rec.masked_before.iter().enumerate() {
            out.push(record(rec.step, p, rec.hidden_post.row(r), sub));
        }
    }
    Ok(out)
}

/// The same records for uniformly sampled content tokens placed at the
/// masked positions of each step, forwarded with the same interventions.
pub fn random_token_baseline<T: Real>(
    trace: &DecodeTrace,
    sub: &PriorSubspace,
    model: &Model<T>,
    interventions: Interventions<'_>,
    seed: u64,
) -> Result<Vec<DriftRecord>> {
    let identity = RopeScalerSpec::identity();
    let scaler = interventions.scaler.unwrap_or(&identity);
    let hook = interventions
        .suppression
        .map(|(spec, s)| MpsHook::new(s, spec, model.spec.n_layers));
    let content = model.spec.content_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rec in &trace.steps {
        let mut layout = trace.layout_at(rec.step);
        for &p in &rec.masked_before {
            layout.generation[p] = content[rng.random_range(0..content.len())];
        }
        // No position is masked any more, so a suppression hook is inert here.
        let ft = forward(model, &layout, scaler, hook.as_ref().map(|h| h as &dyn StateHook<T>))?;
        let start = layout.generation_span().start;
        let rows: Matrix<f32> = Matrix::from_fn(rec.masked_before.len(), ft.final_states.cols(), |r, c| {
            ft.final_states.get(start + rec.masked_before[r], c).wide() as f32
        });
        for (r, &p) in rec.masked_before.iter().enumerate() {
            out.push(record(rec.step, p, rows.row(r), sub));
        }
    }
    Ok(out)
}

/// Mean of one cosine field per step, ascending by step.
pub fn per_step_mean(records: &[DriftRecord], field: impl Fn(&DriftRecord) -> f64) -> Vec<(usize, f64)> {
    let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in records {
        let e = acc.entry(r.step).or_default();
        e.0 += field(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

pub fn mean(records: &[DriftRecord], field: impl Fn(&DriftRecord) -> f64) -> Option<f64> {
    (!records.is_empty()).then(|| records.iter().map(field).sum::<f64>() / records.len() as f64)
}
