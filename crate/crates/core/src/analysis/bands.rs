//! Split of rotary attention logits into contiguous frequency bands.

use crate::analysis::attention::{DistanceBins, TokenClass};
use crate::decode::{DecodeTrace, Interventions};
use crate::error::{Error, Result};
use crate::model::{forward_with, ForwardOptions, Model, StateHook};
use crate::numkit::Real;
use crate::prior::MpsHook;
use crate::rope::{FrequencyTable, RopeScalerSpec};

fn rotate_pair(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Per-band contributions to `⟨R(m)q, R(n)k⟩` under one table. Band 0 holds
/// the highest frequencies.
pub fn frequency_decomposition<T: Real>(
    q: &[T],
    k: &[T],
    m: usize,
    n: usize,
    table: &FrequencyTable,
    n_bands: usize,
) -> Result<Vec<f64>> {
    frequency_decomposition_with(q, k, m, n, table, table, n_bands)
}

/// As [`frequency_decomposition`] with separate tables for the query and key
/// tokens (segment-restricted scaling).
pub fn frequency_decomposition_with<T: Real>(
    q: &[T],
    k: &[T],
    m: usize,
    n: usize,
    q_table: &FrequencyTable,
    k_table: &FrequencyTable,
    n_bands: usize,
) -> Result<Vec<f64>> {
    let pairs = q_table.pairs();
    if q.len() != q_table.d_head || k.len() != k_table.d_head || k_table.d_head != q_table.d_head {
        return Err(Error::invalid("query/key length does not match the frequency table"));
    }
    if n_bands == 0 || pairs % n_bands != 0 {
        return Err(Error::invalid(format!(
            "{pairs} frequency pairs cannot be split into {n_bands} equal bands"
        )));
    }
    let per = pairs / n_bands;
    let mut out = vec![0.0; n_bands];
    for i in 0..pairs {
        let (qx, qy) = rotate_pair(q[2 * i].wide(), q[2 * i + 1].wide(), q_table.angle(i, m));
        let (kx, ky) = rotate_pair(k[2 * i].wide(), k[2 * i + 1].wide(), k_table.angle(i, n));
        out[i / per] += qx * kx + qy * ky;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandQuantity {
    /// Mean additive pre-softmax logit contribution.
    LogitContribution,
    /// Mean weight after a softmax over each band's logits alone.
    BandSoftmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandRow {
    pub bin: usize,
    pub label: String,
    pub band: usize,
    pub mean: f64,
    pub count: usize,
}

/// Band table over every step of a trace, re-running each step's forward
/// with the same interventions to recover queries and keys. Sources are
/// generation positions; `pair` restricts (source class, target class).
#[allow(clippy::too_many_arguments)]
pub fn band_table<T: Real>(
    trace: &DecodeTrace,
    model: &Model<T>,
    interventions: Interventions<'_>,
    n_bands: usize,
    bins: &DistanceBins,
    pair: Option<(TokenClass, TokenClass)>,
    quantity: BandQuantity,
) -> Result<Vec<BandRow>> {
    let identity = RopeScalerSpec::identity();
    let scaler = interventions.scaler.unwrap_or(&identity);
    let hook = interventions
        .suppression
        .map(|(spec, sub)| MpsHook::new(sub, spec, model.spec.n_layers));
    let dh = model.spec.d_head();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut sums = vec![0.0f64; bins.len() * n_bands];
    let mut counts = vec![0usize; bins.len() * n_bands];

    for rec in &trace.steps {
        let layout = trace.layout_at(rec.step);
        let classes = crate::analysis::attention::classes_at(trace, rec.step, model.spec.mask_id);
        let ft = forward_with(
            model,
            &layout,
            scaler,
            hook.as_ref().map(|h| h as &dyn StateHook<T>),
            ForwardOptions {
                record_attention: false,
                record_qk: true,
            },
        )?;
        let plan = &ft.plan;
        let qk = ft.qk.expect("qk recorded");
        let n = layout.len();
        for heads in &qk {
            for (q, k) in heads {
                for i in (0..n).filter(|&i| classes[i].is_generation()) {
                    let mut contribs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
                    for j in 0..n {
                        if let Some((s, t)) = pair {
                            if classes[i] != s || classes[j] != t {
                                continue;
                            }
                        }
                        let c = frequency_decomposition_with(
                            q.row(i),
                            k.row(j),
                            plan.position(i),
                            plan.position(j),
                            plan.table_for(i),
                            plan.table_for(j),
                            n_bands,
                        )?;
                        contribs.push((j, c));
                    }
                    if contribs.is_empty() {
                        continue;
                    }
                    for band in 0..n_bands {
                        let weights: Vec<f64> = match quantity {
                            BandQuantity::LogitContribution => contribs.iter().map(|(_, c)| c[band]).collect(),
                            BandQuantity::BandSoftmax => {
                                let logits: Vec<f64> = contribs.iter().map(|(_, c)| c[band] * inv_sqrt).collect();
                                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                                let z: f64 = e.iter().sum();
                                e.iter().map(|x| x / z).collect()
                            }
                        };
                        for ((j, _), w) in contribs.iter().zip(weights) {
                            let b = bins
                                .bin_of(i.abs_diff(*j))
                                .ok_or_else(|| Error::invalid("distance outside the bins"))?;
                            sums[b * n_bands + band] += w;
                            counts[b * n_bands + band] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    for b in 0..bins.len() {
        for band in 0..n_bands {
            let c = counts[b * n_bands + band];
            rows.push(BandRow {
                bin: b,
                label: bins.label(b),
                band,
                mean: if c == 0 { 0.0 } else { sums[b * n_bands + band] / c as f64 },
                count: c,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::relative_score;

    #[test]
    fn single_band_is_the_total() {
        let t = FrequencyTable::identity(8).unwrap();
        let q = [0.3f64, -1.0, 0.5, 0.2, 1.5, -0.4, 0.1, 0.9];
        let k = [1.0f64, 0.2, -0.3, 0.8, 0.4, 0.4, -1.2, 0.05];
        let bands = frequency_decomposition(&q, &k, 3, 17, &t, 1).unwrap();
        let total = relative_score(&q, &k, 3, 17, &t).unwrap();
        assert!((bands[0] - total).abs() < 1e-12);
        assert!(frequency_decomposition(&q, &k, 3, 17, &t, 3).is_err());
    }
}
