//! Masked-diffusion loss and its reverse-mode gradient.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed, run_blocks, ForwardCache, ForwardOptions, Model, ModelSpec, SequenceLayout, Weights};
use crate::numkit::{dot, Matrix, Real};
use crate::rope::{RopeScalerSpec, RotaryPlan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `(1/t) · Σ_masked CE / gen_len`
    #[default]
    InvT,
    /// `Σ_masked CE / |masked|`
    Uniform,
}

/// One corrupted training example.
#[derive(Clone, Debug)]
pub struct MaskedSample {
    /// Generation span holds the corrupted response.
    pub layout: SequenceLayout,
    pub targets: Vec<u32>,
    pub masked: Vec<bool>,
    pub t: f64,
}

/// Mask each response position independently with probability `t`.
pub fn mask_forward_process<R: Rng>(
    response: &[u32],
    t: f64,
    mask_id: u32,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("mask rate t = {t} outside (0, 1]")));
    }
    let mut tokens = response.to_vec();
    let mut masked = vec![false; response.len()];
    for (tok, m) in tokens.iter_mut().zip(masked.iter_mut()) {
        if rng.random::<f64>() < t {
            *tok = mask_id;
            *m = true;
        }
    }
    Ok((tokens, masked))
}

impl MaskedSample {
    pub fn new<R: Rng>(
        visual: Vec<Vec<f32>>,
        prompt: Vec<u32>,
        response: &[u32],
        t: f64,
        mask_id: u32,
        rng: &mut R,
    ) -> Result<Self> {
        let (tokens, masked) = mask_forward_process(response, t, mask_id, rng)?;
        Ok(Self {
            layout: SequenceLayout::new(visual, prompt, tokens),
            targets: response.to_vec(),
            masked,
            t,
        })
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Per-token loss weight, `None` if nothing is masked.
    fn token_weight(&self, mode: LossWeighting) -> Option<f64> {
        let n = self.masked_count();
        if n == 0 {
            return None;
        }
        Some(match mode {
            LossWeighting::InvT => 1.0 / (self.t * self.targets.len() as f64),
            LossWeighting::Uniform => 1.0 / n as f64,
        })
    }
}

/// A weight set with every entry zero (norm gains included).
pub fn zero_grads<T: Real>(spec: &ModelSpec) -> Weights<T> {
    let mut g = Weights::zeros(spec);
    for p in g.params_mut() {
        p.fill(T::zero());
    }
    g
}

fn add_into<T: Real>(acc: &mut Weights<T>, other: &Weights<T>) {
    for (a, b) in acc.params_mut().into_iter().zip(other.params()) {
        for (x, &y) in a.iter_mut().zip(b.data) {
            *x = *x + y;
        }
    }
}

/// Global L2 norm over all gradient entries.
pub fn grad_norm<T: Real>(g: &Weights<T>) -> f64 {
    g.params()
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|x| x.wide() * x.wide())
        .sum::<f64>()
        .sqrt()
}

/// Loss and gradients of one sample with unit batch normalization.
/// Returns `None` when the sample has no masked position.
pub fn sample_loss_and_grads<T: Real>(
    model: &Model<T>,
    sample: &MaskedSample,
    mode: LossWeighting,
) -> Result<Option<(f64, Weights<T>)>> {
    let Some(w) = sample.token_weight(mode) else {
        return Ok(None);
    };
    let spec = &model.spec;
    let layout = &sample.layout;
    let x0 = embed(layout, model)?;
    let plan = RotaryPlan::new(spec.d_head(), &RopeScalerSpec::identity(), &layout.positions(), &layout.segments())?;
    let mut cache = ForwardCache::default();
    let trace = run_blocks(model, x0, plan, &[], None, ForwardOptions::default(), Some(&mut cache))?;

    let gen_start = layout.generation_span().start;
    let (n, v) = trace.logits.shape();
    let mut dlogits = Matrix::<T>::zeros(n, v);
    let mut loss = 0.0;
    for (i, (&m, &target)) in sample.masked.iter().zip(&sample.targets).enumerate() {
        if !m {
            continue;
        }
        let row = gen_start + i;
        let logits = trace.logits.row(row);
        let mx = logits.iter().map(|x| x.wide()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x.wide() - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += w * (z.ln() + mx - logits[target as usize].wide());
        for (j, (d, e)) in dlogits.row_mut(row).iter_mut().zip(&exps).enumerate() {
            let onehot = if j == target as usize { 1.0 } else { 0.0 };
            *d = T::cast(w * (e / z - onehot));
        }
    }
    let grads = backward(model, layout, &trace.hidden[spec.n_layers], &trace.pre_norm_final, &trace.plan, &cache, &dlogits)?;
    Ok(Some((loss, grads)))
}

/// Mean loss over samples with at least one masked position, and its gradient.
/// Per-sample work fans out over the rayon pool; the reduction runs in
/// batch order.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &[MaskedSample],
    mode: LossWeighting,
) -> Result<(f64, Weights<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<Option<(f64, Weights<T>)>> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(model, s, mode))
        .collect::<Result<_>>()?;
    let mut total = zero_grads::<T>(&model.spec);
    let mut loss = 0.0;
    let mut counted = 0usize;
    for (l, g) in parts.iter().flatten() {
        loss += l;
        add_into(&mut total, g);
        counted += 1;
    }
    if counted == 0 {
        return Ok((0.0, total));
    }
    let inv = T::cast(1.0 / counted as f64);
    for p in total.params_mut() {
        p.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((loss / counted as f64, total))
}

/// `d/dx` of `y = x · r · g`, `r = 1/rms(x)`, for every row. Accumulates the
/// gain gradient into `dgain` and returns `dx`.
fn rms_norm_backward<T: Real>(x: &Matrix<T>, inv: &[f64], gain: &[T], dy: &Matrix<T>, dgain: &mut [T]) -> Matrix<T> {
    let (n, d) = x.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dg = vec![0.0f64; d];
    for r in 0..n {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ir = inv[r];
        let mut s = 0.0;
        for j in 0..d {
            let gy = dyr[j].wide() * gain[j].wide();
            s += gy * xr[j].wide();
            dg[j] += dyr[j].wide() * xr[j].wide() * ir;
        }
        let coef = ir * ir * ir * s / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = T::cast(ir * dyr[j].wide() * gain[j].wide() - coef * xr[j].wide());
        }
    }
    for (a, b) in dgain.iter_mut().zip(dg) {
        *a = *a + T::cast(b);
    }
    dx
}

fn add_to<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a = *a + b;
    }
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

#[allow(clippy::too_many_arguments)]
fn backward<T: Real>(
    model: &Model<T>,
    layout: &SequenceLayout,
    final_normed: &Matrix<T>,
    pre_norm_final: &Matrix<T>,
    plan: &RotaryPlan,
    cache: &ForwardCache<T>,
    dlogits: &Matrix<T>,
) -> Result<Weights<T>> {
    let spec = &model.spec;
    let w = &model.weights;
    let mut g = zero_grads::<T>(spec);
    let heads = spec.n_heads;
    let dh = spec.d_head();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // Tied head: logits = f · Eᵀ.
    let de = dlogits.t_matmul(final_normed)?;
    add_to(&mut g.tok_emb, &de);
    let df = dlogits.matmul(&w.tok_emb)?;
    let mut dx = rms_norm_backward(pre_norm_final, &cache.final_inv_rms, &w.final_norm, &df, &mut g.final_norm);

    for (li, (lw, c)) in w.layers.iter().zip(&cache.blocks).enumerate().rev() {
        let gl = &mut g.layers[li];
        let n = c.x_in.rows();

        // MLP branch.
        add_to(&mut gl.w2, &c.s.t_matmul(&dx)?);
        let ds = dx.matmul_t(&lw.w2)?;
        let mut du = ds;
        for (d, &u) in du.data_mut().iter_mut().zip(c.u.data()) {
            *d = T::cast(d.wide() * silu_grad(u.wide()));
        }
        add_to(&mut gl.w1, &c.b.t_matmul(&du)?);
        let db = du.matmul_t(&lw.w1)?;
        let dmid = rms_norm_backward(&c.x_mid, &c.mlp_inv_rms, &lw.mlp_norm, &db, &mut gl.mlp_norm);
        add_to(&mut dx, &dmid);

        // Attention branch.
        add_to(&mut gl.wo, &c.o.t_matmul(&dx)?);
        let d_o = dx.matmul_t(&lw.wo)?;
        let mut dq = Matrix::<T>::zeros(n, spec.d_model);
        let mut dk = Matrix::<T>::zeros(n, spec.d_model);
        let mut dv = Matrix::<T>::zeros(n, spec.d_model);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[h];
            let mut ds_mat = vec![0.0f64; n * n];
            for i in 0..n {
                let doi = &d_o.row(i)[cols.clone()];
                let mut dp = vec![0.0f64; n];
                for (j, slot) in dp.iter_mut().enumerate() {
                    *slot = dot(doi, &c.v.row(j)[cols.clone()]);
                }
                let pr = p.row(i);
                let inner: f64 = dp.iter().zip(pr).map(|(a, b)| a * b.wide()).sum();
                for j in 0..n {
                    ds_mat[i * n + j] = pr[j].wide() * (dp[j] - inner) * inv_sqrt;
                }
                // dV_j += P_ij · dO_i
                for j in 0..n {
                    let pij = pr[j].wide();
                    for (slot, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                        *slot = T::cast(slot.wide() + pij * g.wide());
                    }
                }
            }
            for i in 0..n {
                for c2 in 0..dh {
                    let mut aq = 0.0;
                    for j in 0..n {
                        aq += ds_mat[i * n + j] * c.k_rot.get(j, h * dh + c2).wide();
                    }
                    dq.set(i, h * dh + c2, T::cast(aq));
                }
            }
            for j in 0..n {
                for c2 in 0..dh {
                    let mut ak = 0.0;
                    for i in 0..n {
                        ak += ds_mat[i * n + j] * c.q_rot.get(i, h * dh + c2).wide();
                    }
                    dk.set(j, h * dh + c2, T::cast(ak));
                }
            }
        }
        for r in 0..n {
            for h in 0..heads {
                plan.rotate_inverse(r, &mut dq.row_mut(r)[h * dh..(h + 1) * dh]);
                plan.rotate_inverse(r, &mut dk.row_mut(r)[h * dh..(h + 1) * dh]);
            }
        }
        add_to(&mut gl.wq, &c.a.t_matmul(&dq)?);
        add_to(&mut gl.wk, &c.a.t_matmul(&dk)?);
        add_to(&mut gl.wv, &c.a.t_matmul(&dv)?);
        let mut da = dq.matmul_t(&lw.wq)?;
        add_to(&mut da, &dk.matmul_t(&lw.wk)?);
        add_to(&mut da, &dv.matmul_t(&lw.wv)?);
        let din = rms_norm_backward(&c.x_in, &c.attn_inv_rms, &lw.attn_norm, &da, &mut gl.attn_norm);
        add_to(&mut dx, &din);
    }

    // Embedding inputs.
    for (row, vis) in layout.visual.iter().enumerate() {
        let dr = dx.row(row);
        for (c, &d) in dr.iter().enumerate() {
            g.vis_bias[c] = g.vis_bias[c] + d;
        }
        for (k, &x) in vis.iter().enumerate() {
            let grow = g.vis_proj.row_mut(k);
            for (slot, &d) in grow.iter_mut().zip(dr) {
                *slot = T::cast(slot.wide() + x as f64 * d.wide());
            }
        }
    }
    for pos in layout.visual.len()..layout.len() {
        let id = layout.token_at(pos).expect("discrete position") as usize;
        let src = dx.row(pos).to_vec();
        for (slot, d) in g.tok_emb.row_mut(id).iter_mut().zip(src) {
            *slot = *slot + d;
        }
    }
    Ok(g)
}
