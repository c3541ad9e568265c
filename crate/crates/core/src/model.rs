//! Toy bidirectional diffusion transformer.
//!
//! Pre-norm residual blocks (`h ← h + Attn(RMSNorm(h))`, `h ← h + MLP(RMSNorm(h))`)
//! with rotary attention, a SiLU MLP, a final RMSNorm and an output head tied
//! to the token embedding table. Visual tokens enter as continuous vectors
//! through a linear projector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::numkit::{dot, inv_rms, rms_norm_rows, softmax_in_place, Matrix, Real};
use crate::rope::{RopeScalerSpec, RotaryPlan, Segment};

/// Architecture hyperparameters and special token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    /// Width of the continuous visual inputs.
    pub d_vis: usize,
    pub mask_id: u32,
    pub eot_id: u32,
    pub pad_id: u32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 4,
            mlp_hidden: 64,
            d_vis: 32,
            mask_id: 63,
            eot_id: 62,
            pad_id: 61,
        }
    }
}

impl ModelSpec {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.mask_id || id == self.eot_id || id == self.pad_id
    }

    /// Token ids other than mask/eot/pad, ascending.
    pub fn content_ids(&self) -> Vec<u32> {
        (0..self.vocab_size as u32).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.mlp_hidden == 0 {
            v.push("vocab_size, d_model, n_layers and mlp_hidden must be positive".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            v.push(format!(
                "n_heads: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        } else if self.d_head() % 2 != 0 {
            v.push(format!("n_heads: head dimension {} must be even", self.d_head()));
        }
        if self.d_vis == 0 {
            v.push("d_vis: must be positive".to_string());
        }
        let ids = [self.mask_id, self.eot_id, self.pad_id];
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            v.push("mask_id: special ids must be distinct".to_string());
        }
        if ids.iter().any(|&i| i as usize >= self.vocab_size) {
            v.push("mask_id: special ids must be below vocab_size".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(first) => Err(Error::invalid(format!("model spec {first}"))),
        }
    }
}

/// A flat visual → prompt → generation sequence.
///
/// Spans are implied by the three vectors, so they are always disjoint,
/// contiguous and in order. Masked positions are the generation positions
/// holding `mask_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    /// Continuous visual inputs, one `d_vis` vector per visual token.
    pub visual: Vec<Vec<f32>>,
    pub prompt: Vec<u32>,
    pub generation: Vec<u32>,
    /// Added to every position index (zero in normal use).
    pub position_offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

impl SequenceLayout {
    pub fn new(visual: Vec<Vec<f32>>, prompt: Vec<u32>, generation: Vec<u32>) -> Self {
        Self {
            visual,
            prompt,
            generation,
            position_offset: 0,
        }
    }

    /// A layout with a fully masked generation span.
    pub fn masked(visual: Vec<Vec<f32>>, prompt: Vec<u32>, gen_len: usize, mask_id: u32) -> Self {
        Self::new(visual, prompt, vec![mask_id; gen_len])
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.prompt.len() + self.generation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_span(&self) -> Span {
        Span {
            start: 0,
            len: self.visual.len(),
        }
    }

    pub fn prompt_span(&self) -> Span {
        Span {
            start: self.visual.len(),
            len: self.prompt.len(),
        }
    }

    pub fn generation_span(&self) -> Span {
        Span {
            start: self.visual.len() + self.prompt.len(),
            len: self.generation.len(),
        }
    }

    pub fn segment_of(&self, pos: usize) -> Segment {
        if pos < self.visual.len() {
            Segment::Visual
        } else if pos < self.visual.len() + self.prompt.len() {
            Segment::Prompt
        } else {
            Segment::Generation
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.len()).map(|p| self.segment_of(p)).collect()
    }

    /// Rotary position index of every row.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).map(|p| p + self.position_offset).collect()
    }

    /// Discrete token at `pos`, `None` for visual positions.
    pub fn token_at(&self, pos: usize) -> Option<u32> {
        let p = self.prompt_span();
        let g = self.generation_span();
        if p.contains(pos) {
            Some(self.prompt[pos - p.start])
        } else if g.contains(pos) {
            Some(self.generation[pos - g.start])
        } else {
            None
        }
    }

    /// Absolute positions holding the mask token.
    pub fn masked_positions(&self, mask_id: u32) -> Vec<usize> {
        let start = self.generation_span().start;
        self.generation
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask_id)
            .map(|(i, _)| start + i)
            .collect()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if let Some((i, v)) = self.visual.iter().enumerate().find(|(_, v)| v.len() != spec.d_vis) {
            return Err(Error::invalid(format!(
                "visual token {i} has width {}, expected {}",
                v.len(),
                spec.d_vis
            )));
        }
        if let Some(&t) = self
            .prompt
            .iter()
            .chain(&self.generation)
            .find(|&&t| t as usize >= spec.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                spec.vocab_size
            )));
        }
        if self.is_empty() {
            return Err(Error::invalid("empty layout"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Vec<T>,
    /// `d_model × mlp_hidden`
    pub w1: Matrix<T>,
    /// `mlp_hidden × d_model`
    pub w2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    /// `vocab × d_model`, shared by the input lookup and the output head.
    pub tok_emb: Matrix<T>,
    /// `d_vis × d_model`
    pub vis_proj: Matrix<T>,
    pub vis_bias: Vec<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
}

/// Borrowed view of one named parameter tensor.
pub struct Param<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Real> Weights<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        Self {
            tok_emb: Matrix::zeros(spec.vocab_size, d),
            vis_proj: Matrix::zeros(spec.d_vis, d),
            vis_bias: vec![T::zero(); d],
            layers: (0..spec.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![T::one(); d],
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    mlp_norm: vec![T::one(); d],
                    w1: Matrix::zeros(d, spec.mlp_hidden),
                    w2: Matrix::zeros(spec.mlp_hidden, d),
                })
                .collect(),
            final_norm: vec![T::one(); d],
        }
    }

    /// Gaussian initialization, deterministic per seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(spec);
        let d = spec.d_model as f64;
        let mut fill = |m: &mut Matrix<T>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in m.data_mut() {
                *v = T::cast(normal.sample(&mut rng));
            }
        };
        fill(&mut w.tok_emb, 0.5);
        fill(&mut w.vis_proj, 1.0 / (spec.d_vis as f64).sqrt());
        let resid = 1.0 / (2.0 * spec.n_layers as f64).sqrt();
        for l in &mut w.layers {
            fill(&mut l.wq, 1.0 / d.sqrt());
            fill(&mut l.wk, 1.0 / d.sqrt());
            fill(&mut l.wv, 1.0 / d.sqrt());
            fill(&mut l.wo, resid / d.sqrt());
            fill(&mut l.w1, 1.0 / d.sqrt());
            fill(&mut l.w2, resid / (spec.mlp_hidden as f64).sqrt());
        }
        w
    }

    /// All parameters in a fixed canonical order.
    pub fn params(&self) -> Vec<Param<'_, T>> {
        fn mat<T: Real>(name: String, x: &Matrix<T>) -> Param<'_, T> {
            Param {
                name,
                dims: vec![x.rows(), x.cols()],
                data: x.data(),
            }
        }
        fn vector<T>(name: String, x: &[T]) -> Param<'_, T> {
            Param {
                name,
                dims: vec![x.len()],
                data: x,
            }
        }
        let mut out = vec![
            mat("tok_emb".into(), &self.tok_emb),
            mat("vis_proj".into(), &self.vis_proj),
            vector("vis_bias".into(), &self.vis_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(vector(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(mat(format!("layers.{i}.wq"), &l.wq));
            out.push(mat(format!("layers.{i}.wk"), &l.wk));
            out.push(mat(format!("layers.{i}.wv"), &l.wv));
            out.push(mat(format!("layers.{i}.wo"), &l.wo));
            out.push(vector(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(mat(format!("layers.{i}.w1"), &l.w1));
            out.push(mat(format!("layers.{i}.w2"), &l.w2));
        }
        out.push(vector("final_norm".into(), &self.final_norm));
        out
    }

    /// Mutable parameter slices in the same order as [`Weights::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.tok_emb.data_mut(),
            self.vis_proj.data_mut(),
            &mut self.vis_bias,
        ];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(&mut l.mlp_norm);
            out.push(l.w1.data_mut());
            out.push(l.w2.data_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let v = |x: &[T]| x.iter().map(|a| U::cast(a.wide())).collect::<Vec<U>>();
        Weights {
            tok_emb: self.tok_emb.cast(),
            vis_proj: self.vis_proj.cast(),
            vis_bias: v(&self.vis_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: v(&l.attn_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: v(&l.mlp_norm),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
        }
    }
}

/// Model spec plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub weights: Weights<T>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec, weights: Weights<T>) -> Result<Self> {
        spec.validate()?;
        let reference = Weights::<T>::zeros(&spec);
        for (a, b) in weights.params().iter().zip(reference.params()) {
            if a.dims != b.dims {
                return Err(Error::invalid(format!(
                    "parameter {} has dims {:?}, expected {:?}",
                    a.name, a.dims, b.dims
                )));
            }
        }
        if weights.layers.len() != spec.n_layers {
            return Err(Error::invalid("layer count does not match spec"));
        }
        Ok(Self { spec, weights })
    }

    /// Container with `config_text` and one section per parameter.
    pub fn to_container(&self, config_text: impl Into<String>) -> Container {
        let mut c = Container::new(config_text);
        for p in self.weights.params() {
            c.push(
                p.name,
                Tensor {
                    dims: p.dims,
                    data: p.data.iter().map(|x| x.wide() as f32).collect(),
                },
            );
        }
        c
    }
}

impl Model<f32> {
    /// Rebuild from a container whose config text is a JSON document with a
    /// top-level `model` object.
    pub fn from_container(c: &Container) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(&c.config_text)?;
        let spec_value = doc
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("config text has no `model` object".into()))?;
        let spec: ModelSpec = serde_json::from_value(spec_value)?;
        spec.validate()?;
        let mut weights = Weights::<f32>::zeros(&spec);
        let expected: Vec<(String, Vec<usize>)> = weights
            .params()
            .into_iter()
            .map(|p| (p.name, p.dims))
            .collect();
        for ((name, dims), slot) in expected.into_iter().zip(weights.params_mut()) {
            let t = c.get(&name)?;
            if t.dims != dims {
                return Err(Error::Format(format!(
                    "section `{name}` has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        Self::new(spec, weights)
    }
}

/// Transformation of hidden states at masked positions during a forward pass.
pub trait StateHook<T: Real>: Sync {
    /// After block `layer` (1-based), before the next block consumes it.
    fn block_output(&self, _layer: usize, _states: &mut Matrix<T>, _masked: &[usize]) {}
    /// After the final RMSNorm, immediately before the tied head.
    fn final_states(&self, _states: &mut Matrix<T>, _masked: &[usize]) {}
}

/// A hook that changes nothing.
pub struct IdentityHook;

impl<T: Real> StateHook<T> for IdentityHook {}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f32> {
    /// `L+1` states: embedding output, block outputs `1..L−1`, and the
    /// final block output after the final norm at index `L` (before any
    /// final-state hook).
    pub hidden: Vec<Matrix<T>>,
    /// Output of block `L` before the final norm.
    pub pre_norm_final: Matrix<T>,
    /// What the head sees (post-hook).
    pub final_states: Matrix<T>,
    pub logits: Matrix<T>,
    /// `[layer][head]` row-stochastic `J × J` matrices.
    pub attention: Option<Vec<Vec<Matrix<T>>>>,
    /// `[layer][head]` un-rotated `(q, k)` projections, `J × d_head` each.
    pub qk: Option<Vec<Vec<(Matrix<T>, Matrix<T>)>>>,
    pub plan: RotaryPlan,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
    pub record_qk: bool,
}

/// Intermediate values of one block, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    pub x_in: Matrix<T>,
    pub attn_inv_rms: Vec<f64>,
    pub a: Matrix<T>,
    pub q_rot: Matrix<T>,
    pub k_rot: Matrix<T>,
    pub v: Matrix<T>,
    pub probs: Vec<Matrix<T>>,
    pub o: Matrix<T>,
    pub x_mid: Matrix<T>,
    pub mlp_inv_rms: Vec<f64>,
    pub b: Matrix<T>,
    pub u: Matrix<T>,
    pub s: Matrix<T>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct ForwardCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    pub final_inv_rms: Vec<f64>,
}

/// Input rows for a layout: embedding-table lookups for discrete tokens and
/// projected continuous vectors for visual tokens.
pub fn embed<T: Real>(layout: &SequenceLayout, model: &Model<T>) -> Result<Matrix<T>> {
    layout.validate(&model.spec)?;
    let d = model.spec.d_model;
    let w = &model.weights;
    let mut x = Matrix::zeros(layout.len(), d);
    for (row, vis) in layout.visual.iter().enumerate() {
        let out = x.row_mut(row);
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = w.vis_bias[c].wide();
            for (k, &v) in vis.iter().enumerate() {
                acc += v as f64 * w.vis_proj.get(k, c).wide();
            }
            *o = T::cast(acc);
        }
    }
    for pos in layout.visual.len()..layout.len() {
        let id = layout.token_at(pos).expect("discrete position") as usize;
        x.row_mut(pos).copy_from_slice(w.tok_emb.row(id));
    }
    Ok(x)
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Forward pass over a layout.
pub fn forward<T: Real>(
    model: &Model<T>,
    layout: &SequenceLayout,
    scaler: &RopeScalerSpec,
    hook: Option<&dyn StateHook<T>>,
) -> Result<ForwardTrace<T>> {
    forward_with(model, layout, scaler, hook, ForwardOptions::default())
}

pub fn forward_with<T: Real>(
    model: &Model<T>,
    layout: &SequenceLayout,
    scaler: &RopeScalerSpec,
    hook: Option<&dyn StateHook<T>>,
    opts: ForwardOptions,
) -> Result<ForwardTrace<T>> {
    let x0 = embed(layout, model)?;
    let plan = RotaryPlan::new(model.spec.d_head(), scaler, &layout.positions(), &layout.segments())?;
    let masked = layout.masked_positions(model.spec.mask_id);
    run_blocks(model, x0, plan, &masked, hook, opts, None)
}

/// Forward a single embedding alone at position 0.
///
/// Returns the `L+1` states of the length-1 sequence and its logits.
pub fn uncontextualized_forward<T: Real>(
    embedding: &[T],
    model: &Model<T>,
    scaler: &RopeScalerSpec,
) -> Result<ForwardTrace<T>> {
    if embedding.len() != model.spec.d_model {
        return Err(Error::invalid(format!(
            "embedding width {} does not match d_model {}",
            embedding.len(),
            model.spec.d_model
        )));
    }
    let x0 = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
    let plan = RotaryPlan::new(model.spec.d_head(), scaler, &[0], &[Segment::Generation])?;
    run_blocks(model, x0, plan, &[0], None, ForwardOptions::default(), None)
}

pub(crate) fn run_blocks<T: Real>(
    model: &Model<T>,
    x0: Matrix<T>,
    plan: RotaryPlan,
    masked: &[usize],
    hook: Option<&dyn StateHook<T>>,
    opts: ForwardOptions,
    mut cache: Option<&mut ForwardCache<T>>,
) -> Result<ForwardTrace<T>> {
    let spec = &model.spec;
    let w = &model.weights;
    let (n, d) = x0.shape();
    let heads = spec.n_heads;
    let dh = spec.d_head();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut hidden = Vec::with_capacity(spec.n_layers + 1);
    let mut attention_all = opts.record_attention.then(Vec::new);
    let mut qk_all = opts.record_qk.then(Vec::new);
    let mut x = x0;
    hidden.push(x.clone());

    for (li, lw) in w.layers.iter().enumerate() {
        let layer = li + 1;
        let x_in = x.clone();
        let attn_inv_rms: Vec<f64> = (0..n).map(|r| inv_rms(x.row(r))).collect();
        let a = rms_norm_rows(&x, &lw.attn_norm);
        let q = a.matmul(&lw.wq)?;
        let k = a.matmul(&lw.wk)?;
        let v = a.matmul(&lw.wv)?;

        if let Some(qk) = qk_all.as_mut() {
            let per_head: Vec<(Matrix<T>, Matrix<T>)> = (0..heads)
                .map(|h| {
                    let cols = h * dh..(h + 1) * dh;
                    (
                        Matrix::from_fn(n, dh, |r, c| q.get(r, cols.start + c)),
                        Matrix::from_fn(n, dh, |r, c| k.get(r, cols.start + c)),
                    )
                })
                .collect();
            qk.push(per_head);
        }

        let mut q_rot = q;
        let mut k_rot = k;
        for r in 0..n {
            for h in 0..heads {
                plan.rotate(r, &mut q_rot.row_mut(r)[h * dh..(h + 1) * dh]);
                plan.rotate(r, &mut k_rot.row_mut(r)[h * dh..(h + 1) * dh]);
            }
        }

        let mut o = Matrix::<T>::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::<T>::zeros(n, n);
            for i in 0..n {
                let qi = &q_rot.row(i)[cols.clone()];
                let row = p.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = T::cast(dot(qi, &k_rot.row(j)[cols.clone()]) * inv_sqrt);
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let mut acc = vec![0.0f64; dh];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    let pij = pij.wide();
                    for (slot, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *slot += pij * vv.wide();
                    }
                }
                for (dst, a) in o.row_mut(i)[cols.clone()].iter_mut().zip(acc) {
                    *dst = T::cast(a);
                }
            }
            probs.push(p);
        }
        let attn_out = o.matmul(&lw.wo)?;
        x.add_assign(&attn_out)?;
        let x_mid = x.clone();

        let mlp_inv_rms: Vec<f64> = (0..n).map(|r| inv_rms(x.row(r))).collect();
        let b = rms_norm_rows(&x, &lw.mlp_norm);
        let u = b.matmul(&lw.w1)?;
        let s = u.map(|z| T::cast(silu(z.wide())));
        let mlp_out = s.matmul(&lw.w2)?;
        x.add_assign(&mlp_out)?;

        if !x.is_finite() {
            return Err(Error::NonFinite { layer });
        }
        if let Some(h) = hook {
            h.block_output(layer, &mut x, masked);
        }
        if let Some(att) = attention_all.as_mut() {
            att.push(probs.clone());
        }
        if let Some(c) = cache.as_deref_mut() {
            c.blocks.push(BlockCache {
                x_in,
                attn_inv_rms,
                a,
                q_rot,
                k_rot,
                v,
                probs,
                o,
                x_mid,
                mlp_inv_rms,
                b,
                u,
                s,
            });
        }
        if layer < spec.n_layers {
            hidden.push(x.clone());
        }
    }

    let pre_norm_final = x;
    let final_norm = rms_norm_rows(&pre_norm_final, &w.final_norm);
    if let Some(c) = cache.as_deref_mut() {
        c.final_inv_rms = (0..n).map(|r| inv_rms(pre_norm_final.row(r))).collect();
    }
    hidden.push(final_norm.clone());
    let mut final_states = final_norm;
    if let Some(h) = hook {
        h.final_states(&mut final_states, masked);
    }
    let logits = final_states.matmul_t(&w.tok_emb)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            layer: spec.n_layers,
        });
    }
    Ok(ForwardTrace {
        hidden,
        pre_norm_final,
        final_states,
        logits,
        attention: attention_all,
        qk: qk_all,
        plan,
    })
}
