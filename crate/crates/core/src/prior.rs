//! Mask prior suppression.
//!
//! A context-free prior embedding (by default the mean content-token
//! embedding) is forwarded alone; its layer states define an anchor `μ` and a
//! PCA basis `U`. Masked hidden states aligned with the prior direction inside
//! that subspace are attenuated in proportion to their alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::model::{uncontextualized_forward, Model, StateHook};
use crate::numkit::{norm, pca_fit, Matrix, Real};
use crate::rope::RopeScalerSpec;

/// Where the prior embedding comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorSource {
    VocabMean,
    FreqWeighted,
    /// Mean embedding of the `n` highest-logit content tokens of the
    /// uncontextualized mask token.
    Topk { n: usize },
    Random { seed: u64 },
}

impl Default for PriorSource {
    fn default() -> Self {
        PriorSource::VocabMean
    }
}

impl PriorSource {
    pub fn label(&self) -> String {
        match self {
            PriorSource::VocabMean => "vocab_mean".into(),
            PriorSource::FreqWeighted => "freq_weighted".into(),
            PriorSource::Topk { n } => format!("topk{n}"),
            PriorSource::Random { seed } => format!("random{seed}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// `h̃ = h + U(z̃ − z)`: the complement of the subspace is kept.
    #[default]
    ResidualPreserving,
    /// `h̃ = U z̃ + μ`.
    Literal,
}

/// Whether final-layer suppression acts after or before the final RMSNorm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    PostNorm,
    PreNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuppressionSpec {
    /// Total budget λ, split evenly over `layers`.
    pub lambda: f64,
    /// 1-based layer indices; empty means the final layer only.
    pub layers: Vec<usize>,
    pub reconstruction: Reconstruction,
    pub placement: Placement,
}

impl Default for SuppressionSpec {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            layers: Vec::new(),
            reconstruction: Reconstruction::ResidualPreserving,
            placement: Placement::PostNorm,
        }
    }
}

impl SuppressionSpec {
    pub fn final_only(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    /// Configured layers, sorted and deduplicated, with the empty set
    /// resolved to `{n_layers}`.
    pub fn resolved_layers(&self, n_layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            return vec![n_layers];
        }
        let mut v = self.layers.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn per_layer_lambda(&self, n_layers: usize) -> f64 {
        self.lambda / self.resolved_layers(n_layers).len() as f64
    }

    pub fn violations(&self, n_layers: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            v.push(format!("lambda: must be finite and >= 0, got {}", self.lambda));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l == 0 || l > n_layers) {
            v.push(format!("layers: index {l} outside 1..={n_layers}"));
        }
        v
    }
}

/// `(μ, U, u, k)` plus the prior's own states, for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSubspace {
    pub mu: Vec<f64>,
    /// `d × k`, orthonormal columns.
    pub basis: Matrix<f64>,
    /// Unit `k`-vector.
    pub prior_dir: Vec<f64>,
    pub source: PriorSource,
    pub eigenvalues: Vec<f64>,
    /// Fewer than the requested components were available.
    pub rank_deficient: bool,
    /// The prior embedding itself.
    pub prior_embedding: Vec<f64>,
    /// Final-layer state of the prior embedding.
    pub prior_final: Vec<f64>,
}

impl PriorSubspace {
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    pub fn d(&self) -> usize {
        self.basis.rows()
    }

    /// `Uᵀ(h − μ)`.
    pub fn project<T: Real>(&self, h: &[T]) -> Vec<f64> {
        let k = self.k();
        let mut z = vec![0.0f64; k];
        for (r, (&hv, &m)) in h.iter().zip(&self.mu).enumerate() {
            let delta = hv.wide() - m;
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += self.basis.get(r, c) * delta;
            }
        }
        z
    }

    /// `U · prior_dir`, a unit `d`-vector.
    pub fn direction(&self) -> Vec<f64> {
        (0..self.d())
            .map(|r| (0..self.k()).map(|c| self.basis.get(r, c) * self.prior_dir[c]).sum())
            .collect()
    }

    /// Build directly from a basis and direction (normalizing the direction).
    pub fn from_parts(mu: Vec<f64>, basis: Matrix<f64>, prior_dir: Vec<f64>) -> Result<Self> {
        if mu.len() != basis.rows() || prior_dir.len() != basis.cols() {
            return Err(Error::invalid("subspace parts have inconsistent sizes"));
        }
        let n = norm(&prior_dir);
        if n < 1e-9 {
            return Err(Error::DegeneratePrior("zero prior direction".into()));
        }
        let d = mu.len();
        Ok(Self {
            prior_dir: prior_dir.iter().map(|x| x / n).collect(),
            mu,
            basis,
            source: PriorSource::VocabMean,
            eigenvalues: Vec::new(),
            rank_deficient: false,
            prior_embedding: vec![0.0; d],
            prior_final: vec![0.0; d],
        })
    }

    /// Sidecar with sections `mu`, `basis`, `prior_dir` (plus the prior's
    /// embedding, final state and eigenvalues).
    pub fn to_container(&self, config_text: impl Into<String>) -> Container {
        let mut c = Container::new(config_text);
        c.push("mu", Tensor::vector(&self.mu));
        c.push("basis", Tensor::matrix(&self.basis));
        c.push("prior_dir", Tensor::vector(&self.prior_dir));
        c.push("eigenvalues", Tensor::vector(&self.eigenvalues));
        c.push("prior_embedding", Tensor::vector(&self.prior_embedding));
        c.push("prior_final", Tensor::vector(&self.prior_final));
        c
    }

    /// Inverse of [`PriorSubspace::to_container`]. Values were stored as f32,
    /// so the direction is renormalized.
    pub fn from_container(c: &Container, source: PriorSource) -> Result<Self> {
        let mu = c.get("mu")?.to_vector::<f64>()?;
        let basis = c.get("basis")?.to_matrix::<f64>()?;
        let prior_dir = c.get("prior_dir")?.to_vector::<f64>()?;
        let mut sub = Self::from_parts(mu, basis, prior_dir)?;
        sub.source = source;
        sub.eigenvalues = c.get("eigenvalues")?.to_vector()?;
        sub.prior_embedding = c.get("prior_embedding")?.to_vector()?;
        sub.prior_final = c.get("prior_final")?.to_vector()?;
        sub.rank_deficient = sub.eigenvalues.len() < sub.k();
        Ok(sub)
    }
}

/// Mean of the content-token embedding rows (special ids excluded).
pub fn vocab_mean<T: Real>(model: &Model<T>) -> Result<Vec<f64>> {
    let ids = model.spec.content_ids();
    if ids.is_empty() {
        return Err(Error::invalid("empty content vocabulary"));
    }
    let weights = vec![1.0; ids.len()];
    Ok(weighted_mean(model, &ids, &weights))
}

fn weighted_mean<T: Real>(model: &Model<T>, ids: &[u32], weights: &[f64]) -> Vec<f64> {
    let table = &model.weights.tok_emb;
    let mut acc = vec![0.0f64; table.cols()];
    let mut total = 0.0;
    for (&id, &w) in ids.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(table.row(id as usize)) {
            *a += w * v.wide();
        }
        total += w;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

/// Alternative prior directions.
///
/// `freqs` are per-token corpus counts indexed by token id (needed for
/// `FreqWeighted`); `mask_logits` are the logits of the uncontextualized mask
/// token (needed for `Topk`).
pub fn alt_prior_direction<T: Real>(
    source: &PriorSource,
    model: &Model<T>,
    freqs: Option<&[f64]>,
    mask_logits: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let ids = model.spec.content_ids();
    match source {
        PriorSource::VocabMean => vocab_mean(model),
        PriorSource::FreqWeighted => {
            let f = freqs.ok_or_else(|| Error::invalid("freq_weighted prior needs corpus token frequencies"))?;
            if f.len() != model.spec.vocab_size {
                return Err(Error::invalid(format!(
                    "frequency table has {} entries, vocabulary has {}",
                    f.len(),
                    model.spec.vocab_size
                )));
            }
            let w: Vec<f64> = ids.iter().map(|&i| f[i as usize]).collect();
            if w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("frequencies must be nonnegative with positive total"));
            }
            Ok(weighted_mean(model, &ids, &w))
        }
        PriorSource::Topk { n } => {
            let logits = mask_logits.ok_or_else(|| Error::invalid("topk prior needs mask-token logits"))?;
            let top = top_content_tokens(logits, &model.spec, *n)?;
            Ok(weighted_mean(model, &top, &vec![1.0; top.len()]))
        }
        PriorSource::Random { seed } => {
            let target = norm(&vocab_mean(model)?);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let g: Vec<f64> = (0..model.spec.d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
            let gn = norm(&g);
            Ok(g.iter().map(|x| x / gn * target).collect())
        }
    }
}

/// The `n` content tokens with the highest logits, descending (ties by id).
pub fn top_content_tokens<T: Real>(logits: &[T], spec: &crate::model::ModelSpec, n: usize) -> Result<Vec<u32>> {
    let mut ids = spec.content_ids();
    if n == 0 || n > ids.len() {
        return Err(Error::invalid(format!(
            "top-k size {n} outside 1..={}",
            ids.len()
        )));
    }
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .wide()
            .total_cmp(&logits[a as usize].wide())
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    Ok(ids)
}

/// Resolve a prior source to an embedding, running the mask-token forward
/// when the source needs it.
pub fn prior_embedding<T: Real>(
    source: &PriorSource,
    model: &Model<T>,
    scaler: &RopeScalerSpec,
    freqs: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match source {
        PriorSource::Topk { .. } => {
            let mask_row = model.weights.tok_emb.row(model.spec.mask_id as usize).to_vec();
            let t = uncontextualized_forward(&mask_row, model, scaler)?;
            let logits: Vec<f64> = t.logits.row(0).iter().map(|x| x.wide()).collect();
            alt_prior_direction(source, model, freqs, Some(&logits))
        }
        _ => alt_prior_direction(source, model, freqs, None),
    }
}

/// Forward the prior embedding alone, take its layer states `1..L`, and fit
/// the `k`-dimensional prior subspace.
pub fn build_subspace<T: Real>(
    prior_embedding: &[f64],
    model: &Model<T>,
    scaler: &RopeScalerSpec,
    k: usize,
) -> Result<PriorSubspace> {
    build_subspace_with(prior_embedding, model, scaler, k, Placement::PostNorm)
}

/// As [`build_subspace`]; with `PreNorm` the final-layer state is taken before
/// the final RMSNorm.
pub fn build_subspace_with<T: Real>(
    prior_embedding: &[f64],
    model: &Model<T>,
    scaler: &RopeScalerSpec,
    k: usize,
    placement: Placement,
) -> Result<PriorSubspace> {
    if k == 0 {
        return Err(Error::invalid("subspace dimension k must be >= 1"));
    }
    let e: Vec<T> = prior_embedding.iter().map(|&x| T::cast(x)).collect();
    let trace = uncontextualized_forward(&e, model, scaler)?;
    let l = model.spec.n_layers;
    let mut states: Vec<Vec<f64>> = trace.hidden[1..=l]
        .iter()
        .map(|m| m.row(0).iter().map(|x| x.wide()).collect())
        .collect();
    if placement == Placement::PreNorm {
        states[l - 1] = trace.pre_norm_final.row(0).iter().map(|x| x.wide()).collect();
    }
    let samples = Matrix::from_rows(&states)?;
    let k_eff = k.min(l.min(model.spec.d_model));
    if k_eff < k {
        return Err(Error::invalid(format!(
            "subspace dimension {k} exceeds min(layers, d_model) = {k_eff}"
        )));
    }
    let pca = pca_fit(&samples, k)?;
    if pca.k() == 0 {
        return Err(Error::DegeneratePrior("layer states have zero covariance".into()));
    }
    let final_state = states[l - 1].clone();
    let z = pca.project(&final_state);
    let zn = norm(&z);
    if zn < 1e-9 {
        return Err(Error::DegeneratePrior(format!(
            "final prior state has projection norm {zn:e}"
        )));
    }
    Ok(PriorSubspace {
        mu: pca.mean,
        basis: pca.basis,
        prior_dir: z.iter().map(|x| x / zn).collect(),
        source: PriorSource::VocabMean,
        eigenvalues: pca.eigenvalues,
        rank_deficient: pca.rank_deficient,
        prior_embedding: prior_embedding.to_vec(),
        prior_final: final_state,
    })
}

/// Alignment `c = ⟨z, u⟩ / ‖z‖` with `z = Uᵀ(h − μ)`; zero when `‖z‖ < 1e-12`.
pub fn cosine_to_prior<T: Real>(h: &[T], sub: &PriorSubspace) -> f64 {
    let z = sub.project(h);
    alignment(&z, sub).0
}

fn alignment(z: &[f64], sub: &PriorSubspace) -> (f64, f64) {
    let zu: f64 = z.iter().zip(&sub.prior_dir).map(|(a, b)| a * b).sum();
    let zn = norm(z);
    if zn < 1e-12 {
        (0.0, zu)
    } else {
        ((zu / zn).clamp(-1.0, 1.0), zu)
    }
}

/// Residual-preserving suppression.
pub fn suppress<T: Real>(h: &[T], sub: &PriorSubspace, lambda: f64) -> Vec<T> {
    suppress_with(h, sub, lambda, Reconstruction::ResidualPreserving)
}

pub fn suppress_with<T: Real>(h: &[T], sub: &PriorSubspace, lambda: f64, mode: Reconstruction) -> Vec<T> {
    let z = sub.project(h);
    let (c, zu) = alignment(&z, sub);
    let alpha = lambda * c.max(0.0);
    match mode {
        Reconstruction::ResidualPreserving => {
            if alpha == 0.0 {
                return h.to_vec();
            }
            let dir = sub.direction();
            h.iter()
                .zip(&dir)
                .map(|(&hv, &dv)| T::cast(hv.wide() - alpha * zu * dv))
                .collect()
        }
        Reconstruction::Literal => {
            let zt: Vec<f64> = z
                .iter()
                .zip(&sub.prior_dir)
                .map(|(zc, uc)| zc - alpha * zu * uc)
                .collect();
            (0..sub.d())
                .map(|r| {
                    let mut v = sub.mu[r];
                    for (c, zc) in zt.iter().enumerate() {
                        v += sub.basis.get(r, c) * zc;
                    }
                    T::cast(v)
                })
                .collect()
        }
    }
}

/// Forward hook applying suppression to masked rows at the configured layers.
pub struct MpsHook<'a> {
    pub sub: &'a PriorSubspace,
    pub spec: &'a SuppressionSpec,
    pub n_layers: usize,
}

impl<'a> MpsHook<'a> {
    pub fn new(sub: &'a PriorSubspace, spec: &'a SuppressionSpec, n_layers: usize) -> Self {
        Self { sub, spec, n_layers }
    }

    fn apply<T: Real>(&self, states: &mut Matrix<T>, masked: &[usize]) {
        let lambda = self.spec.per_layer_lambda(self.n_layers);
        for &p in masked {
            let out = suppress_with(states.row(p), self.sub, lambda, self.spec.reconstruction);
            states.row_mut(p).copy_from_slice(&out);
        }
    }

    fn active(&self, layer: usize) -> bool {
        self.spec.resolved_layers(self.n_layers).contains(&layer)
    }
}

impl<T: Real> StateHook<T> for MpsHook<'_> {
    fn block_output(&self, layer: usize, states: &mut Matrix<T>, masked: &[usize]) {
        let is_final = layer == self.n_layers;
        if self.active(layer) && (!is_final || self.spec.placement == Placement::PreNorm) {
            self.apply(states, masked);
        }
    }

    fn final_states(&self, states: &mut Matrix<T>, masked: &[usize]) {
        if self.active(self.n_layers) && self.spec.placement == Placement::PostNorm {
            self.apply(states, masked);
        }
    }
}
