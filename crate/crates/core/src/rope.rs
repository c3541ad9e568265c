//! Rotary position embedding and its frequency scalers.
//!
//! A [`FrequencyTable`] holds the base frequencies `θᵢ = 10000^(−2i/d_head)`
//! and one multiplicative factor `sᵢ` per dimension pair; pair `i` of a
//! vector at position `m` is rotated by `sᵢ·m·θᵢ`. All scalers (identity,
//! monotonic gate, NTK base change, piecewise YaRN ramp) are expressed as
//! tables so attention code never branches on the scaler kind.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Real;

/// Base of the rotary frequency ladder.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    #[default]
    Identity,
    Monotonic,
    Ntk,
    Yarn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Sigmoid,
    Cosine,
    Exponential,
    Linear,
    Power,
}

impl GateKind {
    pub const ALL: [GateKind; 5] = [
        GateKind::Sigmoid,
        GateKind::Cosine,
        GateKind::Exponential,
        GateKind::Linear,
        GateKind::Power,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Sigmoid => "sigmoid",
            GateKind::Cosine => "cosine",
            GateKind::Exponential => "exponential",
            GateKind::Linear => "linear",
            GateKind::Power => "power",
        }
    }
}

/// The three contiguous regions of a flattened multimodal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Visual,
    Prompt,
    Generation,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Visual => "visual",
            Segment::Prompt => "prompt",
            Segment::Generation => "generation",
        }
    }
}

/// Which segments receive the scaled rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSet {
    pub visual: bool,
    pub prompt: bool,
    pub generation: bool,
}

impl SegmentSet {
    pub const ALL: SegmentSet = SegmentSet {
        visual: true,
        prompt: true,
        generation: true,
    };

    pub fn only(segment: Segment) -> Self {
        let mut s = SegmentSet {
            visual: false,
            prompt: false,
            generation: false,
        };
        match segment {
            Segment::Visual => s.visual = true,
            Segment::Prompt => s.prompt = true,
            Segment::Generation => s.generation = true,
        }
        s
    }

    pub fn contains(&self, segment: Segment) -> bool {
        match segment {
            Segment::Visual => self.visual,
            Segment::Prompt => self.prompt,
            Segment::Generation => self.generation,
        }
    }

    pub fn is_all(&self) -> bool {
        *self == Self::ALL
    }

    pub fn members(&self) -> Vec<Segment> {
        [Segment::Visual, Segment::Prompt, Segment::Generation]
            .into_iter()
            .filter(|s| self.contains(*s))
            .collect()
    }

    /// Short label used in sweep directory names.
    pub fn label(&self) -> String {
        if self.is_all() {
            "all".to_string()
        } else if self.members().is_empty() {
            "none".to_string()
        } else {
            self.members()
                .iter()
                .map(|s| &s.name()[..3])
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

impl Default for SegmentSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SegmentSetRepr {
    Keyword(String),
    List(Vec<Segment>),
}

impl Serialize for SegmentSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_all() {
            SegmentSetRepr::Keyword("all".into()).serialize(s)
        } else {
            SegmentSetRepr::List(self.members()).serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for SegmentSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match SegmentSetRepr::deserialize(d)? {
            SegmentSetRepr::Keyword(k) if k == "all" => Ok(SegmentSet::ALL),
            SegmentSetRepr::Keyword(k) => Err(serde::de::Error::custom(format!(
                "unknown segment keyword `{k}`, expected \"all\" or a list"
            ))),
            SegmentSetRepr::List(list) => {
                let mut s = SegmentSet {
                    visual: false,
                    prompt: false,
                    generation: false,
                };
                for seg in list {
                    match seg {
                        Segment::Visual => s.visual = true,
                        Segment::Prompt => s.prompt = true,
                        Segment::Generation => s.generation = true,
                    }
                }
                Ok(s)
            }
        }
    }
}

/// Frequency-scaler configuration, serialized verbatim into run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RopeScalerSpec {
    pub kind: ScalerKind,
    /// Maximum extra scaling of the monotonic scaler.
    pub beta: f64,
    /// Gate sharpness.
    pub eta: f64,
    /// Gate center on the normalized frequency axis.
    pub tau0: f64,
    pub gate: GateKind,
    /// Context-extension factor for the NTK and YaRN baselines.
    pub ntk_factor: f64,
    /// Wavelength below which YaRN leaves a pair untouched.
    pub yarn_low: f64,
    /// Wavelength above which YaRN fully interpolates a pair.
    pub yarn_high: f64,
    pub segments: SegmentSet,
}

impl Default for RopeScalerSpec {
    fn default() -> Self {
        Self {
            kind: ScalerKind::Identity,
            beta: 0.01,
            eta: 8.0,
            tau0: 0.6,
            gate: GateKind::Sigmoid,
            ntk_factor: 2.0,
            yarn_low: 16.0,
            yarn_high: 512.0,
            segments: SegmentSet::ALL,
        }
    }
}

impl RopeScalerSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn monotonic(beta: f64, eta: f64, tau0: f64) -> Self {
        Self {
            kind: ScalerKind::Monotonic,
            beta,
            eta,
            tau0,
            ..Self::default()
        }
    }

    /// Field-level violations, each prefixed by its field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("beta: must be finite and >= 0, got {}", self.beta));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            v.push(format!("eta: must be finite and > 0, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.tau0) {
            v.push(format!("tau0: must lie in [0, 1], got {}", self.tau0));
        }
        if self.gate == GateKind::Power && self.tau0 == 0.0 {
            v.push("gate: power gate requires tau0 > 0".to_string());
        }
        if !(self.ntk_factor >= 1.0 && self.ntk_factor.is_finite()) {
            v.push(format!("ntk_factor: must be >= 1, got {}", self.ntk_factor));
        }
        if !(self.yarn_low > 0.0 && self.yarn_low < self.yarn_high && self.yarn_high.is_finite()) {
            v.push(format!(
                "yarn_low: must satisfy 0 < yarn_low < yarn_high, got {} / {}",
                self.yarn_low, self.yarn_high
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(first) => Err(Error::invalid(format!("rope scaler {first}"))),
        }
    }
}

/// `θᵢ = 10000^(−2i/d_head)` for `i < d_head/2`.
pub fn base_freqs(d_head: usize) -> Result<Vec<f64>> {
    if d_head < 2 || d_head % 2 != 0 {
        return Err(Error::invalid(format!("d_head must be even and >= 2, got {d_head}")));
    }
    Ok((0..d_head / 2)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / d_head as f64))
        .collect())
}

/// Monotone gate value in `[0, 1]`; every kind evaluates to exactly 0.5 at `τ₀`.
pub fn gate(tau: f64, spec: &RopeScalerSpec) -> Result<f64> {
    let x = tau - spec.tau0;
    let eta = spec.eta;
    let g = match spec.gate {
        GateKind::Sigmoid => 1.0 / (1.0 + (-eta * x).exp()),
        GateKind::Linear => (0.5 + eta * x / 4.0).clamp(0.0, 1.0),
        GateKind::Cosine => 0.5 * (1.0 + (eta * x / 2.0).clamp(-PI / 2.0, PI / 2.0).sin()),
        GateKind::Exponential => (0.5 * (eta * x).exp()).min(1.0),
        GateKind::Power => {
            if spec.tau0 <= 0.0 {
                return Err(Error::invalid("power gate requires tau0 > 0"));
            }
            (0.5 * (tau / spec.tau0).powf(eta)).min(1.0)
        }
    };
    Ok(g)
}

/// Base frequencies plus per-pair scale factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub d_head: usize,
    pub theta: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FrequencyTable {
    pub fn identity(d_head: usize) -> Result<Self> {
        let theta = base_freqs(d_head)?;
        let scale = vec![1.0; theta.len()];
        Ok(Self { d_head, theta, scale })
    }

    pub fn pairs(&self) -> usize {
        self.theta.len()
    }

    /// Rotation angle of pair `i` at position `m`.
    #[inline]
    pub fn angle(&self, i: usize, m: usize) -> f64 {
        m as f64 * self.theta[i] * self.scale[i]
    }

    /// Effective frequency `sᵢθᵢ`.
    pub fn effective(&self, i: usize) -> f64 {
        self.theta[i] * self.scale[i]
    }
}

/// Normalized frequency index `τᵢ = i / (d_head/2 − 1)`; zero when there is a single pair.
pub fn normalized_index(i: usize, pairs: usize) -> f64 {
    if pairs <= 1 {
        0.0
    } else {
        i as f64 / (pairs - 1) as f64
    }
}

/// Build the frequency table of `spec` for a head dimension.
pub fn scale_factors(d_head: usize, spec: &RopeScalerSpec) -> Result<FrequencyTable> {
    spec.validate()?;
    let mut table = FrequencyTable::identity(d_head)?;
    let pairs = table.pairs();
    match spec.kind {
        ScalerKind::Identity => {}
        ScalerKind::Monotonic => {
            for i in 0..pairs {
                table.scale[i] = 1.0 + spec.beta * gate(normalized_index(i, pairs), spec)?;
            }
        }
        ScalerKind::Ntk => {
            // θ′ᵢ = (b·κ^(d/(d−2)))^(−2i/d)  ⇒  sᵢ = κ^(−2i/(d−2))
            let d = d_head as f64;
            let new_base = ROPE_BASE * spec.ntk_factor.powf(d / (d - 2.0).max(1.0));
            for i in 0..pairs {
                let theta_new = new_base.powf(-((2 * i) as f64) / d);
                table.scale[i] = theta_new / table.theta[i];
            }
        }
        ScalerKind::Yarn => {
            for i in 0..pairs {
                let wavelength = 2.0 * PI / table.theta[i];
                let ramp = ((wavelength - spec.yarn_low) / (spec.yarn_high - spec.yarn_low))
                    .clamp(0.0, 1.0);
                table.scale[i] = (1.0 - ramp) + ramp / spec.ntk_factor;
            }
        }
    }
    Ok(table)
}

#[inline]
fn rotate_pairs<T: Real>(v: &mut [T], cos: &[f64], sin: &[f64]) {
    for (i, (&c, &s)) in cos.iter().zip(sin).enumerate() {
        let x = v[2 * i].wide();
        let y = v[2 * i + 1].wide();
        v[2 * i] = T::cast(x * c - y * s);
        v[2 * i + 1] = T::cast(x * s + y * c);
    }
}

/// Rotate each pair `(v[2i], v[2i+1])` by `sᵢ·m·θᵢ`.
pub fn apply_rotary<T: Real>(v: &[T], m: usize, table: &FrequencyTable) -> Result<Vec<T>> {
    if v.len() != table.d_head {
        return Err(Error::invalid(format!(
            "rotary input length {} does not match d_head {}",
            v.len(),
            table.d_head
        )));
    }
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..table.pairs())
        .map(|i| {
            let a = table.angle(i, m);
            (a.cos(), a.sin())
        })
        .unzip();
    let mut out = v.to_vec();
    rotate_pairs(&mut out, &cos, &sin);
    Ok(out)
}

/// `⟨R_m q, R_n k⟩` under a shared table.
pub fn relative_score<T: Real>(q: &[T], k: &[T], m: usize, n: usize, table: &FrequencyTable) -> Result<f64> {
    let rq = apply_rotary(q, m, table)?;
    let rk = apply_rotary(k, n, table)?;
    Ok(crate::numkit::dot(&rq, &rk))
}

/// Precomputed rotations for every row of a sequence.
#[derive(Clone, Debug)]
pub struct RotaryPlan {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// Whether each row uses the scaled table.
    scaled: Vec<bool>,
    base: FrequencyTable,
    table: FrequencyTable,
    positions: Vec<usize>,
}

impl RotaryPlan {
    /// Rows at `positions`; a row uses the scaled table when `segments[row]`
    /// belongs to the spec's segment restriction.
    pub fn new(
        d_head: usize,
        spec: &RopeScalerSpec,
        positions: &[usize],
        segments: &[Segment],
    ) -> Result<Self> {
        if positions.len() != segments.len() {
            return Err(Error::invalid("rotary plan: positions and segments differ in length"));
        }
        let base = FrequencyTable::identity(d_head)?;
        let table = scale_factors(d_head, spec)?;
        let pairs = base.pairs();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        let mut scaled = Vec::with_capacity(positions.len());
        for (&m, &seg) in positions.iter().zip(segments) {
            let use_scaled = spec.segments.contains(seg);
            let t = if use_scaled { &table } else { &base };
            for i in 0..pairs {
                let a = t.angle(i, m);
                cos.push(a.cos());
                sin.push(a.sin());
            }
            scaled.push(use_scaled);
        }
        Ok(Self {
            pairs,
            cos,
            sin,
            scaled,
            base,
            table,
            positions: positions.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, row: usize) -> usize {
        self.positions[row]
    }

    /// Table applied to `row`.
    pub fn table_for(&self, row: usize) -> &FrequencyTable {
        if self.scaled[row] {
            &self.table
        } else {
            &self.base
        }
    }

    #[inline]
    pub fn rotate<T: Real>(&self, row: usize, v: &mut [T]) {
        let r = row * self.pairs..(row + 1) * self.pairs;
        rotate_pairs(v, &self.cos[r.clone()], &self.sin[r]);
    }

    /// Apply the transpose (inverse) rotation of `row`.
    #[inline]
    pub fn rotate_inverse<T: Real>(&self, row: usize, v: &mut [T]) {
        let r = row * self.pairs..(row + 1) * self.pairs;
        let neg: Vec<f64> = self.sin[r.clone()].iter().map(|s| -s).collect();
        rotate_pairs(v, &self.cos[r], &neg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_frequency_endpoints() {
        let t = base_freqs(4).unwrap();
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 0.01).abs() < 1e-15);
        assert!(base_freqs(3).is_err());
        assert!(base_freqs(0).is_err());
    }

    #[test]
    fn sigmoid_gate_at_default_profile() {
        let spec = RopeScalerSpec::monotonic(0.01, 8.0, 0.6);
        assert_eq!(gate(0.6, &spec).unwrap(), 0.5);
        // σ(3.2) = 1 / (1 + e^-3.2) = 0.960834...
        assert!((gate(1.0, &spec).unwrap() - 0.96083).abs() < 1e-4);
    }

    #[test]
    fn power_gate_rejects_zero_center() {
        let spec = RopeScalerSpec {
            gate: GateKind::Power,
            tau0: 0.0,
            ..RopeScalerSpec::monotonic(0.1, 8.0, 0.6)
        };
        assert!(gate(0.5, &spec).is_err());
        assert!(scale_factors(8, &spec).is_err());
    }

    #[test]
    fn zero_beta_matches_identity_table() {
        let mono = scale_factors(16, &RopeScalerSpec::monotonic(0.0, 8.0, 0.6)).unwrap();
        let id = scale_factors(16, &RopeScalerSpec::identity()).unwrap();
        assert_eq!(mono, id);
        for i in 0..8 {
            for m in [0, 7, 4095] {
                assert_eq!(mono.angle(i, m).to_bits(), id.angle(i, m).to_bits());
            }
        }
    }

    #[test]
    fn rotation_by_one_radian() {
        let table = FrequencyTable::identity(2).unwrap();
        let r = apply_rotary(&[1.0f64, 0.0], 1, &table).unwrap();
        assert!((r[0] - 0.5403).abs() < 1e-4);
        assert!((r[1] - 0.8415).abs() < 1e-4);
        assert_eq!(apply_rotary(&[0.3f64, -0.7], 0, &table).unwrap(), vec![0.3, -0.7]);
        assert!(apply_rotary(&[1.0f64, 0.0, 0.0], 1, &table).is_err());
    }

    #[test]
    fn relative_score_manual_case() {
        let table = FrequencyTable::identity(2).unwrap();
        let s = relative_score(&[1.0f64, 0.0], &[1.0, 0.0], 0, 1, &table).unwrap();
        assert!((s - 1f64.cos()).abs() < 1e-12);
        let q = [0.2f64, 0.5, -1.0, 2.0];
        let k = [1.0f64, -0.3, 0.4, 0.1];
        let t4 = FrequencyTable::identity(4).unwrap();
        let same = relative_score(&q, &k, 9, 9, &t4).unwrap();
        assert!((same - crate::numkit::dot(&q, &k)).abs() < 1e-12);
    }

    #[test]
    fn ntk_and_yarn_tables() {
        let spec = RopeScalerSpec {
            kind: ScalerKind::Ntk,
            ntk_factor: 4.0,
            ..RopeScalerSpec::default()
        };
        let t = scale_factors(8, &spec).unwrap();
        assert_eq!(t.scale[0], 1.0);
        // last pair: θ′ = (b κ^(d/(d-2)))^(-(d-2)/d) = b^(-(d-2)/d) / κ
        assert!((t.effective(3) - base_freqs(8).unwrap()[3] / 4.0).abs() < 1e-15);

        let spec = RopeScalerSpec {
            kind: ScalerKind::Yarn,
            ntk_factor: 4.0,
            yarn_low: 10.0,
            yarn_high: 1000.0,
            ..RopeScalerSpec::default()
        };
        let t = scale_factors(8, &spec).unwrap();
        assert_eq!(t.scale[0], 1.0); // wavelength 2π < 10
        assert_eq!(t.scale[3], 0.25); // wavelength ≈ 6283 > 1000
        assert!(t.scale[1] < 1.0 && t.scale[1] > 0.25);
    }

    #[test]
    fn segment_set_serde() {
        let all: SegmentSet = serde_json::from_str("\"all\"").unwrap();
        assert!(all.is_all());
        let vis: SegmentSet = serde_json::from_str("[\"visual\"]").unwrap();
        assert_eq!(vis, SegmentSet::only(Segment::Visual));
        assert_eq!(serde_json::to_string(&vis).unwrap(), "[\"visual\"]");
        assert!(serde_json::from_str::<SegmentSet>("\"some\"").is_err());
    }

    #[test]
    fn spec_field_names_round_trip() {
        let spec = RopeScalerSpec::monotonic(0.01, 12.0, 0.6);
        let json = serde_json::to_value(&spec).unwrap();
        for key in [
            "kind", "beta", "eta", "tau0", "gate", "ntk_factor", "yarn_low", "yarn_high", "segments",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back: RopeScalerSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn plan_inverse_undoes_rotation() {
        let spec = RopeScalerSpec::monotonic(0.5, 8.0, 0.6);
        let plan = RotaryPlan::new(8, &spec, &[0, 5, 40], &[Segment::Visual; 3]).unwrap();
        let v = [0.1f64, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let mut w = v;
        plan.rotate(2, &mut w);
        plan.rotate_inverse(2, &mut w);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
