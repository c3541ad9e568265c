//! Attention aggregation by relative distance and by target class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeTrace;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rope::Segment;

/// Segment of a position at a given step, with generation split by state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Visual,
    Prompt,
    Mask,
    Committed,
}

impl TokenClass {
    pub const ALL: [TokenClass; 4] = [TokenClass::Visual, TokenClass::Prompt, TokenClass::Mask, TokenClass::Committed];

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Visual => "visual",
            TokenClass::Prompt => "prompt",
            TokenClass::Mask => "mask",
            TokenClass::Committed => "committed",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, TokenClass::Mask | TokenClass::Committed)
    }

    pub fn segment(self) -> Segment {
        match self {
            TokenClass::Visual => Segment::Visual,
            TokenClass::Prompt => Segment::Prompt,
            _ => Segment::Generation,
        }
    }
}

/// One post-softmax attention weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub source: usize,
    pub source_class: TokenClass,
    pub target: usize,
    pub target_class: TokenClass,
    pub weight: f64,
}

impl AttentionRecord {
    pub fn distance(&self) -> usize {
        self.source.abs_diff(self.target)
    }
}

/// Class of every absolute position for a step's starting state.
pub fn classes_at(trace: &DecodeTrace, step: usize, mask_id: u32) -> Vec<TokenClass> {
    let layout = &trace.layout;
    let gen = &trace.steps[step - 1].tokens_before;
    let mut v = vec![TokenClass::Visual; layout.visual.len()];
    v.extend(std::iter::repeat_n(TokenClass::Prompt, layout.prompt.len()));
    v.extend(gen.iter().map(|&t| {
        if t == mask_id {
            TokenClass::Mask
        } else {
            TokenClass::Committed
        }
    }));
    v
}

/// Records of one `[layer][head]` attention stack.
pub fn records_from_matrices<'a>(
    step: usize,
    attention: &'a [Vec<Matrix<f32>>],
    classes: &'a [TokenClass],
) -> impl Iterator<Item = AttentionRecord> + 'a {
    attention.iter().enumerate().flat_map(move |(li, heads)| {
        heads.iter().enumerate().flat_map(move |(h, m)| {
            (0..m.rows()).flat_map(move |i| {
                m.row(i).iter().enumerate().map(move |(j, &w)| AttentionRecord {
                    step,
                    layer: li + 1,
                    head: h,
                    source: i,
                    source_class: classes[i],
                    target: j,
                    target_class: classes[j],
                    weight: w as f64,
                })
            })
        })
    })
}

/// Every record of a trace decoded with attention recording.
pub fn attention_records(trace: &DecodeTrace, mask_id: u32) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for rec in &trace.steps {
        let att = rec
            .attention
            .as_ref()
            .ok_or_else(|| Error::invalid("trace was decoded without attention recording"))?;
        let classes = classes_at(trace, rec.step, mask_id);
        out.extend(records_from_matrices(rec.step, att, &classes));
    }
    Ok(out)
}

/// Distance bins: unit width below 32, then doubling `[32,64)`, `[64,128)`, …
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBins {
    /// Lower edges; bin `b` covers `edges[b]..edges[b+1]`.
    edges: Vec<usize>,
}

impl DistanceBins {
    pub const UNIT_LIMIT: usize = 32;

    /// Bins covering `0..=max_distance` without gaps.
    pub fn covering(max_distance: usize) -> Self {
        let mut edges = Vec::new();
        let mut e = 0;
        while e <= max_distance {
            edges.push(e);
            e = if e < Self::UNIT_LIMIT { e + 1 } else { e * 2 };
        }
        edges.push(e);
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[lo, hi)` of bin `b`.
    pub fn bounds(&self, b: usize) -> (usize, usize) {
        (self.edges[b], self.edges[b + 1])
    }

    pub fn bin_of(&self, distance: usize) -> Option<usize> {
        if distance >= *self.edges.last()? {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= distance) - 1)
    }

    pub fn label(&self, b: usize) -> String {
        let (lo, hi) = self.bounds(b);
        if hi == lo + 1 {
            lo.to_string()
        } else {
            format!("{lo}-{}", hi - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceRow {
    pub bin: usize,
    pub label: String,
    pub src: TokenClass,
    pub tgt: TokenClass,
    pub mean: f64,
    pub count: usize,
}

/// Mean weight per (distance bin, source class, target class). Every
/// combination is emitted; empty cells have count 0 and mean 0.
pub fn attention_by_distance<'a>(
    records: impl IntoIterator<Item = &'a AttentionRecord>,
    bins: &DistanceBins,
) -> Result<Vec<DistanceRow>> {
    let nc = TokenClass::ALL.len();
    let mut sums = vec![0.0f64; bins.len() * nc * nc];
    let mut counts = vec![0usize; bins.len() * nc * nc];
    let mut any = false;
    for r in records {
        any = true;
        let b = bins
            .bin_of(r.distance())
            .ok_or_else(|| Error::invalid(format!("distance {} outside the bins", r.distance())))?;
        let idx = (b * nc + r.source_class as usize) * nc + r.target_class as usize;
        sums[idx] += r.weight;
        counts[idx] += 1;
    }
    if !any {
        return Err(Error::invalid("no attention records"));
    }
    let mut rows = Vec::with_capacity(sums.len());
    for b in 0..bins.len() {
        for &src in &TokenClass::ALL {
            for &tgt in &TokenClass::ALL {
                let idx = (b * nc + src as usize) * nc + tgt as usize;
                let c = counts[idx];
                rows.push(DistanceRow {
                    bin: b,
                    label: bins.label(b),
                    src,
                    tgt,
                    mean: if c == 0 { 0.0 } else { sums[idx] / c as f64 },
                    count: c,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MassRow {
    pub step: usize,
    pub tgt: TokenClass,
    pub mean_mass: f64,
}

/// Per step: for each generation source row, sum weights by target class,
/// then average over sources, layers and heads.
pub fn attention_mass_per_step<'a>(records: impl IntoIterator<Item = &'a AttentionRecord>) -> Vec<MassRow> {
    // (step, layer, head, source) -> per-class sums
    let mut per_source: BTreeMap<(usize, usize, usize, usize), [f64; 4]> = BTreeMap::new();
    for r in records {
        if !r.source_class.is_generation() {
            continue;
        }
        per_source.entry((r.step, r.layer, r.head, r.source)).or_insert([0.0; 4])[r.target_class as usize] += r.weight;
    }
    let mut per_step: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for ((step, ..), sums) in per_source {
        let e = per_step.entry(step).or_insert(([0.0; 4], 0));
        for (a, s) in e.0.iter_mut().zip(sums) {
            *a += s;
        }
        e.1 += 1;
    }
    let mut rows = Vec::new();
    for (step, (sums, n)) in per_step {
        for &tgt in &TokenClass::ALL {
            rows.push(MassRow {
                step,
                tgt,
                mean_mass: sums[tgt as usize] / n as f64,
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeRow {
    pub bin: usize,
    pub label: String,
    pub src: TokenClass,
    pub tgt: TokenClass,
    /// `None` when the baseline mean is below `1e-9`.
    pub relative_change: Option<f64>,
}

/// `(intervened − baseline) / baseline` on matched cells.
pub fn relative_attention_change(baseline: &[DistanceRow], intervened: &[DistanceRow]) -> Result<Vec<ChangeRow>> {
    if baseline.len() != intervened.len() {
        return Err(Error::invalid("attention tables have different shapes"));
    }
    baseline
        .iter()
        .zip(intervened)
        .map(|(b, i)| {
            if (b.bin, b.src, b.tgt) != (i.bin, i.src, i.tgt) {
                return Err(Error::invalid("attention tables are not aligned"));
            }
            Ok(ChangeRow {
                bin: b.bin,
                label: b.label.clone(),
                src: b.src,
                tgt: b.tgt,
                relative_change: (b.mean >= 1e-9).then(|| (i.mean - b.mean) / b.mean),
            })
        })
        .collect()
}

/// Smallest distance in the farthest tercile of `max_distance`.
pub fn far_tercile_start(max_distance: usize) -> usize {
    (2 * max_distance).div_ceil(3)
}

/// Mean weight from generation sources to targets of `tgt` class over the
/// farthest tercile of generation→`tgt` distances present in the records.
pub fn far_tercile_mean(records: &[AttentionRecord], tgt: TokenClass) -> Option<f64> {
    let sel = |r: &&AttentionRecord| r.source_class.is_generation() && r.target_class == tgt;
    let max_d = records.iter().filter(sel).map(|r| r.distance()).max()?;
    let start = far_tercile_start(max_d);
    let (s, n) = records
        .iter()
        .filter(sel)
        .filter(|r| r.distance() >= start)
        .fold((0.0, 0usize), |(s, n), r| (s + r.weight, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean weight from generation sources to targets of `tgt` class, all distances.
pub fn class_mean(records: &[AttentionRecord], tgt: TokenClass) -> Option<f64> {
    let (s, n) = records
        .iter()
        .filter(|r| r.source_class.is_generation() && r.target_class == tgt)
        .fold((0.0, 0usize), |(s, n), r| (s + r.weight, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_without_gaps() {
        let b = DistanceBins::covering(43);
        assert_eq!(b.len(), 33);
        assert_eq!(b.bounds(32), (32, 64));
        assert_eq!(b.label(32), "32-63");
        assert_eq!(b.label(5), "5");
        for d in 0..=43 {
            let i = b.bin_of(d).unwrap();
            let (lo, hi) = b.bounds(i);
            assert!(lo <= d && d < hi);
        }
        let big = DistanceBins::covering(200);
        assert_eq!(big.bounds(big.len() - 1), (128, 256));
    }

    #[test]
    fn far_tercile_boundary() {
        assert_eq!(far_tercile_start(43), 29);
        assert_eq!(far_tercile_start(3), 2);
    }
}
