use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mdlab::analysis::attention::{attention_by_distance, attention_mass_per_step, relative_attention_change};
use mdlab::analysis::bands::{band_table, BandQuantity, BandRow};
use mdlab::analysis::drift::{drift_trace, random_token_baseline, DriftRecord};
use mdlab::analysis::pca_trajectory;
use mdlab::container::Container;
use mdlab::decode::DecodeTrace;
use mdlab::model::Model;
use mdlab::prior::PriorSubspace;
use mdlab::rope::ScalerKind;
use mdlab::trainer::{log_csv, train};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::eval;
use crate::manifest::{sha256_hex, RunDir};
use crate::pipeline::{self, Setup};

pub const CHECKPOINT: &str = "checkpoint.mdlb";
pub const SUBSPACE: &str = "subspace.mdlb";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Subspace,
    Decode,
    Analyze,
    Ablate,
    Report,
    Timing,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Subspace => "subspace",
            Command::Decode => "decode",
            Command::Analyze => "analyze",
            Command::Ablate => "ablate",
            Command::Report => "report",
            Command::Timing => "timing",
        }
    }
}

pub fn run(cmd: Command, config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut dir = RunDir::create(out, cmd.name(), config)?;
    match cmd {
        Command::Train => cmd_train(config, &mut dir)?,
        Command::Subspace => cmd_subspace(config, &mut dir)?,
        Command::Decode => {
            cmd_decode(config, &mut dir)?;
        }
        Command::Analyze => cmd_analyze(config, &mut dir)?,
        Command::Ablate => cmd_ablate(config, &mut dir)?,
        Command::Report => cmd_report(config, &mut dir)?,
        Command::Timing => cmd_timing(config, &mut dir)?,
    }
    dir.finish()?;
    Ok(())
}

/// Config snapshot stored inside artifacts. Paths are dropped so the bytes
/// do not depend on where the command ran.
fn config_text(c: &RunConfig) -> String {
    let mut c = c.clone();
    c.paths = Default::default();
    serde_json::to_string(&c).expect("config serializes")
}

fn cmd_train(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let corpus = pipeline::corpus(c)?;
    let total = c.train.total_steps;
    let outcome = dir.time("train", || {
        train(&c.model, &corpus, &c.train, |r| {
            if (r.step + 1) % 100 == 0 || r.step + 1 == total {
                eprintln!("step {:>5}/{total}  loss {:.4}  grad_norm {:.3}", r.step + 1, r.loss, r.grad_norm);
            }
        })
    })?;
    let bytes = outcome.model.to_container(config_text(c)).to_bytes();
    dir.write(CHECKPOINT, &bytes)?;
    dir.write("train_log.csv", log_csv(&outcome.log).as_bytes())?;
    eprintln!("final loss (mean of last 100 steps): {:.4}", outcome.final_loss(100));
    Ok(())
}

fn load_checkpoint(c: &RunConfig, dir: &mut RunDir) -> Result<Model, CliError> {
    let path = pipeline::checkpoint_path(c)?;
    let model = pipeline::load_model(path)?;
    dir.record_input(path)?;
    if model.spec != c.model {
        return Err(CliError::Config(format!(
            "model: checkpoint {} was trained with a different model spec",
            path.display()
        )));
    }
    Ok(model)
}

fn subspace_for(c: &RunConfig, model: &Model, dir: &mut RunDir) -> Result<PriorSubspace, CliError> {
    if let Some(p) = &c.paths.subspace {
        dir.record_input(p)?;
    }
    dir.time("subspace", || pipeline::load_or_fit_subspace(c, model))
}

fn cmd_subspace(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let model = load_checkpoint(c, dir)?;
    let sub = dir.time("subspace", || pipeline::fit_subspace(c, &model, &c.suppression.prior))?;
    let text = serde_json::json!({
        "prior": c.suppression.prior,
        "k": c.suppression.k,
        "placement": c.suppression.placement,
    })
    .to_string();
    dir.write(SUBSPACE, &sub.to_container(text).to_bytes())?;
    eprintln!(
        "prior subspace: k = {}, eigenvalues {:?}{}",
        sub.k(),
        sub.eigenvalues,
        if sub.rank_deficient { " (rank deficient)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct SceneLine<'a> {
    scene: usize,
    tokens: &'a [u32],
}

fn trace_jsonl(traces: &[DecodeTrace]) -> String {
    let mut s = String::new();
    for (i, t) in traces.iter().enumerate() {
        s.push_str(&serde_json::to_string(&SceneLine { scene: i, tokens: &t.tokens }).expect("serializes"));
        s.push('\n');
        s.push_str(&t.to_jsonl());
    }
    s
}

fn outputs_text(c: &RunConfig, traces: &[DecodeTrace]) -> String {
    use mdlab::trainer::corpus::token_name;
    traces
        .iter()
        .map(|t| {
            let words: Vec<String> = t.tokens.iter().map(|&i| token_name(i, &c.model)).collect();
            words.join(" ") + "\n"
        })
        .collect()
}

/// Decode the evaluation scenes with the configured interventions and write
/// the trace, decoded text and metrics.
fn cmd_decode(c: &RunConfig, dir: &mut RunDir) -> Result<(Model, Option<PriorSubspace>, Vec<DecodeTrace>, Setup), CliError> {
    let model = load_checkpoint(c, dir)?;
    let sub = if c.suppression.enabled {
        Some(subspace_for(c, &model, dir)?)
    } else {
        None
    };
    let setup = Setup::from_config(c, sub.as_ref());
    let corpus = pipeline::corpus(c)?;
    let scenes = pipeline::scenes(c, &corpus);
    let traces = dir.time("decode", || pipeline::decode_scenes(&model, &scenes, &c.decode, &setup))?;
    dir.write("trace.jsonl", trace_jsonl(&traces).as_bytes())?;
    dir.write("outputs.txt", outputs_text(c, &traces).as_bytes())?;
    let row = pipeline::metrics_row("decode", &traces, c, &setup);
    dir.write("metrics.csv", &pipeline::csv_bytes(&[row])?)?;
    Ok((model, sub, traces, setup))
}

#[derive(Serialize)]
struct DistanceCsv {
    distance_bin: String,
    src_segment: &'static str,
    tgt_segment: &'static str,
    mean_attention: f64,
    count: usize,
}

#[derive(Serialize)]
struct ChangeCsv {
    distance_bin: String,
    src_segment: &'static str,
    tgt_segment: &'static str,
    relative_change: Option<f64>,
}

#[derive(Serialize)]
struct MassCsv {
    step: usize,
    tgt_class: &'static str,
    mean_mass: f64,
}

#[derive(Serialize)]
struct DriftCsv {
    step: usize,
    position: usize,
    c_subspace: f64,
    c_raw_embed: f64,
    c_raw_final: f64,
}

#[derive(Serialize)]
struct PcaCsv {
    layer: usize,
    source: &'static str,
    pc1: f64,
    pc2: f64,
    pc3: f64,
}

#[derive(Serialize)]
struct BandCsv {
    distance_bin: String,
    band: usize,
    mean_logit_contribution: f64,
}

/// Mean of each cosine per (step, position) over scenes.
fn drift_rows(records: &[Vec<DriftRecord>]) -> Vec<DriftCsv> {
    let mut acc: BTreeMap<(usize, usize), ([f64; 3], usize)> = BTreeMap::new();
    for r in records.iter().flatten() {
        let e = acc.entry((r.step, r.position)).or_default();
        e.0[0] += r.c_subspace;
        e.0[1] += r.c_raw_embed;
        e.0[2] += r.c_raw_final;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((step, position), (s, n))| DriftCsv {
            step,
            position,
            c_subspace: s[0] / n as f64,
            c_raw_embed: s[1] / n as f64,
            c_raw_final: s[2] / n as f64,
        })
        .collect()
}

fn merge_bands(tables: &[Vec<BandRow>]) -> Vec<BandCsv> {
    let Some(first) = tables.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let (mut s, mut n) = (0.0, 0usize);
            for t in tables {
                s += t[i].mean * t[i].count as f64;
                n += t[i].count;
            }
            BandCsv {
                distance_bin: first[i].label.clone(),
                band: first[i].band,
                mean_logit_contribution: if n == 0 { 0.0 } else { s / n as f64 },
            }
        })
        .collect()
}

const DISTANCE_HEADER: [&str; 5] = ["distance_bin", "src_segment", "tgt_segment", "mean_attention", "count"];
const CHANGE_HEADER: [&str; 4] = ["distance_bin", "src_segment", "tgt_segment", "relative_change"];
const MASS_HEADER: [&str; 3] = ["step", "tgt_class", "mean_mass"];
const DRIFT_HEADER: [&str; 5] = ["step", "position", "c_subspace", "c_raw_embed", "c_raw_final"];
const PCA_HEADER: [&str; 5] = ["layer", "source", "pc1", "pc2", "pc3"];
const BAND_HEADER: [&str; 3] = ["distance_bin", "band", "mean_logit_contribution"];

fn cmd_analyze(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let (model, sub, traces, setup) = cmd_decode(c, dir)?;
    let sub = match sub {
        Some(s) => s,
        None => subspace_for(c, &model, dir)?,
    };
    let bins = pipeline::bins_for(c);
    let att_traces = &traces[..c.analysis.attention_scenes];

    let (distance, mass, change) = dir.time("attention", || -> Result<_, CliError> {
        let per_scene: Vec<(Vec<_>, Vec<_>, Option<Vec<_>>)> = att_traces
            .par_iter()
            .map(|tr| {
                let recs = pipeline::attention_records(&model, tr, &setup)?;
                let dist = attention_by_distance(&recs, &bins)?;
                let mass = attention_mass_per_step(&recs);
                let base = if setup.is_baseline() {
                    None
                } else {
                    let b = pipeline::attention_records(&model, tr, &Setup::baseline())?;
                    Some(attention_by_distance(&b, &bins)?)
                };
                Ok((dist, mass, base))
            })
            .collect::<Result<_, CliError>>()?;
        let dist: Vec<_> = per_scene.iter().map(|p| p.0.clone()).collect();
        let mass: Vec<_> = per_scene.iter().map(|p| p.1.clone()).collect();
        let dist = pipeline::merge_distance_tables(&dist);
        let change = if setup.is_baseline() {
            None
        } else {
            let base: Vec<_> = per_scene.iter().map(|p| p.2.clone().expect("baseline table")).collect();
            Some(relative_attention_change(&pipeline::merge_distance_tables(&base), &dist)?)
        };
        Ok((dist, pipeline::merge_mass_tables(&mass), change))
    })?;
    let rows: Vec<DistanceCsv> = distance
        .iter()
        .map(|r| DistanceCsv {
            distance_bin: r.label.clone(),
            src_segment: r.src.name(),
            tgt_segment: r.tgt.name(),
            mean_attention: r.mean,
            count: r.count,
        })
        .collect();
    dir.write("attn_distance.csv", &pipeline::csv_with_header(&DISTANCE_HEADER, &rows)?)?;
    let rows: Vec<MassCsv> = mass
        .iter()
        .map(|r| MassCsv {
            step: r.step,
            tgt_class: r.tgt.name(),
            mean_mass: r.mean_mass,
        })
        .collect();
    dir.write("attn_mass.csv", &pipeline::csv_with_header(&MASS_HEADER, &rows)?)?;
    if let Some(change) = change {
        let rows: Vec<ChangeCsv> = change
            .iter()
            .map(|r| ChangeCsv {
                distance_bin: r.label.clone(),
                src_segment: r.src.name(),
                tgt_segment: r.tgt.name(),
                relative_change: r.relative_change,
            })
            .collect();
        dir.write("attn_change.csv", &pipeline::csv_with_header(&CHANGE_HEADER, &rows)?)?;
    }

    let (drift, baseline) = dir.time("drift", || -> Result<_, CliError> {
        let pairs: Vec<(Vec<DriftRecord>, Vec<DriftRecord>)> = traces
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let seed = c.analysis.baseline_seed.wrapping_add(i as u64);
                Ok((
                    drift_trace(tr, &sub)?,
                    random_token_baseline(tr, &sub, &model, setup.interventions(), seed)?,
                ))
            })
            .collect::<Result<_, mdlab::Error>>()?;
        let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Ok((drift_rows(&a), drift_rows(&b)))
    })?;
    dir.write("drift.csv", &pipeline::csv_with_header(&DRIFT_HEADER, &drift)?)?;
    dir.write("drift_baseline.csv", &pipeline::csv_with_header(&DRIFT_HEADER, &baseline)?)?;

    let traj = dir.time("pca", || pca_trajectory(&model, &c.scaler, &sub.prior_embedding))?;
    let rows: Vec<PcaCsv> = traj
        .rows
        .iter()
        .map(|r| PcaCsv {
            layer: r.layer,
            source: r.source,
            pc1: r.coords[0],
            pc2: r.coords[1],
            pc3: r.coords[2],
        })
        .collect();
    dir.write("pca_traj.csv", &pipeline::csv_with_header(&PCA_HEADER, &rows)?)?;

    let bands = dir.time("bands", || -> Result<_, CliError> {
        let tables: Vec<Vec<BandRow>> = att_traces
            .par_iter()
            .map(|tr| {
                band_table(
                    tr,
                    &model,
                    setup.interventions(),
                    c.analysis.n_bands,
                    &bins,
                    None,
                    BandQuantity::LogitContribution,
                )
            })
            .collect::<Result<_, mdlab::Error>>()?;
        Ok(merge_bands(&tables))
    })?;
    dir.write("freq_bands.csv", &pipeline::csv_with_header(&BAND_HEADER, &bands)?)?;
    Ok(())
}

/// One grid point of `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

/// Stable per-cell seed: the first eight bytes of SHA-256 over the run seed
/// and the cell coordinates.
pub fn cell_seed(seed: u64, coords: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}|{coords}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn fmt_num(x: f64) -> String {
    format!("{x}").replace('.', "p")
}

/// Cartesian product of the ablation axes; empty axes contribute the
/// configured value only.
pub fn grid(c: &RunConfig) -> Vec<Cell> {
    let ab = &c.analysis.ablate;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let steps = or(&ab.steps, c.decode.steps);
    let lambdas: Vec<Option<f64>> = if ab.lambda.is_empty() {
        vec![None]
    } else {
        ab.lambda.iter().copied().map(Some).collect()
    };
    let betas: Vec<Option<f64>> = if ab.beta.is_empty() {
        vec![None]
    } else {
        ab.beta.iter().copied().map(Some).collect()
    };
    let priors = if ab.prior.is_empty() {
        vec![c.suppression.prior.clone()]
    } else {
        ab.prior.clone()
    };
    let gates = if ab.gate.is_empty() { vec![c.scaler.gate] } else { ab.gate.clone() };
    let segs = if ab.segments.is_empty() {
        vec![c.scaler.segments]
    } else {
        ab.segments.clone()
    };

    let mut cells = Vec::new();
    for &t in &steps {
        for &lam in &lambdas {
            for &beta in &betas {
                for prior in &priors {
                    for &gate in &gates {
                        for &seg in &segs {
                            let mut cfg = c.clone();
                            cfg.decode.steps = t;
                            if let Some(l) = lam {
                                cfg.suppression.enabled = true;
                                cfg.suppression.lambda = l;
                            }
                            if let Some(b) = beta {
                                cfg.scaler.beta = b;
                            }
                            cfg.suppression.prior = prior.clone();
                            cfg.scaler.gate = gate;
                            cfg.scaler.segments = seg;
                            let lam_v = if cfg.suppression.enabled { cfg.suppression.lambda } else { 0.0 };
                            let beta_v = if cfg.scaler.kind == ScalerKind::Monotonic { cfg.scaler.beta } else { 0.0 };
                            let name = format!(
                                "T{t}_lam{}_beta{}_{}_{}_{}",
                                fmt_num(lam_v),
                                fmt_num(beta_v),
                                prior.label(),
                                gate.name(),
                                seg.label()
                            );
                            cfg.decode.seed = cell_seed(c.seed, &name);
                            cfg.analysis.ablate = Default::default();
                            cells.push(Cell { name, config: cfg });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn cmd_ablate(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let model = load_checkpoint(c, dir)?;
    if let Some(p) = &c.paths.subspace {
        dir.record_input(p)?;
    }
    let cells = grid(c);
    let corpus = pipeline::corpus(c)?;
    let scenes = pipeline::scenes(c, &corpus);
    // One subspace per prior source.
    let mut subs: BTreeMap<String, PriorSubspace> = BTreeMap::new();
    for cell in &cells {
        let key = cell.config.suppression.prior.label();
        if cell.config.suppression.enabled && !subs.contains_key(&key) {
            let sub = if cell.config.suppression.prior == c.suppression.prior {
                pipeline::load_or_fit_subspace(c, &model)?
            } else {
                pipeline::fit_subspace(c, &model, &cell.config.suppression.prior)?
            };
            subs.insert(key, sub);
        }
    }
    let root = dir.root.clone();
    let results: Vec<(String, Vec<u8>)> = dir.time("cells", || {
        cells
            .par_iter()
            .map(|cell| -> Result<(String, Vec<u8>), CliError> {
                let cfg = &cell.config;
                let sub = subs.get(&cfg.suppression.prior.label());
                let setup = Setup::from_config(cfg, sub);
                let traces = pipeline::decode_scenes(&model, &scenes, &cfg.decode, &setup)?;
                let row = pipeline::metrics_row(&cell.name, &traces, cfg, &setup);
                let mut cell_dir = RunDir::create(&root.join(&cell.name), "ablate-cell", cfg)?;
                let metrics = pipeline::csv_bytes(&[row])?;
                cell_dir.write("metrics.csv", &metrics)?;
                cell_dir.write("trace.jsonl", trace_jsonl(&traces).as_bytes())?;
                cell_dir.finish()?;
                Ok((cell.name.clone(), metrics))
            })
            .collect::<Result<_, CliError>>()
    })?;
    for (name, _) in &results {
        for f in ["metrics.csv", "trace.jsonl", "manifest.json"] {
            dir.adopt(&format!("{name}/{f}"))?;
        }
    }
    let index: Vec<&String> = results.iter().map(|(n, _)| n).collect();
    dir.write("cells.json", serde_json::to_string_pretty(&index).expect("serializes").as_bytes())?;
    eprintln!("ablate: {} cells", results.len());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub steps: usize,
    pub gen_len: usize,
    pub lambda: f64,
    pub beta: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub distinct3: f64,
    pub repetition_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsRow {
    pub steps: usize,
    pub cells: usize,
    pub distinct1: f64,
    pub distinct2: f64,
    pub distinct3: f64,
    pub repetition_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<MetricsRecord>,
    /// Cell means grouped by step count, most steps first.
    pub by_steps: Vec<StepsRow>,
    /// distinct-2 strictly decreases as the step count falls.
    pub distinct2_decreases_with_fewer_steps: bool,
    /// Repetition strictly increases as the step count falls.
    pub repetition_increases_with_fewer_steps: bool,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    r.deserialize().map(|x| x.map_err(CliError::from)).collect()
}

pub fn build_report(ablate_dir: &Path) -> Result<Report, CliError> {
    let index = ablate_dir.join("cells.json");
    let text = fs::read_to_string(&index).map_err(|_| CliError::MissingArtifact(index.display().to_string()))?;
    let names: Vec<String> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", index.display())))?;
    let mut cells = Vec::new();
    for n in &names {
        cells.extend(read_metrics(&ablate_dir.join(n).join("metrics.csv"))?);
    }
    let mut groups: BTreeMap<std::cmp::Reverse<usize>, Vec<&MetricsRecord>> = BTreeMap::new();
    for m in &cells {
        groups.entry(std::cmp::Reverse(m.steps)).or_default().push(m);
    }
    let by_steps: Vec<StepsRow> = groups
        .into_iter()
        .map(|(std::cmp::Reverse(steps), ms)| {
            let mean = |f: fn(&MetricsRecord) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64;
            StepsRow {
                steps,
                cells: ms.len(),
                distinct1: mean(|m| m.distinct1),
                distinct2: mean(|m| m.distinct2),
                distinct3: mean(|m| m.distinct3),
                repetition_ratio: mean(|m| m.repetition_ratio),
            }
        })
        .collect();
    let d2_dec = by_steps.windows(2).all(|w| w[1].distinct2 < w[0].distinct2);
    let rep_inc = by_steps.windows(2).all(|w| w[1].repetition_ratio > w[0].repetition_ratio);
    Ok(Report {
        cells,
        by_steps,
        distinct2_decreases_with_fewer_steps: d2_dec,
        repetition_increases_with_fewer_steps: rep_inc,
    })
}

fn cmd_report(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let src: PathBuf = c.paths.ablate_dir.clone().unwrap_or_else(|| dir.root.clone());
    let report = build_report(&src)?;
    for r in &report.by_steps {
        eprintln!(
            "T={:>3}  distinct2 {:.4}  repetition {:.4}  ({} cells)",
            r.steps, r.distinct2, r.repetition_ratio, r.cells
        );
    }
    dir.write("report.json", serde_json::to_string_pretty(&report).expect("serializes").as_bytes())?;
    Ok(())
}

fn cmd_timing(c: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let model = load_checkpoint(c, dir)?;
    let sub = subspace_for(c, &model, dir)?;
    let mut cfg = c.clone();
    cfg.suppression.enabled = true;
    let setup = Setup::from_config(&cfg, Some(&sub));
    let corpus = pipeline::corpus(c)?;
    let scenes = pipeline::scenes(c, &corpus);
    let t = dir.time("timing", || eval::timing(&model, &scenes, &c.decode, &setup, c.analysis.timing_repeats))?;
    eprintln!(
        "per step: baseline {:.3} ms, intervened {:.3} ms, overhead {:+.1}%",
        t.baseline_step_seconds * 1e3,
        t.intervened_step_seconds * 1e3,
        t.overhead * 100.0
    );
    dir.write("timing.json", serde_json::to_string_pretty(&t).expect("serializes").as_bytes())?;
    Ok(())
}

/// Load a subspace sidecar written by `subspace`.
pub fn load_subspace(path: &Path, c: &RunConfig) -> Result<PriorSubspace, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.display().to_string()));
    }
    Ok(PriorSubspace::from_container(&Container::load(path)?, c.suppression.prior.clone())?)
}
