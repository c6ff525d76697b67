//! Masking-ratio sweeps and the normalized improvement metrics over them.
//!
//! A sweep trains one model per (strategy, ratio) cell and scores it by
//! negative reconstruction loss on a held-out split; classification accuracy
//! is not reproducible at desk scale, and every CSV written here carries a
//! header comment naming the substitute. PIMR normalizes a record's
//! performances against its own observed extremes; Global PIMR normalizes
//! against the extremes pooled across all records.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::thread;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking;
use crate::masking::{MaskingConfig, Strategy};
use crate::mimloss;
use crate::numerics::Rng;
use crate::tokenize;
use crate::trainer::{self, TrainConfig};

/// One measured point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub ratio: f32,
    pub performance: f32,
}

/// A named performance curve over masking ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub model: String,
    pub points: Vec<SweepPoint>,
}

impl SweepRecord {
    /// Ratios must be strictly increasing.
    pub fn new(model: impl Into<String>, points: Vec<SweepPoint>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].ratio <= w[0].ratio {
                return Err(Error::parameter(
                    "sweep ratios",
                    format!(
                        "must be strictly increasing, got {} then {}",
                        w[0].ratio, w[1].ratio
                    ),
                ));
            }
        }
        Ok(SweepRecord {
            model: model.into(),
            points,
        })
    }

    fn performances(&self) -> impl Iterator<Item = f32> + '_ {
        self.points.iter().map(|p| p.performance)
    }
}

/// Which reference the PIMR numerator subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PimrMode {
    /// `(P - P_min) / (P_max - P_min)` over the record's observed extremes.
    ObservedExtremes,
    /// Numerator references the performance at the lowest *ratio* instead of
    /// the observed minimum; the denominator stays the observed range, so
    /// values may leave `[0, 1]`.
    LowestRatioBaseline,
}

fn extremes(perfs: &[f32]) -> Result<(f32, f32)> {
    if perfs.len() < 2 {
        return Err(Error::DegenerateSweep(format!(
            "need at least 2 points, got {}",
            perfs.len()
        )));
    }
    let min = perfs.iter().copied().fold(f32::INFINITY, f32::min);
    let max = perfs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == min {
        return Err(Error::DegenerateSweep(format!(
            "all {} performances equal {min}; normalization undefined",
            perfs.len()
        )));
    }
    Ok((min, max))
}

/// Per-point normalized improvement for one record.
pub fn pimr(rec: &SweepRecord) -> Result<Vec<(f32, f32)>> {
    pimr_with_mode(rec, PimrMode::ObservedExtremes)
}

pub fn pimr_with_mode(rec: &SweepRecord, mode: PimrMode) -> Result<Vec<(f32, f32)>> {
    let perfs: Vec<f32> = rec.performances().collect();
    let (min, max) = extremes(&perfs)?;
    let reference = match mode {
        PimrMode::ObservedExtremes => min,
        PimrMode::LowestRatioBaseline => rec.points[0].performance,
    };
    Ok(rec
        .points
        .iter()
        .map(|p| (p.ratio, (p.performance - reference) / (max - min)))
        .collect())
}

/// Normalizes every record against the min/max pooled across all records.
pub fn global_pimr(recs: &[SweepRecord]) -> Result<Vec<Vec<(f32, f32)>>> {
    let pooled: Vec<f32> = recs.iter().flat_map(|r| r.performances()).collect();
    let (min, max) = extremes(&pooled)?;
    Ok(recs
        .iter()
        .map(|rec| {
            rec.points
                .iter()
                .map(|p| (p.ratio, (p.performance - min) / (max - min)))
                .collect()
        })
        .collect())
}

fn validate_ratios(ratios: &[f32]) -> Result<()> {
    if ratios.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 ratios for a sweep, got {}",
            ratios.len()
        )));
    }
    for w in ratios.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "ratios must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Distinct display names per strategy config, suffixing duplicates.
fn cell_names(strategies: &[MaskingConfig]) -> Vec<String> {
    let mut names = Vec::with_capacity(strategies.len());
    for (i, cfg) in strategies.iter().enumerate() {
        let base = cfg.strategy.label().to_string();
        let clashes = strategies[..i]
            .iter()
            .filter(|c| c.strategy.label() == base)
            .count();
        if clashes == 0 {
            names.push(base);
        } else {
            names.push(format!("{base}#{}", clashes + 1));
        }
    }
    names
}

/// Offset applied to the training seed for held-out mask draws, so evaluation
/// noise never replays the training stream.
const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Held-out scoring uses one fixed probe for every cell: a random mask at
/// this ratio, drawn from the derived evaluation seed. Scoring all models on
/// the identical reconstruction task keeps the sweep an apples-to-apples
/// comparison of what training produced, and makes a no-op trainer (lr 0)
/// measurably degenerate.
const PROBE_RATIO: f32 = 0.5;

struct SweepCell {
    record_idx: usize,
    masking: MaskingConfig,
}

fn run_cell(
    cell: &SweepCell,
    train_data: &[Image],
    holdout: &[Image],
    train_cfg: &TrainConfig,
) -> Result<f32> {
    let cfg = TrainConfig {
        masking: cell.masking.clone(),
        ..train_cfg.clone()
    };
    let outcome = trainer::train(train_data, &cfg)?;

    let tokens = tokenize::patchify(holdout, cfg.patch_side)?;
    let targets = tokenize::normalize_targets(&tokens, cfg.eps);
    let probe = MaskingConfig {
        strategy: Strategy::Random,
        base_ratio: PROBE_RATIO,
        delta_r: 0.0,
        seed: cfg.seed ^ EVAL_SEED_OFFSET,
        ..cell.masking.clone()
    };
    let mut eval_rng = Rng::from_seed(probe.seed);
    let plan = masking::plan_masks(&tokens, &probe, &mut eval_rng)?;
    let (pred, _) = trainer::forward(&outcome.params, &tokens, &plan.masks)?;
    let report = mimloss::mim_loss(&pred, &targets, &plan.masks)?;
    Ok(-report.value)
}

/// Sequential sweep over every (strategy, ratio) cell.
///
/// The last quarter of `data` (at least one image) is held out for scoring;
/// the rest trains. For strategies that ignore `delta_r` (everything except
/// the adaptive ratio) the cell config zeroes it, so plain ratios near 0 or 1
/// stay valid.
pub fn sweep(
    strategies: &[MaskingConfig],
    ratios: &[f32],
    data: &[Image],
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepRecord>> {
    sweep_with_threads(strategies, ratios, data, train_cfg, 1)
}

/// [`sweep`] with up to `threads` cells in flight; 0 means one per available
/// core. Cell results are merged by index, so the outcome is identical to the
/// sequential run.
pub fn sweep_with_threads(
    strategies: &[MaskingConfig],
    ratios: &[f32],
    data: &[Image],
    train_cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    validate_ratios(ratios)?;
    if strategies.is_empty() {
        return Err(Error::Config("need at least one strategy".into()));
    }
    if data.len() < 2 {
        return Err(Error::parameter(
            "data",
            format!("need at least 2 images to hold one out, got {}", data.len()),
        ));
    }
    let holdout_len = (data.len() / 4).max(1);
    let (train_data, holdout) = data.split_at(data.len() - holdout_len);

    let mut cells = Vec::with_capacity(strategies.len() * ratios.len());
    for (record_idx, strat) in strategies.iter().enumerate() {
        for &ratio in ratios {
            let mut masking = MaskingConfig {
                base_ratio: ratio,
                ..strat.clone()
            };
            if masking.strategy != Strategy::SbamAmr {
                masking.delta_r = 0.0;
            }
            masking.validate()?;
            cells.push(SweepCell {
                record_idx,
                masking,
            });
        }
    }

    let threads = if threads == 0 {
        thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        threads
    };
    let threads = threads.min(cells.len()).max(1);

    let mut performances: Vec<Result<f32>> = Vec::with_capacity(cells.len());
    if threads == 1 {
        for cell in &cells {
            performances.push(run_cell(cell, train_data, holdout, train_cfg));
        }
    } else {
        let chunk = cells.len().div_ceil(threads);
        let mut indexed: Vec<(usize, Result<f32>)> = thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, slot) in cells.chunks(chunk).enumerate() {
                let start = w * chunk;
                handles.push(scope.spawn(move || {
                    slot.iter()
                        .enumerate()
                        .map(|(i, cell)| {
                            (start + i, run_cell(cell, train_data, holdout, train_cfg))
                        })
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        indexed.sort_by_key(|(i, _)| *i);
        performances.extend(indexed.into_iter().map(|(_, r)| r));
    }

    let names = cell_names(strategies);
    let mut records: Vec<SweepRecord> = names
        .into_iter()
        .map(|model| SweepRecord {
            model,
            points: Vec::with_capacity(ratios.len()),
        })
        .collect();
    for (cell, perf) in cells.iter().zip(performances) {
        let rec = &mut records[cell.record_idx];
        let ratio = ratios[rec.points.len()];
        rec.points.push(SweepPoint {
            ratio,
            performance: perf?,
        });
    }
    Ok(records)
}

/// One flattened CSV row of a sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub ratio: f32,
    pub performance: f32,
    pub pimr: f32,
    pub global_pimr: f32,
}

/// Computes both metrics and flattens records into CSV rows.
pub fn tabulate(recs: &[SweepRecord]) -> Result<Vec<SweepRow>> {
    tabulate_with_mode(recs, PimrMode::ObservedExtremes)
}

/// [`tabulate`] with the per-record PIMR reference selectable; the global
/// column always normalizes by the pooled extremes.
pub fn tabulate_with_mode(recs: &[SweepRecord], mode: PimrMode) -> Result<Vec<SweepRow>> {
    let global = global_pimr(recs)?;
    let mut rows = Vec::new();
    for (rec, global_vals) in recs.iter().zip(global) {
        let own = pimr_with_mode(rec, mode)?;
        for ((point, (_, own_val)), (_, global_val)) in rec.points.iter().zip(own).zip(global_vals)
        {
            rows.push(SweepRow {
                model: rec.model.clone(),
                ratio: point.ratio,
                performance: point.performance,
                pimr: own_val,
                global_pimr: global_val,
            });
        }
    }
    Ok(rows)
}

const CSV_COMMENT: &str = "# performance=neg_holdout_loss";
const CSV_HEADER: &str = "model,ratio,performance,pimr,global_pimr";

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CSV_COMMENT}").expect("vec write");
    writeln!(out, "{CSV_HEADER}").expect("vec write");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.model, r.ratio, r.performance, r.pimr, r.global_pimr
        )
        .expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(Error::format(
                    path,
                    format!("line {}: expected header {CSV_HEADER:?}", lineno + 1),
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<f32> {
            s.parse::<f32>()
                .map_err(|_| Error::format(path, format!("line {}: bad {what} {s:?}", lineno + 1)))
        };
        rows.push(SweepRow {
            model: fields[0].to_string(),
            ratio: parse(fields[1], "ratio")?,
            performance: parse(fields[2], "performance")?,
            pimr: parse(fields[3], "pimr")?,
            global_pimr: parse(fields[4], "global_pimr")?,
        });
    }
    if !saw_header {
        return Err(Error::format(path, "missing header line"));
    }
    Ok(rows)
}
