//! Reproducible sweeps over grammar parameters and sample budgets.
//!
//! A sweep enumerates the cartesian product of the grammar grids and the
//! budget grid; each (cell, trial) row samples its own instance and streams
//! from a sub-seed derived as `derive_seed(seed, [cell, trial])`, trains the
//! layerwise model with the budget split geometrically across levels
//! (`N^(l) ∝ m^l`), and evaluates on fresh held-out samples. Rows execute in
//! parallel and merge in deterministic (cell, trial) order; a stage failure
//! is recorded in its row, never fatal to the sweep.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::grammar::{RhmInstance, RhmParams, Sample, Symbol};
use crate::learner::{
    audited_budget_layer_configs, budget_layer_configs, predict, solve_closed_form,
    train_layerwise, ScheduleMultipliers,
};
use crate::oracle::sample_instance_with_signal;
use crate::par;
use crate::rng::{derive_seed, RngStream};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Sweep axes and per-trial settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Grid of level counts.
    #[serde(rename = "L")]
    pub levels: Vec<usize>,
    /// Grid of branching factors.
    #[serde(rename = "s")]
    pub branching: Vec<usize>,
    /// Grid of vocabulary sizes.
    #[serde(rename = "V")]
    pub vocab: Vec<usize>,
    /// Grid of rules-per-symbol counts.
    #[serde(rename = "m")]
    pub rules: Vec<usize>,
    /// Total-sample budgets.
    pub n_grid: Vec<usize>,
    /// Trials per cell.
    pub trials: usize,
    /// Root seed; everything else derives from it.
    pub seed: u64,
    /// Learner schedule multipliers.
    #[serde(default)]
    pub multipliers: ScheduleMultipliers,
    /// Held-out samples per row.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// When set (the default), each row draws its instance through the
    /// per-level signal audit, matching the assumption the learning
    /// guarantee is conditioned on.
    #[serde(default = "default_require_signal")]
    pub require_signal: bool,
}

fn default_require_signal() -> bool {
    true
}

fn default_test_size() -> usize {
    1000
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty()
            || self.branching.is_empty()
            || self.vocab.is_empty()
            || self.rules.is_empty()
            || self.n_grid.is_empty()
        {
            return Err(Error::InvalidParams("sweep grids must be nonempty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParams("trials must be at least 1".into()));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidParams("test_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Cells in deterministic enumeration order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &levels in &self.levels {
            for &branching in &self.branching {
                for &vocab in &self.vocab {
                    for &rules in &self.rules {
                        for &n_total in &self.n_grid {
                            out.push(SweepCell {
                                levels,
                                branching,
                                vocab,
                                rules,
                                n_total,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub levels: usize,
    pub branching: usize,
    pub vocab: usize,
    pub rules: usize,
    pub n_total: usize,
}

/// One (cell, trial) outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub trial: usize,
    /// Held-out argmax accuracy; 0.0 when the stage failed (see
    /// `stage_failure`).
    pub test_accuracy: f64,
    /// Exact-decoder accuracy on the same test set (sanity: always 1.0).
    pub oracle_accuracy: f64,
    /// Max intra-symbol output spread across levels.
    pub intra_max: f64,
    /// Min inter-symbol output distance across levels.
    pub inter_min: f64,
    /// Empty on success; the stage error otherwise.
    pub stage_failure: String,
    /// Wall time of this row. Not serialized to CSV: timings differ across
    /// runs and the CSV is byte-reproducible.
    pub wall_time_s: f64,
}

/// All rows of a sweep, in (cell, trial) order.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Runs the full sweep. Deterministic given the config (including seed);
/// thread count only affects wall time.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let cells = config.cells();
    let total_rows = cells.len() * config.trials;
    let rows = par::map_indexed(total_rows, |row_idx| {
        let cell_idx = row_idx / config.trials;
        let trial = row_idx % config.trials;
        run_row(config, cells[cell_idx], cell_idx, trial)
    });
    Ok(SweepResult { rows })
}

fn run_row(config: &SweepConfig, cell: SweepCell, cell_idx: usize, trial: usize) -> SweepRow {
    let start = Instant::now();
    let sub_seed = derive_seed(config.seed, &[cell_idx as u64, trial as u64]);
    let rng = RngStream::from_seed(sub_seed);
    let params = RhmParams::new(
        cell.levels,
        cell.branching,
        cell.vocab,
        cell.rules,
        sub_seed,
    );

    let fail = |msg: String| SweepRow {
        cell,
        trial,
        test_accuracy: 0.0,
        oracle_accuracy: 0.0,
        intra_max: 0.0,
        inter_min: 0.0,
        stage_failure: msg,
        wall_time_s: start.elapsed().as_secs_f64(),
    };

    let (instance, configs) = if config.require_signal {
        match sample_instance_with_signal(params, &rng.substream(0), 64) {
            Ok((i, stats)) => {
                let configs = audited_budget_layer_configs(
                    &params,
                    &stats.rho_emp,
                    cell.n_total,
                    &config.multipliers,
                );
                (i, configs)
            }
            Err(e) => return fail(e.to_string()),
        }
    } else {
        match RhmInstance::sample(params, &mut rng.substream(0)) {
            Ok(i) => {
                let configs = budget_layer_configs(&params, cell.n_total, &config.multipliers);
                (i, configs)
            }
            Err(e) => return fail(e.to_string()),
        }
    };
    let model = match train_layerwise(&instance, &configs, &rng.substream(1)) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };

    let test_rng = rng.substream(2);
    let test: Vec<Sample> = par::map_indexed(config.test_size, |i| {
        let mut r = test_rng.substream(i as u64);
        instance.generate_sample(&mut r, false)
    });
    let hits: Vec<f64> = par::map_indexed(test.len(), |i| match predict(&model, &test[i].tokens) {
        Ok(label) if label == test[i].label => 1.0,
        _ => 0.0,
    });
    let oracle_hits: Vec<f64> = test
        .iter()
        .map(|s| match instance.decode(&s.tokens) {
            Ok(label) if label == s.label => 1.0,
            _ => 0.0,
        })
        .collect();

    let intra_max = model
        .diagnostics
        .iter()
        .map(|d| d.eps_s_out)
        .fold(0.0f64, f64::max);
    let inter_min = model
        .diagnostics
        .iter()
        .map(|d| d.inter_min_out)
        .fold(f64::INFINITY, f64::min);

    SweepRow {
        cell,
        trial,
        test_accuracy: par::pairwise_sum(&hits) / test.len() as f64,
        oracle_accuracy: par::pairwise_sum(&oracle_hits) / test.len() as f64,
        intra_max,
        inter_min: if inter_min.is_finite() {
            inter_min
        } else {
            0.0
        },
        stage_failure: String::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Smallest budget in the grid whose median accuracy over trials reaches
/// `target`, for the sub-grid of rows matching `(levels, branching, vocab,
/// rules)`. No interpolation.
pub fn threshold_budget(
    result: &SweepResult,
    levels: usize,
    branching: usize,
    vocab: usize,
    rules: usize,
    target: f64,
) -> Option<usize> {
    let mut budgets: Vec<usize> = result
        .rows
        .iter()
        .filter(|r| {
            r.cell.levels == levels
                && r.cell.branching == branching
                && r.cell.vocab == vocab
                && r.cell.rules == rules
        })
        .map(|r| r.cell.n_total)
        .collect();
    budgets.sort_unstable();
    budgets.dedup();
    for n in budgets {
        let mut accs: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| {
                r.cell.n_total == n
                    && r.cell.levels == levels
                    && r.cell.branching == branching
                    && r.cell.vocab == vocab
                    && r.cell.rules == rules
            })
            .map(|r| r.test_accuracy)
            .collect();
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if accs.is_empty() {
            continue;
        }
        let median = accs[accs.len() / 2];
        if median >= target {
            return Some(n);
        }
    }
    None
}

/// Fixed CSV header. `wall_time` is intentionally absent: the file must be
/// byte-identical across runs of the same config.
pub const CSV_HEADER: &str =
    "L,s,V,m,n_total,trial,test_accuracy,oracle_accuracy,intra_max,inter_min,stage_failure";

fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Floats serialize with 17 significant digits, enough to round-trip `f64`
/// exactly.
fn csv_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the sweep as RFC-4180 CSV with [`CSV_HEADER`], one row per
/// (cell, trial). Refuses empty results.
pub fn export_csv<W: Write>(result: &SweepResult, mut out: W) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::EmptyResult);
    }
    writeln!(out, "{CSV_HEADER}")?;
    for row in &result.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.cell.levels,
            row.cell.branching,
            row.cell.vocab,
            row.cell.rules,
            row.cell.n_total,
            row.trial,
            csv_float(row.test_accuracy),
            csv_float(row.oracle_accuracy),
            csv_float(row.intra_max),
            csv_float(row.inter_min),
            csv_quote(&row.stage_failure),
        )?;
    }
    Ok(())
}

/// Writes [`export_csv`] to a file path.
pub fn export_csv_path(result: &SweepResult, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    export_csv(result, std::io::BufWriter::new(file))
}

/// One ridge regression from a whole-input RBF embedding to the label:
/// the shallow foil for the layerwise learner. Returns held-out accuracy.
pub fn shallow_baseline(
    train: &[Sample],
    test: &[Sample],
    vocab: usize,
    feature_count: usize,
    sigma: f64,
    ridge: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::UndefinedModel(
            "shallow baseline needs training samples".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::InvalidParams(
            "shallow baseline needs test samples".into(),
        ));
    }
    let input_len = train[0].tokens.len();
    let map = FeatureMap::sample(input_len * vocab, feature_count, sigma, rng)?;

    let embed = |tokens: &[Symbol]| -> Vec<f64> {
        let mut concat = vec![0.0; input_len * vocab];
        for (i, &t) in tokens.iter().enumerate() {
            concat[i * vocab + t as usize] = 1.0;
        }
        map.apply(&concat).expect("dimensions fixed above")
    };

    let cols: Vec<Vec<f64>> = par::map_indexed(train.len(), |i| embed(&train[i].tokens));
    let mut x = ndarray::Array2::zeros((map.output_dim(), train.len()));
    for (i, col) in cols.iter().enumerate() {
        x.column_mut(i).assign(&ndarray::ArrayView1::from(&col[..]));
    }
    let labels: Vec<Symbol> = train.iter().map(|s| s.label).collect();
    let weights = solve_closed_form(x.view(), &labels, vocab, ridge)?;

    let hits: Vec<f64> = par::map_indexed(test.len(), |i| {
        let phi = embed(&test[i].tokens);
        let scores = weights.matrix.dot(&ndarray::ArrayView1::from(&phi[..]));
        let mut best = 0usize;
        for (j, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = j;
            }
        }
        if best == test[i].label as usize {
            1.0
        } else {
            0.0
        }
    });
    Ok(par::pairwise_sum(&hits) / test.len() as f64)
}
