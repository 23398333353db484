//! The layerwise convolutional learner.
//!
//! One level embeds each patch of `s` token embeddings (concatenate, then a
//! nonlinear map), applies a trainable `V × d_x` filter, and normalizes the
//! output to sum to one; that output is the next level's token embedding.
//! Levels are trained bottom-up (`L` down to `1`), each as an independent
//! ridge regression from the *first* level-`l` patch embedding to the label
//! one-hot, on fresh samples per stage. After training, level `l` maps a
//! patch approximately to the conditional label vector of that patch, which
//! is all the next level needs to separate non-synonyms.
//!
//! Two embedding families are supported: random Fourier features (the
//! trained path) and exact quantize-then-tensor-product embeddings (the
//! hand-built reference constructions).

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::grammar::{RhmInstance, RhmParams, Sample, Symbol};
use crate::linalg::solve_spd;
use crate::oracle::TransitionStats;
use crate::par;
use crate::rng::RngStream;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Normalization guard: outputs with `|<1, Wx>|` below this are refused.
/// An adequately trained layer sits far above it; an untrained or mis-scaled
/// one fails loudly instead of emitting garbage.
pub const TAU_NORM: f64 = 1e-9;

/// How many consecutive loss increases the divergence monitor tolerates.
const DIVERGENCE_PATIENCE: usize = 10;

/// Per-stage training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Fresh samples drawn for this stage.
    #[serde(rename = "N")]
    pub samples: usize,
    /// Full-batch gradient descent steps.
    #[serde(rename = "T")]
    pub gd_steps: usize,
    /// Step size; default `2·Vm/(Vm+1)`.
    #[serde(rename = "eta")]
    pub step_size: f64,
    /// Ridge weight; default `1/(Vm)`.
    #[serde(rename = "lambda_W")]
    pub ridge: f64,
    /// Frequency count of the stage's feature map.
    #[serde(rename = "M")]
    pub feature_count: usize,
    /// Bandwidth of the stage's feature map.
    pub sigma: f64,
    /// Target output accuracy for this stage.
    pub eps_target: f64,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.samples > 0
            && self.gd_steps > 0
            && self.step_size > 0.0
            && self.ridge > 0.0
            && self.feature_count > 0
            && self.sigma > 0.0
            && self.eps_target > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "layer config fields must be positive: {self:?}"
            )))
        }
    }
}

/// Trainable filter of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `d_y × d_x`, rows indexed by output coordinate.
    pub matrix: Array2<f64>,
}

/// Patch embedding of one level.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchEmbedding {
    /// Random Fourier features over the concatenated token embeddings.
    Rbf(FeatureMap),
    /// Snap each token embedding to its nearest center (columns of
    /// `centers`), then tensor-product the resulting one-hots: the patch
    /// embedding is exactly one-hot over patch codes. Used by the reference
    /// constructions.
    Quantized {
        centers: Array2<f64>,
        branching: usize,
    },
}

impl PatchEmbedding {
    pub fn output_dim(&self) -> usize {
        match self {
            PatchEmbedding::Rbf(map) => map.output_dim(),
            PatchEmbedding::Quantized { centers, branching } => {
                centers.ncols().pow(*branching as u32)
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            PatchEmbedding::Rbf(map) => map.input_dim(),
            PatchEmbedding::Quantized { centers, branching } => centers.nrows() * branching,
        }
    }

    /// Embeds one patch given the concatenated token embeddings.
    pub fn embed(&self, concat: &[f64]) -> Result<Vec<f64>> {
        if concat.len() != self.input_dim() {
            return Err(Error::shape(
                format!("concatenated input of dimension {}", self.input_dim()),
                format!("dimension {}", concat.len()),
            ));
        }
        match self {
            PatchEmbedding::Rbf(map) => map.apply(concat),
            PatchEmbedding::Quantized { centers, branching } => {
                let dim = centers.nrows();
                let vocab = centers.ncols();
                let mut code = 0usize;
                for chunk in concat.chunks(dim) {
                    let mut best = (f64::INFINITY, 0usize);
                    for c in 0..vocab {
                        let mut d2 = 0.0;
                        for (x, y) in chunk.iter().zip(centers.column(c)) {
                            d2 += (x - y) * (x - y);
                        }
                        if d2 < best.0 {
                            best = (d2, c);
                        }
                    }
                    code = code * vocab + best.1;
                }
                let mut out = vec![0.0; vocab.pow(*branching as u32)];
                out[code] = 1.0;
                Ok(out)
            }
        }
    }
}

/// Concatenates `s` token embeddings and applies the feature map.
pub fn embed_patch(map: &FeatureMap, token_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let total: usize = token_embeddings.iter().map(|t| t.len()).sum();
    if token_embeddings.is_empty() || total != map.input_dim() {
        return Err(Error::shape(
            format!(
                "token embeddings concatenating to dimension {}",
                map.input_dim()
            ),
            format!(
                "{} vectors of total dimension {total}",
                token_embeddings.len()
            ),
        ));
    }
    let mut concat = Vec::with_capacity(total);
    for t in token_embeddings {
        concat.extend_from_slice(t);
    }
    map.apply(&concat)
}

/// Applies the filter and normalizes the output to sum to one.
///
/// Entries may be negative; only the sum is pinned. `level` is carried for
/// error reporting.
pub fn forward_level(weights: &LayerWeights, x: &[f64], level: usize) -> Result<Vec<f64>> {
    let (d_y, d_x) = weights.matrix.dim();
    if x.len() != d_x {
        return Err(Error::shape(
            format!("input of dimension {d_x}"),
            format!("dimension {}", x.len()),
        ));
    }
    let mut out = vec![0.0; d_y];
    let mut denom = 0.0;
    for (o, row) in out.iter_mut().zip(weights.matrix.rows()) {
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = acc;
        denom += acc;
    }
    if denom.abs() < TAU_NORM {
        return Err(Error::DegenerateNormalization {
            level,
            value: denom,
        });
    }
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

/// One trained level.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLevel {
    /// Which grammar level this filter processes (`L` = leaves).
    pub level: usize,
    pub embedding: PatchEmbedding,
    pub weights: LayerWeights,
    pub config: LayerConfig,
}

/// Cluster diagnostics of one trained level, measured on oracle-labeled
/// probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    /// Max intra-patch distance of the level's input patch embeddings.
    pub eps_s_patch: f64,
    /// Max cross-patch |inner product| of the input patch embeddings.
    pub eps_o_patch: f64,
    /// Max intra-symbol distance of the level's normalized outputs.
    pub eps_s_out: f64,
    /// Min cross-symbol distance of the level's normalized outputs.
    pub inter_min_out: f64,
}

/// The full layerwise model, levels ordered `L` down to `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: RhmParams,
    pub levels: Vec<TrainedLevel>,
    pub diagnostics: Vec<LevelDiagnostics>,
}

impl TrainedModel {
    /// Token embeddings at `target_level` for a leaf sequence, flattened
    /// with stride `V`.
    fn forward_to(&self, tokens: &[Symbol], target_level: usize) -> Result<Vec<f64>> {
        let depth = self.params.levels - target_level;
        forward_through(&self.levels[..depth], &self.params, tokens)
    }

    /// Full forward pass: the level-1 output vector over labels.
    pub fn output(&self, tokens: &[Symbol]) -> Result<Vec<f64>> {
        let expect = self.params.input_len().expect("validated params");
        if tokens.len() != expect {
            return Err(Error::shape(
                format!("{expect} tokens"),
                format!("{} tokens", tokens.len()),
            ));
        }
        self.forward_to(tokens, 0)
    }
}

/// Argmax label prediction; ties break to the lowest index.
pub fn predict(model: &TrainedModel, tokens: &[Symbol]) -> Result<Symbol> {
    let out = model.output(tokens)?;
    let mut best = 0usize;
    for (i, &v) in out.iter().enumerate() {
        if v > out[best] {
            best = i;
        }
    }
    Ok(best as Symbol)
}

/// Pushes leaf tokens through a (possibly partial) stack of trained levels.
///
/// `levels[0]` must be the leaf level; `tokens.len()` must be divisible by
/// `s^levels.len()`. Returns token embeddings at the level below the last
/// applied one, flattened with stride `V`.
pub fn forward_through(
    levels: &[TrainedLevel],
    params: &RhmParams,
    tokens: &[Symbol],
) -> Result<Vec<f64>> {
    let v = params.vocab;
    let s = params.branching;
    let mut cur = vec![0.0; tokens.len() * v];
    for (i, &t) in tokens.iter().enumerate() {
        cur[i * v + t as usize] = 1.0;
    }
    for tl in levels {
        let patch_in = s * v;
        if cur.len() % patch_in != 0 {
            return Err(Error::shape(
                format!("a multiple of {s} tokens at level {}", tl.level),
                format!("{} tokens", cur.len() / v),
            ));
        }
        let n_patches = cur.len() / patch_in;
        let mut next = vec![0.0; n_patches * v];
        for k in 0..n_patches {
            let x = tl.embedding.embed(&cur[k * patch_in..(k + 1) * patch_in])?;
            let y = forward_level(&tl.weights, &x, tl.level)?;
            next[k * v..(k + 1) * v].copy_from_slice(&y);
        }
        cur = next;
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Ridge regression: sufficient statistics, closed forms, gradient descent
// ---------------------------------------------------------------------------

/// Second-moment and cross-moment statistics of a labeled embedding batch.
pub struct RidgeStats {
    /// `Ê[x xᵀ]`, `d_x × d_x`.
    pub second_moment: Array2<f64>,
    /// `Ê[e xᵀ]`, `d_y × d_x`.
    pub cross_moment: Array2<f64>,
}

/// Computes [`RidgeStats`] with deterministic blocked products.
pub fn ridge_stats(x: ArrayView2<f64>, labels: &[Symbol], d_y: usize) -> RidgeStats {
    let (d_x, n) = x.dim();
    assert_eq!(labels.len(), n, "one label per column");
    let mut second = par::matmul(x, x.t());
    second.mapv_inplace(|v| v / n as f64);
    let mut cross = Array2::zeros((d_y, d_x));
    for (i, &label) in labels.iter().enumerate() {
        let col = x.column(i);
        let mut row = cross.row_mut(label as usize);
        for (r, &v) in row.iter_mut().zip(col) {
            *r += v;
        }
    }
    cross.mapv_inplace(|v| v / n as f64);
    RidgeStats {
        second_moment: second,
        cross_moment: cross,
    }
}

/// Ridge loss `½ Ê||e - Wx||² + (λ/2)||W||²` evaluated directly per sample.
///
/// Deliberately independent of [`RidgeStats`]; the gradient check pits the
/// analytic gradient against finite differences of this function.
pub fn ridge_loss_direct(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    w: &Array2<f64>,
    ridge: f64,
) -> f64 {
    let (_, n) = x.dim();
    let per_sample: Vec<f64> = (0..n)
        .map(|i| {
            let col = x.column(i);
            let mut acc = 0.0;
            for (r, row) in w.rows().into_iter().enumerate() {
                let mut pred = 0.0;
                for (wv, xv) in row.iter().zip(col) {
                    pred += wv * xv;
                }
                let target = if r == labels[i] as usize { 1.0 } else { 0.0 };
                acc += (target - pred) * (target - pred);
            }
            acc
        })
        .collect();
    let frob: f64 = w.iter().map(|v| v * v).sum();
    0.5 * par::pairwise_sum(&per_sample) / n as f64 + 0.5 * ridge * frob
}

/// Ridge loss from sufficient statistics (labels are one-hots, so
/// `Ê||e||² = 1`).
fn loss_from_stats(stats: &RidgeStats, w: &Array2<f64>, wc: &Array2<f64>, ridge: f64) -> f64 {
    let cross_term: f64 = w
        .iter()
        .zip(stats.cross_moment.iter())
        .map(|(a, b)| a * b)
        .sum();
    let quad: f64 = w.iter().zip(wc.iter()).map(|(a, b)| a * b).sum();
    let frob: f64 = w.iter().map(|v| v * v).sum();
    0.5 - cross_term + 0.5 * quad + 0.5 * ridge * frob
}

/// Analytic gradient `W(Ê[xxᵀ] + λI) − Ê[exᵀ]` of the ridge loss.
pub fn ridge_gradient(stats: &RidgeStats, w: &Array2<f64>, ridge: f64) -> Array2<f64> {
    let mut grad = par::matmul(w.view(), stats.second_moment.view());
    grad.zip_mut_with(w, |g, &wv| *g += ridge * wv);
    grad.zip_mut_with(&stats.cross_moment, |g, &b| *g -= b);
    grad
}

/// Closed-form ridge solution, primal route:
/// `W = Ê[exᵀ](Ê[xxᵀ] + λI)^{-1}`.
pub fn solve_primal(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    d_y: usize,
    ridge: f64,
) -> Result<LayerWeights> {
    let stats = ridge_stats(x, labels, d_y);
    let mut a = stats.second_moment;
    for i in 0..a.nrows() {
        a[[i, i]] += ridge;
    }
    let wt = solve_spd(a, stats.cross_moment.t())?;
    Ok(LayerWeights {
        matrix: wt.t().to_owned(),
    })
}

/// Closed-form ridge solution, dual route:
/// `W = E(XᵀX + λN I)^{-1}Xᵀ` via the push-through identity. Preferred when
/// the embedding dimension exceeds the sample count.
pub fn solve_dual(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    d_y: usize,
    ridge: f64,
) -> Result<LayerWeights> {
    let (_, n) = x.dim();
    let mut gram = par::matmul(x.t(), x);
    for i in 0..n {
        gram[[i, i]] += ridge * n as f64;
    }
    let mut e_t = Array2::zeros((n, d_y));
    for (i, &label) in labels.iter().enumerate() {
        e_t[[i, label as usize]] = 1.0;
    }
    let y = solve_spd(gram, e_t.view())?;
    let w = par::matmul(x, y.view());
    Ok(LayerWeights {
        matrix: w.t().to_owned(),
    })
}

/// Closed-form ridge solution; picks the dual route when `d_x > N`.
pub fn solve_closed_form(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    d_y: usize,
    ridge: f64,
) -> Result<LayerWeights> {
    if labels.is_empty() {
        return Err(Error::InvalidParams(
            "ridge regression needs at least one sample".into(),
        ));
    }
    if !ridge.is_finite() || ridge <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "ridge weight must be positive, got {ridge}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite embedding in ridge regression input".into(),
        ));
    }
    let (d_x, n) = x.dim();
    if d_x > n {
        solve_dual(x, labels, d_y, ridge)
    } else {
        solve_primal(x, labels, d_y, ridge)
    }
}

/// Full-batch gradient descent on the ridge loss from `W = 0`, with loss
/// trace. Errors out if the loss rises for [`DIVERGENCE_PATIENCE`]
/// consecutive steps or leaves the finite range.
pub fn train_level_gd_trace(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    d_y: usize,
    config: &LayerConfig,
) -> Result<(LayerWeights, Vec<f64>)> {
    let (d_x, _) = x.dim();
    let stats = ridge_stats(x, labels, d_y);
    let mut w = Array2::zeros((d_y, d_x));
    let mut trace = Vec::with_capacity(config.gd_steps + 1);
    let mut increases = 0usize;
    let mut prev_loss = f64::INFINITY;
    for step in 0..=config.gd_steps {
        let wc = par::matmul(w.view(), stats.second_moment.view());
        let loss = loss_from_stats(&stats, &w, &wc, config.ridge);
        if !loss.is_finite() {
            return Err(Error::StepSize(format!(
                "loss became non-finite at step {step}"
            )));
        }
        if loss > prev_loss {
            increases += 1;
            if increases >= DIVERGENCE_PATIENCE {
                return Err(Error::StepSize(format!(
                    "loss increased over {DIVERGENCE_PATIENCE} consecutive steps (step {step}, eta {})",
                    config.step_size
                )));
            }
        } else {
            increases = 0;
        }
        prev_loss = loss;
        trace.push(loss);
        if step == config.gd_steps {
            break;
        }
        // grad = WC + λW − B, assembled from the already-computed WC.
        let mut grad = wc;
        grad.zip_mut_with(&w, |g, &wv| *g += config.ridge * wv);
        grad.zip_mut_with(&stats.cross_moment, |g, &b| *g -= b);
        w.zip_mut_with(&grad, |wv, &g| *wv -= config.step_size * g);
    }
    Ok((LayerWeights { matrix: w }, trace))
}

/// Full-batch gradient descent on the ridge loss (see
/// [`train_level_gd_trace`]). `T = 0` returns the zero filter.
pub fn train_level_gd(
    x: ArrayView2<f64>,
    labels: &[Symbol],
    d_y: usize,
    config: &LayerConfig,
) -> Result<LayerWeights> {
    if config.gd_steps == 0 {
        return Ok(LayerWeights {
            matrix: Array2::zeros((d_y, x.nrows())),
        });
    }
    train_level_gd_trace(x, labels, d_y, config).map(|(w, _)| w)
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Calibration multipliers for the per-level schedules.
///
/// The schedule *shapes* are fixed — samples grow like `m^l`, target
/// accuracies shrink like `m^{-l/2}` over `√(V²m²sL·log m)`, bandwidths
/// follow `σ² = ρ²/(2·log(2/ε_O))` — while the unspecified universal
/// constants are exposed here. Defaults come from calibration runs at desk
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMultipliers {
    /// `N^(l) = ceil(sample_mult · m^l)`.
    pub sample_mult: f64,
    /// Frequency count used at every level.
    pub feature_count: usize,
    /// Scales every bandwidth.
    pub sigma_mult: f64,
    /// Scales every gradient-descent step count.
    pub step_mult: f64,
    /// Scales every target accuracy.
    pub eps_mult: f64,
    /// Floor for the per-level near-orthogonality target feeding the
    /// bandwidth display. The analysis drives `ε_O` toward zero; at desk
    /// sample counts that over-shrinks `σ`, so the floor is a calibrated
    /// constant.
    pub eps_o_floor: f64,
    /// Ridge override; `None` means the default `1/(Vm)`.
    pub ridge: Option<f64>,
}

impl Default for ScheduleMultipliers {
    fn default() -> Self {
        ScheduleMultipliers {
            sample_mult: 1000.0,
            feature_count: 512,
            sigma_mult: 1.0,
            step_mult: 1.0,
            eps_mult: 1.0,
            eps_o_floor: 0.02,
            ridge: None,
        }
    }
}

/// The signal lower bound `(20m)^{-(l-1)/2}` used as the default `ρ^(l)`
/// when no audited value is supplied.
pub fn default_signal(level: usize, rules_per_symbol: usize) -> f64 {
    (20.0 * rules_per_symbol as f64).powf(-((level as f64 - 1.0) / 2.0))
}

/// Bandwidth from the chaining display: `σ² = ρ²/(2·log(2/ε_O))`, where `ρ`
/// is the raw intercluster bound of the level's *inputs*.
pub fn bandwidth_schedule(rho_raw: f64, eps_o: f64) -> f64 {
    (rho_raw * rho_raw / (2.0 * (2.0 / eps_o).ln())).sqrt()
}

fn level_config(
    params: &RhmParams,
    level: usize,
    samples: usize,
    mult: &ScheduleMultipliers,
    signals: Option<&[f64]>,
) -> LayerConfig {
    let v = params.vocab as f64;
    let m = params.rules_per_symbol as f64;
    let s = params.branching as f64;
    let l_total = params.levels as f64;
    let patches = v * m;
    let log_m = (m.max(2.0)).ln();

    let signal = |l: usize| match signals {
        Some(rho) => rho[l - 1],
        None => default_signal(l, params.rules_per_symbol),
    };
    let eps_star =
        (mult.eps_mult * signal(level) / (v * v * m * m * s * l_total * log_m).sqrt()).min(0.1);
    let eps_o =
        (eps_star / (600.0 * patches * patches * v.sqrt())).clamp(mult.eps_o_floor.min(0.49), 0.49);
    let rho_input = if level == params.levels {
        2f64.sqrt()
    } else {
        signal(level + 1)
    };
    let sigma = mult.sigma_mult * bandwidth_schedule(rho_input, eps_o);
    let gd_steps =
        (mult.step_mult * patches * (100.0 * patches * v.sqrt() / eps_star).ln()).ceil() as usize;

    LayerConfig {
        samples,
        gd_steps: gd_steps.max(1),
        step_size: 2.0 * patches / (patches + 1.0),
        ridge: mult.ridge.unwrap_or(1.0 / patches),
        feature_count: mult.feature_count,
        sigma,
        eps_target: eps_star,
    }
}

fn geometric_samples(params: &RhmParams, mult: &ScheduleMultipliers) -> Vec<usize> {
    (1..=params.levels)
        .rev()
        .map(|level| {
            let n = (mult.sample_mult * (params.rules_per_symbol as f64).powi(level as i32)).ceil();
            (n as usize).max(1)
        })
        .collect()
}

fn budget_samples(params: &RhmParams, n_total: usize) -> Vec<usize> {
    let m = params.rules_per_symbol as f64;
    let total_weight: f64 = (1..=params.levels).map(|l| m.powi(l as i32)).sum();
    (1..=params.levels)
        .rev()
        .map(|level| {
            let share = (n_total as f64 * m.powi(level as i32) / total_weight).floor() as usize;
            share.max(1)
        })
        .collect()
}

fn configs_from_samples(
    params: &RhmParams,
    samples: Vec<usize>,
    mult: &ScheduleMultipliers,
    signals: Option<&[f64]>,
) -> Vec<LayerConfig> {
    (1..=params.levels)
        .rev()
        .zip(samples)
        .map(|(level, n)| level_config(params, level, n, mult, signals))
        .collect()
}

/// Per-level configs (ordered level `L` down to `1`) with the geometric
/// sample schedule `N^(l) = ceil(sample_mult · m^l)` and the sampled-rule
/// signal bound standing in for `ρ`.
pub fn default_layer_configs(params: &RhmParams, mult: &ScheduleMultipliers) -> Vec<LayerConfig> {
    configs_from_samples(params, geometric_samples(params, mult), mult, None)
}

/// Like [`default_layer_configs`] but with the audited per-level signals
/// (`rho_emp`, indexed by level - 1) in place of the generic bound. The
/// bandwidth display then sees the instance's actual intercluster gaps,
/// which at desk scale sit well above the worst case.
pub fn audited_layer_configs(
    params: &RhmParams,
    rho_emp: &[f64],
    mult: &ScheduleMultipliers,
) -> Vec<LayerConfig> {
    configs_from_samples(params, geometric_samples(params, mult), mult, Some(rho_emp))
}

/// Per-level configs splitting a total sample budget geometrically:
/// `N^(l) = floor(n_total · m^l / Σ_k m^k)`, so `Σ_l N^(l) <= n_total`.
pub fn budget_layer_configs(
    params: &RhmParams,
    n_total: usize,
    mult: &ScheduleMultipliers,
) -> Vec<LayerConfig> {
    configs_from_samples(params, budget_samples(params, n_total), mult, None)
}

/// [`budget_layer_configs`] with audited signals.
pub fn audited_budget_layer_configs(
    params: &RhmParams,
    rho_emp: &[f64],
    n_total: usize,
    mult: &ScheduleMultipliers,
) -> Vec<LayerConfig> {
    configs_from_samples(params, budget_samples(params, n_total), mult, Some(rho_emp))
}

// ---------------------------------------------------------------------------
// Layerwise training
// ---------------------------------------------------------------------------

/// Draws `n` fresh samples from independent substreams.
fn draw_samples(instance: &RhmInstance, rng: &RngStream, n: usize, keep: bool) -> Vec<Sample> {
    par::map_indexed(n, |i| {
        let mut r = rng.substream_tagged(&[0, i as u64]);
        instance.generate_sample(&mut r, keep)
    })
}

/// First level-`level` patch embedding of each sample under the partial
/// stack, as columns of a `d_x × N` matrix.
fn stage_embeddings(
    stack: &[TrainedLevel],
    params: &RhmParams,
    map: &FeatureMap,
    samples: &[Sample],
) -> Result<Array2<f64>> {
    let s = params.branching;
    // The first patch at this stage is fed by the first s^(depth+1) leaves,
    // where depth is how many levels are already frozen below it.
    let needed = s.pow(stack.len() as u32 + 1);
    let cols: Vec<Result<Vec<f64>>> = par::map_indexed(samples.len(), |i| {
        let prefix = &samples[i].tokens[..needed];
        let h = forward_through(stack, params, prefix)?;
        map.apply(&h)
    });
    let d_x = map.output_dim();
    let mut x = Array2::zeros((d_x, samples.len()));
    for (i, col) in cols.into_iter().enumerate() {
        let col = col?;
        x.column_mut(i).assign(&ndarray::ArrayView1::from(&col));
    }
    Ok(x)
}

/// Trains the full stack layerwise, level `L` down to `1`.
///
/// `configs[0]` configures level `L`. Each stage draws fresh samples, embeds
/// the first level-`l` patch under the frozen stack, and fits the filter by
/// gradient descent; if the divergence monitor trips at the configured step
/// size, the stage retries once with the safe fallback `η = 1/(1 + λ)`.
pub fn train_layerwise(
    instance: &RhmInstance,
    configs: &[LayerConfig],
    rng: &RngStream,
) -> Result<TrainedModel> {
    let params = *instance.params();
    if configs.len() != params.levels {
        return Err(Error::InvalidParams(format!(
            "need {} layer configs (level L down to 1), got {}",
            params.levels,
            configs.len()
        )));
    }
    let v = params.vocab;
    let s = params.branching;
    let mut levels: Vec<TrainedLevel> = Vec::with_capacity(params.levels);
    let mut diagnostics = Vec::with_capacity(params.levels);

    for (idx, config) in configs.iter().enumerate() {
        let level = params.levels - idx;
        let fail = |e: Error| Error::StageFailure {
            level,
            source: Box::new(e),
        };
        config.validate().map_err(fail)?;
        let stage_rng = rng.substream(level as u64);

        let samples = draw_samples(instance, &stage_rng.substream(1), config.samples, false);
        let labels: Vec<Symbol> = samples.iter().map(|sm| sm.label).collect();
        let mut map_rng = stage_rng.substream(2);
        let map = FeatureMap::sample(s * v, config.feature_count, config.sigma, &mut map_rng)
            .map_err(fail)?;
        let x = stage_embeddings(&levels, &params, &map, &samples).map_err(fail)?;

        let weights = match train_level_gd(x.view(), &labels, v, config) {
            Ok(w) => w,
            Err(Error::StepSize(_)) => {
                let fallback = LayerConfig {
                    step_size: 1.0 / (1.0 + config.ridge),
                    ..*config
                };
                train_level_gd(x.view(), &labels, v, &fallback).map_err(fail)?
            }
            Err(e) => return Err(fail(e)),
        };

        levels.push(TrainedLevel {
            level,
            embedding: PatchEmbedding::Rbf(map),
            weights,
            config: *config,
        });

        let diag = level_diagnostics(&levels, &params, instance, &stage_rng.substream(3), 96)
            .map_err(fail)?;
        diagnostics.push(diag);
    }

    Ok(TrainedModel {
        params,
        levels,
        diagnostics,
    })
}

/// Measures cluster diagnostics of the most recently trained level on
/// oracle-labeled probes (samples drawn with intermediates kept).
fn level_diagnostics(
    stack: &[TrainedLevel],
    params: &RhmParams,
    instance: &RhmInstance,
    rng: &RngStream,
    n_probe: usize,
) -> Result<LevelDiagnostics> {
    let tl = stack.last().expect("diagnostics need at least one level");
    let level = tl.level;
    let s = params.branching;
    let v = params.vocab;
    let samples = draw_samples(instance, rng, n_probe, true);

    // Forward all tokens to the level's inputs, group patch embeddings by
    // true patch code and outputs by true parent symbol.
    let mut patch_groups: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
    let mut out_groups: std::collections::BTreeMap<Symbol, Vec<Vec<f64>>> = Default::default();
    const CAP: usize = 12;
    for sample in &samples {
        let h = forward_through(&stack[..stack.len() - 1], params, &sample.tokens)?;
        let seqs = sample
            .intermediates
            .as_ref()
            .expect("probes keep intermediates");
        let level_seq: &[Symbol] = if level == params.levels {
            &sample.tokens
        } else {
            &seqs[level]
        };
        let parent_seq: &[Symbol] = &seqs[level - 1];
        let n_patches = level_seq.len() / s;
        for k in 0..n_patches {
            let code = instance.patch_code(&level_seq[k * s..(k + 1) * s]);
            let x = tl.embedding.embed(&h[k * s * v..(k + 1) * s * v])?;
            let y = forward_level(&tl.weights, &x, level)?;
            let pg = patch_groups.entry(code).or_default();
            if pg.len() < CAP {
                pg.push(x);
            }
            let og = out_groups.entry(parent_seq[k]).or_default();
            if og.len() < CAP {
                og.push(y);
            }
        }
    }

    let mut eps_s_patch: f64 = 0.0;
    let mut eps_o_patch: f64 = 0.0;
    let groups: Vec<&Vec<Vec<f64>>> = patch_groups.values().collect();
    for (ga, group_a) in groups.iter().enumerate() {
        for xa in group_a.iter() {
            for (gb, group_b) in groups.iter().enumerate().skip(ga) {
                for xb in group_b.iter() {
                    if std::ptr::eq(xa, xb) {
                        continue;
                    }
                    if ga == gb {
                        let d2: f64 = xa.iter().zip(xb).map(|(a, b)| (a - b) * (a - b)).sum();
                        eps_s_patch = eps_s_patch.max(d2.sqrt());
                    } else {
                        let dot: f64 = xa.iter().zip(xb).map(|(a, b)| a * b).sum();
                        eps_o_patch = eps_o_patch.max(dot.abs());
                    }
                }
            }
        }
    }

    let mut eps_s_out: f64 = 0.0;
    let mut inter_min_out = f64::INFINITY;
    let ogroups: Vec<&Vec<Vec<f64>>> = out_groups.values().collect();
    for (ga, group_a) in ogroups.iter().enumerate() {
        for xa in group_a.iter() {
            for (gb, group_b) in ogroups.iter().enumerate().skip(ga) {
                for xb in group_b.iter() {
                    if std::ptr::eq(xa, xb) {
                        continue;
                    }
                    let d2: f64 = xa.iter().zip(xb).map(|(a, b)| (a - b) * (a - b)).sum();
                    if ga == gb {
                        eps_s_out = eps_s_out.max(d2.sqrt());
                    } else {
                        inter_min_out = inter_min_out.min(d2.sqrt());
                    }
                }
            }
        }
    }

    Ok(LevelDiagnostics {
        level,
        eps_s_patch,
        eps_o_patch,
        eps_s_out,
        inter_min_out,
    })
}

// ---------------------------------------------------------------------------
// Reference constructions
// ---------------------------------------------------------------------------

/// The three hand-built reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructionVariant {
    /// Exact one-hot embeddings with decode-map filters; needs the
    /// intermediate vocabulary identification, recovers every label.
    Intermediates,
    /// Conditional-probability surrogates: quantized embeddings, filters
    /// `W = m^{-1} Σ q_mu x_muᵀ`; every level outputs `q_mu` exactly.
    CondProb,
    /// Like `CondProb` but with sampled random Fourier embeddings and the
    /// bandwidth schedule: the approximation the trained model converges to.
    RandomFeatures,
}

impl TryFrom<u8> for ConstructionVariant {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ConstructionVariant::Intermediates),
            2 => Ok(ConstructionVariant::CondProb),
            3 => Ok(ConstructionVariant::RandomFeatures),
            _ => Err(Error::InvalidParams(format!(
                "construction variant must be 1-3, got {v}"
            ))),
        }
    }
}

/// Builds a hand-constructed model from exact statistics.
///
/// `feature_count` is only used by the random-features variant.
pub fn build_construction_model(
    instance: &RhmInstance,
    stats: &TransitionStats,
    variant: ConstructionVariant,
    feature_count: usize,
    rng: &RngStream,
) -> Result<TrainedModel> {
    let params = *instance.params();
    let v = params.vocab;
    let s = params.branching;
    let m = params.rules_per_symbol as f64;
    let placeholder = LayerConfig {
        samples: 0,
        gd_steps: 0,
        step_size: 0.0,
        ridge: 0.0,
        feature_count: 0,
        sigma: 0.0,
        eps_target: 0.0,
    };

    let mut levels = Vec::with_capacity(params.levels);
    match variant {
        ConstructionVariant::Intermediates | ConstructionVariant::CondProb => {
            for level in (1..=params.levels).rev() {
                let centers = match variant {
                    ConstructionVariant::Intermediates => Array2::eye(v),
                    _ => {
                        if level == params.levels {
                            Array2::eye(v)
                        } else {
                            stats.prefix[level].clone()
                        }
                    }
                };
                let mut w = Array2::zeros((v, v.pow(s as u32)));
                for (code, parent) in instance.patches(level) {
                    match variant {
                        ConstructionVariant::Intermediates => {
                            w[[parent as usize, code]] = 1.0;
                        }
                        _ => {
                            let q = stats.prefix[level - 1].column(parent as usize);
                            for (zeta, &qv) in q.iter().enumerate() {
                                w[[zeta, code]] = qv / m;
                            }
                        }
                    }
                }
                levels.push(TrainedLevel {
                    level,
                    embedding: PatchEmbedding::Quantized {
                        centers,
                        branching: s,
                    },
                    weights: LayerWeights { matrix: w },
                    config: placeholder,
                });
            }
        }
        ConstructionVariant::RandomFeatures => {
            if feature_count == 0 {
                return Err(Error::InvalidParams(
                    "random-features construction needs M >= 1".into(),
                ));
            }
            // Canonical token embeddings at the current level, one column
            // per symbol; starts as leaf one-hots and is replaced by the
            // level's outputs on its first rules as we move up.
            let mut canon = Array2::eye(v);
            for level in (1..=params.levels).rev() {
                let rho_raw = if level == params.levels {
                    2f64.sqrt()
                } else {
                    stats.rho_emp[level] // audited signal at level + 1
                };
                let eps_o = 0.02;
                let sigma = bandwidth_schedule(rho_raw, eps_o);
                let mut map_rng = rng.substream(level as u64);
                let map = FeatureMap::sample(s * v, feature_count, sigma, &mut map_rng)?;

                let mut w = Array2::zeros((v, map.output_dim()));
                let mut concat = vec![0.0; s * v];
                for (code, parent) in instance.patches(level) {
                    let patch = crate::grammar::patch_from_code(code, s, v);
                    for (j, &tok) in patch.iter().enumerate() {
                        for (dst, &src) in concat[j * v..(j + 1) * v]
                            .iter_mut()
                            .zip(canon.column(tok as usize))
                        {
                            *dst = src;
                        }
                    }
                    let x = map.apply(&concat)?;
                    let q = stats.prefix[level - 1].column(parent as usize);
                    for (zeta, &qv) in q.iter().enumerate() {
                        let mut row = w.row_mut(zeta);
                        for (wv, &xv) in row.iter_mut().zip(&x) {
                            *wv += qv * xv;
                        }
                    }
                }
                let weights = LayerWeights { matrix: w };

                // Next level's canonical embeddings: outputs on each
                // symbol's first rule.
                let mut next_canon = Array2::zeros((v, v));
                for nu in 0..v {
                    let patch = &instance.rules_at(level - 1)[nu][0];
                    for (j, &tok) in patch.iter().enumerate() {
                        for (dst, &src) in concat[j * v..(j + 1) * v]
                            .iter_mut()
                            .zip(canon.column(tok as usize))
                        {
                            *dst = src;
                        }
                    }
                    let x = map.apply(&concat)?;
                    let y = forward_level(&weights, &x, level)?;
                    next_canon
                        .column_mut(nu)
                        .assign(&ndarray::ArrayView1::from(&y));
                }
                canon = next_canon;

                levels.push(TrainedLevel {
                    level,
                    embedding: PatchEmbedding::Rbf(map),
                    weights,
                    config: LayerConfig {
                        sigma,
                        feature_count,
                        ..placeholder
                    },
                });
            }
        }
    }

    Ok(TrainedModel {
        params,
        levels,
        diagnostics: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LevelJson {
    sigma: f64,
    #[serde(rename = "M")]
    count: usize,
    omega: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    weights: Vec<Vec<f64>>,
    config_snapshot: LayerConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    params: RhmParams,
    levels: Vec<LevelJson>,
    diagnostics: Vec<LevelDiagnostics>,
}

/// Serializes a random-features model to the documented JSON schema.
///
/// Refuses non-finite values and quantized (construction) levels; those are
/// in-memory references, not portable artifacts.
pub fn save_model(model: &TrainedModel) -> Result<String> {
    let mut levels = Vec::with_capacity(model.levels.len());
    for tl in &model.levels {
        let map = match &tl.embedding {
            PatchEmbedding::Rbf(map) => map,
            PatchEmbedding::Quantized { .. } => {
                return Err(Error::InvalidParams(
                    "only random-feature models serialize; construction models are in-memory"
                        .into(),
                ))
            }
        };
        if map.frequencies.iter().any(|v| !v.is_finite())
            || tl.weights.matrix.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("model contains non-finite values".into()));
        }
        levels.push(LevelJson {
            sigma: map.sigma,
            count: map.count(),
            omega: map
                .frequencies
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            weights: tl
                .weights
                .matrix
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            config_snapshot: tl.config,
        });
    }
    let doc = ModelJson {
        params: model.params,
        levels,
        diagnostics: model.diagnostics.clone(),
    };
    Ok(serde_json::to_string(&doc).expect("model serialization cannot fail"))
}

/// Loads a model saved by [`save_model`], bit-exactly.
pub fn load_model(text: &str) -> Result<TrainedModel> {
    let doc: ModelJson = serde_json::from_str(text).map_err(|e| {
        Error::parse(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    doc.params.validate()?;
    if doc.levels.len() != doc.params.levels {
        return Err(Error::parse(
            "levels",
            format!(
                "expected {} levels, found {}",
                doc.params.levels,
                doc.levels.len()
            ),
        ));
    }
    let d_h = doc.params.branching * doc.params.vocab;
    let mut levels = Vec::with_capacity(doc.levels.len());
    for (idx, lj) in doc.levels.into_iter().enumerate() {
        let level = doc.params.levels - idx;
        if lj.omega.len() != lj.count || lj.omega.iter().any(|r| r.len() != d_h) {
            return Err(Error::parse(
                format!("levels[{idx}].omega"),
                format!("expected {} rows of length {d_h}", lj.count),
            ));
        }
        let mut freqs = Array2::zeros((lj.count, d_h));
        for (r, row) in lj.omega.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                freqs[[r, c]] = val;
            }
        }
        if lj.weights.len() != doc.params.vocab
            || lj.weights.iter().any(|r| r.len() != 2 * lj.count)
        {
            return Err(Error::parse(
                format!("levels[{idx}].W"),
                format!(
                    "expected {} rows of length {}",
                    doc.params.vocab,
                    2 * lj.count
                ),
            ));
        }
        let mut w = Array2::zeros((doc.params.vocab, 2 * lj.count));
        for (r, row) in lj.weights.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                w[[r, c]] = val;
            }
        }
        if freqs.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "model file contains non-finite values".into(),
            ));
        }
        levels.push(TrainedLevel {
            level,
            embedding: PatchEmbedding::Rbf(FeatureMap {
                sigma: lj.sigma,
                frequencies: freqs,
            }),
            weights: LayerWeights { matrix: w },
            config: lj.config_snapshot,
        });
    }
    Ok(TrainedModel {
        params: doc.params,
        levels,
        diagnostics: doc.diagnostics,
    })
}
