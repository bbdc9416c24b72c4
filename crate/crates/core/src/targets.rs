//! Training-target assembly and the six performance functions.
//!
//! Supervised kinds (mse, mae) cover the labeled rows only. The SSL kinds
//! extend the target matrix with per-unlabeled-row soft class probabilities
//! from one of the engines (manif = anchor graph, safer = worst-case-gain
//! combination, smir = kernel classifier) or a harmonic blend of all three
//! (weiave), and apply squared error over the extended row set.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchor::{self, AnchorParams};
use crate::error::{Error, Result};
use crate::features::PatchDataset;
use crate::safer::{self, SaferParams};
use crate::smir::{self, SmirParams};

pub const WEIAVE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
    Manif,
    Smir,
    Safer,
    WeiAve,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Mse,
        LossKind::Mae,
        LossKind::Manif,
        LossKind::Smir,
        LossKind::Safer,
        LossKind::WeiAve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Manif => "manif",
            LossKind::Smir => "smir",
            LossKind::Safer => "safer",
            LossKind::WeiAve => "weiave",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        LossKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown loss kind {s:?} (expected one of mse, mae, manif, smir, safer, weiave)"
                ))
            })
    }

    /// Does this kind pull unlabeled rows into the loss?
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, LossKind::Mse | LossKind::Mae)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which engine produced a soft-target block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Manif,
    Safer,
    Smir,
    WeiAve,
}

/// Per-unlabeled-row class probabilities emitted by one SSL engine.
#[derive(Debug, Clone)]
pub struct SoftTargets {
    /// Dataset row of each entry (exactly the unlabeled index set).
    pub rows: Vec<usize>,
    /// One simplex row per entry.
    pub values: Array2<f64>,
    pub engine: EngineKind,
}

impl SoftTargets {
    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.values.nrows() {
            return Err(Error::invalid("soft target row/value mismatch"));
        }
        for (i, row) in self.values.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "soft target row {i} is not on the simplex"
                )));
            }
        }
        Ok(())
    }
}

/// How the weiave kind blends the three engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeiAveMode {
    /// Componentwise harmonic mean of the three soft-target rows (default).
    Targets,
    /// Harmonic mean of the three per-engine squared-error losses.
    Losses,
}

/// Engine hyperparameters plus the loss-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslParams {
    pub anchor: AnchorParams,
    pub safer: SaferParams,
    pub smir: SmirParams,
    pub weiave_mode: WeiAveMode,
    /// Loss weight of each unlabeled row (labeled rows always weigh 1).
    pub unlabeled_weight: f64,
}

impl Default for SslParams {
    fn default() -> Self {
        SslParams {
            anchor: AnchorParams::default(),
            safer: SaferParams::default(),
            smir: SmirParams::default(),
            weiave_mode: WeiAveMode::Targets,
            unlabeled_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TargetPayload {
    /// One target row per covered row.
    Single(Array2<f64>),
    /// The three engines' extended target matrices, blended at loss time.
    HarmonicLosses {
        manif: Array2<f64>,
        safer: Array2<f64>,
        smir: Array2<f64>,
    },
}

/// The stacked target matrix: one-hot rows for labeled data followed by
/// engine soft targets for unlabeled data (supervised kinds stop after the
/// labeled block).
#[derive(Debug, Clone)]
pub struct ExtendedTargets {
    pub kind: LossKind,
    /// Dataset row covered by each target row.
    pub rows: Vec<usize>,
    /// Per-row loss weight.
    pub weights: Vec<f64>,
    pub payload: TargetPayload,
}

impl ExtendedTargets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Targets covering exactly the given matrix rows 0..n with weight 1;
    /// used by the supervised phases and the test harnesses.
    pub fn labeled_only(kind: LossKind, values: Array2<f64>) -> ExtendedTargets {
        let n = values.nrows();
        ExtendedTargets {
            kind,
            rows: (0..n).collect(),
            weights: vec![1.0; n],
            payload: TargetPayload::Single(values),
        }
    }

    /// Reconstruction targets for autoencoder pretraining (plain MSE
    /// against the input itself).
    pub fn reconstruction(values: Array2<f64>) -> ExtendedTargets {
        ExtendedTargets::labeled_only(LossKind::Mse, values)
    }
}

fn harmonic_rows(m: &Array2<f64>, sa: &Array2<f64>, sm: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for i in 0..m.nrows() {
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            let h = 3.0
                / (1.0 / (m[(i, j)] + WEIAVE_EPSILON)
                    + 1.0 / (sa[(i, j)] + WEIAVE_EPSILON)
                    + 1.0 / (sm[(i, j)] + WEIAVE_EPSILON));
            out[(i, j)] = h;
            sum += h;
        }
        for j in 0..m.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

fn run_engine(
    engine: EngineKind,
    dataset: &PatchDataset,
    embeddings: &ArrayView2<f64>,
    params: &SslParams,
    seed: u64,
) -> Result<SoftTargets> {
    let values = match engine {
        EngineKind::Manif => anchor::soft_targets(dataset, embeddings, &params.anchor, seed)
            .map_err(|e| e.in_engine("anchor"))?,
        EngineKind::Safer => safer::soft_targets(dataset, embeddings, &params.safer)
            .map_err(|e| e.in_engine("safer"))?,
        EngineKind::Smir => smir::soft_targets(dataset, embeddings, &params.smir, seed)
            .map_err(|e| e.in_engine("smir"))?,
        EngineKind::WeiAve => unreachable!("weiave is a blend, not an engine"),
    };
    let soft = SoftTargets {
        rows: dataset.unlabeled_idx.clone(),
        values,
        engine,
    };
    soft.validate()?;
    Ok(soft)
}

/// Assemble weiave targets from already-computed engine outputs (each
/// aligned with `dataset.unlabeled_idx`), so callers that also want engine
/// diagnostics run each engine once.
pub fn assemble_weiave_from(
    dataset: &PatchDataset,
    manif: &Array2<f64>,
    safer: &Array2<f64>,
    smir: &Array2<f64>,
    mode: WeiAveMode,
    unlabeled_weight: f64,
) -> ExtendedTargets {
    let l = dataset.labeled_idx.len();
    let u = dataset.unlabeled_idx.len();
    let mut rows = dataset.labeled_idx.clone();
    rows.extend_from_slice(&dataset.unlabeled_idx);
    let mut weights = vec![1.0; l];
    weights.extend(std::iter::repeat(unlabeled_weight).take(u));
    let payload = match mode {
        WeiAveMode::Targets => {
            let blended = harmonic_rows(manif, safer, smir);
            TargetPayload::Single(stack_extended(dataset, &blended))
        }
        WeiAveMode::Losses => TargetPayload::HarmonicLosses {
            manif: stack_extended(dataset, manif),
            safer: stack_extended(dataset, safer),
            smir: stack_extended(dataset, smir),
        },
    };
    ExtendedTargets {
        kind: LossKind::WeiAve,
        rows,
        weights,
        payload,
    }
}

fn stack_extended(dataset: &PatchDataset, soft: &Array2<f64>) -> Array2<f64> {
    let l = dataset.labeled_idx.len();
    let u = dataset.unlabeled_idx.len();
    let c = dataset.num_classes;
    let mut values = Array2::zeros((l + u, c));
    for i in 0..l {
        values.row_mut(i).assign(&dataset.labeled_targets.row(i));
    }
    for i in 0..u {
        values.row_mut(l + i).assign(&soft.row(i));
    }
    values
}

/// Build the target matrix for the requested loss kind. SSL engines run on
/// the frozen embeddings; with an empty unlabeled set every kind collapses
/// to the labeled one-hot block and the losses coincide with plain MSE/MAE.
pub fn assemble_targets(
    kind: LossKind,
    dataset: &PatchDataset,
    embeddings: &ArrayView2<f64>,
    params: &SslParams,
    seed: u64,
) -> Result<ExtendedTargets> {
    if embeddings.nrows() != dataset.num_rows() {
        return Err(Error::invalid("embeddings must cover every dataset row"));
    }
    let l = dataset.labeled_idx.len();
    let u = dataset.unlabeled_idx.len();
    if !kind.uses_unlabeled() || u == 0 {
        return Ok(ExtendedTargets {
            kind,
            rows: dataset.labeled_idx.clone(),
            weights: vec![1.0; l],
            payload: TargetPayload::Single(dataset.labeled_targets.clone()),
        });
    }
    let mut rows = dataset.labeled_idx.clone();
    rows.extend_from_slice(&dataset.unlabeled_idx);
    let mut weights = vec![1.0; l];
    weights.extend(std::iter::repeat(params.unlabeled_weight).take(u));

    let payload = match kind {
        LossKind::Manif | LossKind::Safer | LossKind::Smir => {
            let engine = match kind {
                LossKind::Manif => EngineKind::Manif,
                LossKind::Safer => EngineKind::Safer,
                _ => EngineKind::Smir,
            };
            let soft = run_engine(engine, dataset, embeddings, params, seed)?;
            TargetPayload::Single(stack_extended(dataset, &soft.values))
        }
        LossKind::WeiAve => {
            let manif = run_engine(EngineKind::Manif, dataset, embeddings, params, seed)?;
            let safer = run_engine(EngineKind::Safer, dataset, embeddings, params, seed)?;
            let smir = run_engine(EngineKind::Smir, dataset, embeddings, params, seed)?;
            match params.weiave_mode {
                WeiAveMode::Targets => {
                    let blended = harmonic_rows(&manif.values, &safer.values, &smir.values);
                    TargetPayload::Single(stack_extended(dataset, &blended))
                }
                WeiAveMode::Losses => TargetPayload::HarmonicLosses {
                    manif: stack_extended(dataset, &manif.values),
                    safer: stack_extended(dataset, &safer.values),
                    smir: stack_extended(dataset, &smir.values),
                },
            }
        }
        LossKind::Mse | LossKind::Mae => unreachable!("handled above"),
    };
    Ok(ExtendedTargets {
        kind,
        rows,
        weights,
        payload,
    })
}

fn mse_value_grad(
    outputs: &ArrayView2<f64>,
    values: &Array2<f64>,
    weights: &[f64],
    sel: &[usize],
) -> (f64, Array2<f64>) {
    let n = outputs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(outputs.raw_dim());
    for (bi, &ti) in sel.iter().enumerate() {
        let w = weights[ti];
        for j in 0..outputs.ncols() {
            let r = outputs[(bi, j)] - values[(ti, j)];
            loss += 0.5 * w * r * r;
            grad[(bi, j)] = w * r / n;
        }
    }
    (loss / n, grad)
}

fn mae_value_grad(
    outputs: &ArrayView2<f64>,
    values: &Array2<f64>,
    weights: &[f64],
    sel: &[usize],
) -> (f64, Array2<f64>) {
    let n = outputs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(outputs.raw_dim());
    for (bi, &ti) in sel.iter().enumerate() {
        let w = weights[ti];
        for j in 0..outputs.ncols() {
            let r = outputs[(bi, j)] - values[(ti, j)];
            loss += w * r.abs();
            // subgradient at an exact kink is taken as 0
            grad[(bi, j)] = w * if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 } / n;
        }
    }
    (loss / n, grad)
}

/// Loss value and its exact gradient with respect to the outputs. `sel`
/// maps each output row to a position in `targets` (so training can feed
/// shuffled mini-batches without copying target rows).
pub fn loss_value_and_grad(
    outputs: &ArrayView2<f64>,
    targets: &ExtendedTargets,
    sel: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if outputs.nrows() != sel.len() {
        return Err(Error::invalid("output/selection length mismatch"));
    }
    if let Some(&bad) = sel.iter().find(|&&t| t >= targets.len()) {
        return Err(Error::invalid(format!("selection {bad} out of range")));
    }
    match (&targets.payload, targets.kind) {
        (TargetPayload::Single(values), kind) => {
            if values.ncols() != outputs.ncols() {
                return Err(Error::invalid("target column mismatch"));
            }
            Ok(match kind {
                LossKind::Mae => mae_value_grad(outputs, values, &targets.weights, sel),
                // every other kind is squared error over its row set
                _ => mse_value_grad(outputs, values, &targets.weights, sel),
            })
        }
        (TargetPayload::HarmonicLosses { manif, safer, smir }, _) => {
            let (lm, gm) = mse_value_grad(outputs, manif, &targets.weights, sel);
            let (lsa, gsa) = mse_value_grad(outputs, safer, &targets.weights, sel);
            let (lsm, gsm) = mse_value_grad(outputs, smir, &targets.weights, sel);
            let guard = 1e-12;
            let inv_sum = 1.0 / (lm + guard) + 1.0 / (lsa + guard) + 1.0 / (lsm + guard);
            let h = 3.0 / inv_sum;
            // dH/dLk = (H^2 / 3) / Lk^2
            let scale = h * h / 3.0;
            let mut grad = gm * (scale / ((lm + guard) * (lm + guard)));
            grad.scaled_add(scale / ((lsa + guard) * (lsa + guard)), &gsa);
            grad.scaled_add(scale / ((lsm + guard) * (lsm + guard)), &gsm);
            Ok((h, grad))
        }
    }
}
