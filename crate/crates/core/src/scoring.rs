//! Client scoring: normalized model divergence, the two-branch utility,
//! per-round latency normalization and the recursive reputation ledger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

pub const DEFAULT_DIVERGENCE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Divergence utility minus normalized latency.
    #[default]
    UtilityLatency,
    /// Local accuracy minus the previous global accuracy.
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub psi_init: f64,
    pub divergence_eps: f64,
    pub mode: ScoreMode,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            lambda: 0.6,
            alpha1: 0.5,
            alpha2: 0.5,
            psi_init: 0.01,
            divergence_eps: DEFAULT_DIVERGENCE_EPS,
            mode: ScoreMode::UtilityLatency,
        }
    }
}

impl ScoreConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            p.push(format!("score.lambda {} not in [0,1]", self.lambda));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            p.push("score.alpha1 and score.alpha2 must be >= 0".into());
        }
        if self.alpha1 + self.alpha2 <= 0.0 {
            p.push("score.alpha1 + score.alpha2 must be > 0".into());
        }
        if !self.psi_init.is_finite() {
            p.push("score.psi_init must be finite".into());
        }
        if !(self.divergence_eps > 0.0) {
            p.push("score.divergence_eps must be > 0".into());
        }
        p
    }
}

/// Mean absolute relative difference between client and global weights.
///
/// Denominators with `|w_j| < eps` are clamped to `eps`.
pub fn divergence(w_client: &ParamVector, w_global: &ParamVector, eps: f64) -> Result<f64> {
    if w_client.len() != w_global.len() {
        return Err(Error::DimensionMismatch {
            context: "divergence",
            expected: w_global.len(),
            actual: w_client.len(),
        });
    }
    if w_global.is_empty() {
        return Err(Error::Empty("weight vector"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("divergence eps must be > 0"));
    }
    let sum: f64 = w_client
        .0
        .iter()
        .zip(&w_global.0)
        .map(|(c, g)| (c - g).abs() / g.abs().max(eps))
        .sum();
    Ok(sum / w_global.len() as f64)
}

/// `e^{-d}` when the global metric improved, `1 - e^{-d}` otherwise.
pub fn utility(d: f64, improved: bool) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid(format!("divergence must be >= 0, got {d}")));
    }
    let e = (-d.abs()).exp();
    Ok(if improved { e } else { 1.0 - e })
}

/// Min-max scaling to `[0,1]`; a constant list maps to 0.5 everywhere.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("latency list"));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::NonFinite("latency list".into()));
    }
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - min) / range).clamp(0.0, 1.0))
        .collect())
}

/// Current reputation `Ψ` of every registered client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationLedger {
    psi: Vec<f64>,
    updates: usize,
}

impl ReputationLedger {
    pub fn new(num_clients: usize, psi_init: f64) -> Self {
        ReputationLedger {
            psi: vec![psi_init; num_clients],
            updates: 0,
        }
    }

    pub fn get(&self, client: usize) -> Result<f64> {
        self.psi.get(client).copied().ok_or(Error::UnknownClient(client))
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// Number of updates applied so far.
    pub fn history_len(&self) -> usize {
        self.updates
    }

    pub fn snapshot(&self) -> &[f64] {
        &self.psi
    }

    fn blend(&mut self, client: usize, instant: f64, lambda: f64) -> Result<f64> {
        let prev = self.get(client)?;
        let next = lambda * instant + (1.0 - lambda) * prev;
        self.psi[client] = next;
        self.updates += 1;
        Ok(next)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} {v} not in [0,1]")))
    }
}

/// `Ψ ← λ(α₁ζ − α₂·latency) + (1−λ)Ψ`.
pub fn reputation_update(
    ledger: &mut ReputationLedger,
    client: usize,
    zeta: f64,
    latency_norm: f64,
    cfg: &ScoreConfig,
) -> Result<f64> {
    check_unit("utility", zeta)?;
    check_unit("normalized latency", latency_norm)?;
    let instant = cfg.alpha1 * zeta - cfg.alpha2 * latency_norm;
    ledger.blend(client, instant, cfg.lambda)
}

/// `Ψ ← λ(A_local − A_global_prev) + (1−λ)Ψ`.
pub fn reputation_update_accuracy(
    ledger: &mut ReputationLedger,
    client: usize,
    acc_local: f64,
    acc_global_prev: f64,
    lambda: f64,
) -> Result<f64> {
    check_unit("local accuracy", acc_local)?;
    check_unit("previous global accuracy", acc_global_prev)?;
    check_unit("lambda", lambda)?;
    ledger.blend(client, acc_local - acc_global_prev, lambda)
}
