//! Contract-theory incentive design: client quality levels, effort, utility
//! functions, the publisher's optimal contract menu and the curve fits that
//! calibrate the quality and accuracy models.

mod contract;
mod fit;

pub use contract::{
    l_coeffs, per_level_objective, publisher_utility, rewards_from_efforts, solve_contract,
    solve_contract_with, verify_contract, verify_contract_with_tol, ContractDocument,
    ContractEntry, ContractMenu, ContractReport, LevelRow, SolverDiagnostics, SolverOptions,
};
pub use fit::{fit_curve, CurveModel, FitResult, FitSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest quality a client can be assigned; also used when the quality
/// model is undefined for tiny or highly skewed shards.
pub const THETA_FLOOR: f64 = 0.01;

/// Coefficients of `θ = 1 - γ1·exp(-γ2·(d - γ3·s)^γ4)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
}

impl Default for QualityParams {
    fn default() -> Self {
        Self { gamma1: 10.559, gamma2: 1.803, gamma3: 70.0, gamma4: 0.155 }
    }
}

impl QualityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma2 > 0.0 && self.gamma4 > 0.0) {
            return Err(Error::Config(format!("gamma2 and gamma4 must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.gamma1, self.gamma2, self.gamma3, self.gamma4]
    }
}

/// Coefficients of `q(e, θ) = β1 + β2·θ - β3·exp(-β4·(e/1000)^β5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurveParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
}

impl Default for AccuracyCurveParams {
    fn default() -> Self {
        Self { beta1: 0.459, beta2: 0.432, beta3: 0.459, beta4: 0.009, beta5: 2.436 }
    }
}

impl AccuracyCurveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta3 >= 0.0 && self.beta4 > 0.0 && self.beta5 > 0.0) {
            return Err(Error::Config(format!("need beta3 >= 0, beta4 > 0, beta5 > 0: {self:?}")));
        }
        Ok(())
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.beta1, self.beta2, self.beta3, self.beta4, self.beta5]
    }
}

/// The publisher's view of the client market: level qualities and their
/// probabilities plus the (standardized) cost and time constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    /// Representative quality of each level, strictly increasing in `(0, 1]`.
    pub theta: Vec<f64>,
    /// Probability of a client belonging to each level.
    pub p: Vec<f64>,
    /// Effective capacitance coefficient `ξ`.
    pub xi: f64,
    /// CPU cycles per sample.
    pub c: f64,
    /// CPU frequency.
    pub f: f64,
    pub t_com: f64,
    pub e_com: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub t_max: f64,
}

impl MarketModel {
    /// `levels` equal-width quality buckets on `(0, 1]` with uniform level
    /// probabilities and the reference simulation constants.
    pub fn uniform(levels: usize) -> Self {
        Self {
            theta: (1..=levels).map(|n| n as f64 / levels as f64).collect(),
            p: vec![1.0 / levels as f64; levels],
            xi: 2.0,
            c: 5.0,
            f: 1.0,
            t_com: 10.0,
            e_com: 20.0,
            lambda1: 5_000_000.0,
            lambda2: 400_000.0,
            t_max: 100_000.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.theta.len()
    }

    /// `ξ·c·f²`, the energy cost of one unit of effort.
    pub fn cost_rate(&self) -> f64 {
        self.xi * self.c * self.f * self.f
    }

    /// Largest effort meeting the time budget, `(T_max - T_com)·f/c`.
    pub fn effort_limit(&self) -> f64 {
        (self.t_max - self.t_com) * self.f / self.c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.theta.len();
        if n == 0 || self.p.len() != n {
            return Err(Error::Config(format!(
                "market needs matching theta/p vectors, got {} and {}",
                n,
                self.p.len()
            )));
        }
        if self.theta.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("every theta must lie in (0, 1]".into()));
        }
        if self.theta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("theta must be strictly increasing".into()));
        }
        let sum: f64 = self.p.iter().sum();
        if self.p.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("level probabilities must be a distribution (sum {sum})")));
        }
        if !(self.xi > 0.0 && self.c > 0.0 && self.f > 0.0) {
            return Err(Error::Config("xi, c and f must be positive".into()));
        }
        if !(self.t_com >= 0.0 && self.e_com >= 0.0 && self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("time, energy and weight constants must be non-negative".into()));
        }
        if !(self.t_max > self.t_com) {
            return Err(Error::Config(format!("T_max {} must exceed T_com {}", self.t_max, self.t_com)));
        }
        Ok(())
    }
}

/// `1 - γ1·exp(-γ2·x^γ4)` with no clamping; `NaN` for `x < 0`.
pub fn quality_curve(x: f64, qp: &QualityParams) -> f64 {
    1.0 - qp.gamma1 * (-qp.gamma2 * x.powf(qp.gamma4)).exp()
}

/// Data quality of a shard with `d` samples at label-distance `s`, clamped
/// to `[THETA_FLOOR, 1]`.
pub fn data_quality(d: usize, s: f64, qp: &QualityParams) -> f64 {
    let base = d as f64 - qp.gamma3 * s;
    if base <= 0.0 {
        log::warn!("quality base d - γ3·s = {base} is not positive (d={d}, s={s}); using floor {THETA_FLOOR}");
        return THETA_FLOOR;
    }
    let theta = quality_curve(base, qp);
    if !(THETA_FLOOR..=1.0).contains(&theta) {
        log::warn!("quality {theta} for d={d}, s={s} clamped into [{THETA_FLOOR}, 1]");
    }
    theta.clamp(THETA_FLOOR, 1.0)
}

/// 1-based level: the smallest `n` with `theta <= θ_n`. Values above the top
/// boundary are clamped to the last level.
pub fn level_of(theta: f64, market: &MarketModel) -> usize {
    match market.theta.iter().position(|&t| theta <= t) {
        Some(i) => i + 1,
        None => {
            log::warn!("quality {theta} above the top level boundary; assigning level {}", market.levels());
            market.levels()
        }
    }
}

/// Expected test accuracy after `e` units of effort by a level-`θ` client.
pub fn accuracy_curve(e: f64, theta: f64, acp: &AccuracyCurveParams) -> f64 {
    acp.beta1 + acp.beta2 * theta - acp.beta3 * (-acp.beta4 * (1e-3 * e).powf(acp.beta5)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochAssignment {
    pub tau: usize,
    /// `floor(e/d)` was zero and has been raised to one.
    pub clamped: bool,
}

/// Local epochs `floor(e_n / d_k)`, never below one.
pub fn local_epochs(effort: f64, d: usize) -> EpochAssignment {
    let raw = if d == 0 { 0.0 } else { (effort / d as f64).floor() };
    if raw < 1.0 {
        EpochAssignment { tau: 1, clamped: true }
    } else {
        EpochAssignment { tau: raw as usize, clamped: false }
    }
}

/// Utility of a level-`level` client holding that level's contract after
/// realizing `tau · d` units of effort.
pub fn client_utility(level: usize, menu: &ContractMenu, market: &MarketModel, tau: usize, d: usize) -> f64 {
    let entry = &menu.entries[level - 1];
    market.theta[level - 1] * entry.reward - (tau * d) as f64 * market.cost_rate() - market.e_com
}
