//! Optimal contract menu.
//!
//! With the IR constraint binding at the lowest level and the downward IC
//! constraints binding between neighbours, rewards become a closed-form
//! function of efforts and the publisher's expected payment collapses to
//! `Σ l_n·e_n + const`. The remaining problem separates into one scalar
//! maximization per level, solved here by a coarse grid scan refined with
//! golden-section search. The accuracy curve is sigmoidal in effort, so a
//! pure local search could stall on the wrong hump.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy_curve, AccuracyCurveParams, MarketModel};
use crate::error::{Error, Result};
use crate::optim::golden_section_max;

/// Marginal payment coefficient of each level's effort.
pub fn l_coeffs(market: &MarketModel) -> Vec<f64> {
    let n = market.levels();
    let k = market.cost_rate();
    let mut l = vec![0.0; n];
    let mut tail = 0.0; // Σ_{i>n} θ_i p_i
    for i in (0..n).rev() {
        l[i] = if i == n - 1 {
            k * market.p[i]
        } else {
            k * market.p[i] + k * (1.0 / market.theta[i] - 1.0 / market.theta[i + 1]) * tail
        };
        tail += market.theta[i] * market.p[i];
    }
    l
}

/// Rewards that make IR bind at level 1 and every downward IC bind.
pub fn rewards_from_efforts(efforts: &[f64], market: &MarketModel) -> Result<Vec<f64>> {
    if efforts.len() != market.levels() {
        return Err(Error::Config(format!(
            "{} efforts for a {}-level market",
            efforts.len(),
            market.levels()
        )));
    }
    if let Some(e) = efforts.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Precondition(format!("efforts must be positive, got {e}")));
    }
    if let Some(i) = efforts.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Contract(format!(
            "effort decreases from level {} to {}; higher levels must not work less",
            i + 1,
            i + 2
        )));
    }
    let k = market.cost_rate();
    let base = (k * efforts[0] + market.e_com) / market.theta[0];
    let mut rewards = Vec::with_capacity(efforts.len());
    let mut increments = 0.0;
    for n in 0..efforts.len() {
        if n > 0 {
            increments += k * (efforts[n] - efforts[n - 1]) / market.theta[n];
        }
        rewards.push(increments + base);
    }
    Ok(rewards)
}

/// Level-`level` (1-based) share of the publisher objective after the
/// rewards have been substituted out:
/// `p_n·[λ1·q(e, θ_n) + λ2·ln(T_max - T_com - e·c/f)] - l_n·e`.
pub fn per_level_objective(
    effort: f64,
    level: usize,
    l: &[f64],
    market: &MarketModel,
    acp: &AccuracyCurveParams,
) -> Result<f64> {
    if level == 0 || level > market.levels() || l.len() != market.levels() {
        return Err(Error::Config(format!("level {level} outside 1..={}", market.levels())));
    }
    let slack = market.t_max - market.t_com - effort * market.c / market.f;
    if !(effort > 0.0) || !(slack > 0.0) {
        return Err(Error::Domain(format!(
            "effort {effort} violates the time budget (slack {slack})"
        )));
    }
    let i = level - 1;
    let q = accuracy_curve(effort, market.theta[i], acp);
    Ok(market.p[i] * (market.lambda1 * q + market.lambda2 * slack.ln()) - l[i] * effort)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Coarse scan resolution.
    pub grid_points: usize,
    pub min_effort: f64,
    /// Fraction of `T_max` kept clear of the logarithm's pole.
    pub edge_margin: f64,
    pub golden_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { grid_points: 2048, min_effort: 1.0, edge_margin: 1e-6, golden_tol: 1e-9 }
    }
}

impl SolverOptions {
    /// Effort search interval `[e_min, e_max]` for `market`.
    pub fn bounds(&self, market: &MarketModel) -> (f64, f64) {
        let delta = self.edge_margin * market.t_max;
        let hi = (market.t_max - market.t_com - delta) * market.f / market.c;
        (self.min_effort, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractEntry {
    pub level: usize,
    pub effort: f64,
    pub reward: f64,
    /// `per_level_objective` at the chosen effort.
    pub objective_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Full publisher utility of the menu.
    pub objective: f64,
    pub grid_points: usize,
    pub grid_step: f64,
    pub effort_bounds: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractMenu {
    pub entries: Vec<ContractEntry>,
    pub diagnostics: SolverDiagnostics,
}

impl ContractMenu {
    pub fn efforts(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.effort).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.reward).collect()
    }

    pub fn levels(&self) -> usize {
        self.entries.len()
    }
}

pub fn solve_contract(market: &MarketModel, acp: &AccuracyCurveParams) -> Result<ContractMenu> {
    solve_contract_with(market, acp, &SolverOptions::default())
}

fn solve_level(
    level: usize,
    l: &[f64],
    market: &MarketModel,
    acp: &AccuracyCurveParams,
    opts: &SolverOptions,
) -> (f64, f64) {
    let (lo, hi) = opts.bounds(market);
    let m = opts.grid_points.max(3);
    let step = (hi - lo) / (m - 1) as f64;
    let obj = |e: f64| per_level_objective(e, level, l, market, acp).unwrap_or(f64::NEG_INFINITY);
    let grid = |i: usize| if i + 1 == m { hi } else { lo + step * i as f64 };

    let (best_i, best_v) = (0..m)
        .map(|i| (i, obj(grid(i))))
        .fold((0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let a = grid(best_i.saturating_sub(1));
    let b = grid((best_i + 1).min(m - 1));
    let (x, v) = golden_section_max(obj, a, b, opts.golden_tol * (1.0 + hi), 200);
    if v >= best_v {
        (x, v)
    } else {
        (grid(best_i), best_v)
    }
}

/// Solves each level independently, checks that efforts come out
/// non-decreasing, and derives rewards in closed form.
pub fn solve_contract_with(
    market: &MarketModel,
    acp: &AccuracyCurveParams,
    opts: &SolverOptions,
) -> Result<ContractMenu> {
    market.validate()?;
    acp.validate()?;
    let (lo, hi) = opts.bounds(market);
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "time budget leaves no feasible effort above {lo} (upper bound {hi})"
        )));
    }
    let l = l_coeffs(market);
    let solved: Vec<(f64, f64)> = (1..=market.levels())
        .into_par_iter()
        .map(|n| solve_level(n, &l, market, acp, opts))
        .collect();

    let mut efforts: Vec<f64> = solved.iter().map(|s| s.0).collect();
    let tol = opts.golden_tol * (1.0 + hi) * 10.0;
    for n in 1..efforts.len() {
        if efforts[n] < efforts[n - 1] {
            if efforts[n - 1] - efforts[n] > tol {
                return Err(Error::Solver(format!(
                    "optimal effort falls from {} at level {} to {} at level {}; \
                     the menu would not be monotone in quality",
                    efforts[n - 1],
                    n,
                    efforts[n],
                    n + 1
                )));
            }
            // within search tolerance of a tie
            efforts[n] = efforts[n - 1];
        }
    }

    let rewards = rewards_from_efforts(&efforts, market)?;
    let mut entries = Vec::with_capacity(efforts.len());
    for (i, (&e, &r)) in efforts.iter().zip(&rewards).enumerate() {
        entries.push(ContractEntry {
            level: i + 1,
            effort: e,
            reward: r,
            objective_share: per_level_objective(e, i + 1, &l, market, acp)?,
        });
    }
    let constant = market.e_com / market.theta[0]
        * market.theta.iter().zip(&market.p).map(|(t, p)| t * p).sum::<f64>();
    let objective = entries.iter().map(|e| e.objective_share).sum::<f64>() - constant;
    let m = opts.grid_points.max(3);
    Ok(ContractMenu {
        entries,
        diagnostics: SolverDiagnostics {
            objective,
            grid_points: m,
            grid_step: (hi - lo) / (m - 1) as f64,
            effort_bounds: (lo, hi),
        },
    })
}

/// Publisher utility `Σ p_n·[λ1·q + λ2·ln(T_max - T_n) - θ_n·R_n]` evaluated
/// directly from a menu.
pub fn publisher_utility(menu: &ContractMenu, market: &MarketModel, acp: &AccuracyCurveParams) -> f64 {
    menu.entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let t = market.t_com + e.effort * market.c / market.f;
            market.p[i]
                * (market.lambda1 * accuracy_curve(e.effort, market.theta[i], acp)
                    + market.lambda2 * (market.t_max - t).ln()
                    - market.theta[i] * e.reward)
        })
        .sum()
}

/// Outcome of checking a menu against every IR and IC constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    /// `θ_n·R_n - ξ·e_n·c·f² - E_com` per level.
    pub ir: Vec<f64>,
    /// `ic[n][m]`: utility of a level-n client taking its own contract minus
    /// taking contract m.
    pub ic: Vec<Vec<f64>>,
    pub binding_ir: Vec<bool>,
    /// Whether the IC constraint towards the level below binds (false at level 1).
    pub binding_ic_down: Vec<bool>,
    pub violations: Vec<String>,
    pub tolerance: f64,
}

impl ContractReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks IR and pairwise IC with a tolerance of `1e-9` relative to the
/// largest reward-weighted term in the menu.
pub fn verify_contract(menu: &ContractMenu, market: &MarketModel) -> ContractReport {
    let scale = menu
        .entries
        .iter()
        .map(|e| e.reward.abs())
        .fold(1.0, f64::max);
    verify_contract_with_tol(menu, market, 1e-9 * scale)
}

pub fn verify_contract_with_tol(menu: &ContractMenu, market: &MarketModel, tol: f64) -> ContractReport {
    let n = menu.entries.len().min(market.levels());
    let k = market.cost_rate();
    let utility = |typ: usize, pick: usize| {
        let e = &menu.entries[pick];
        market.theta[typ] * e.reward - k * e.effort - market.e_com
    };
    let mut violations = Vec::new();
    if menu.entries.len() != market.levels() {
        violations.push(format!(
            "menu has {} entries for a {}-level market",
            menu.entries.len(),
            market.levels()
        ));
    }
    let ir: Vec<f64> = (0..n).map(|i| utility(i, i)).collect();
    for (i, v) in ir.iter().enumerate() {
        if *v < -tol {
            violations.push(format!("IR violated at level {}: utility {v}", i + 1));
        }
    }
    let mut ic = vec![vec![0.0; n]; n];
    for a in 0..n {
        let own = utility(a, a);
        for b in 0..n {
            ic[a][b] = own - utility(a, b);
            if a != b && ic[a][b] < -tol {
                violations.push(format!(
                    "IC violated: level {} prefers contract {} by {}",
                    a + 1,
                    b + 1,
                    -ic[a][b]
                ));
            }
        }
    }
    let binding_ir = ir.iter().map(|v| v.abs() <= tol).collect();
    let binding_ic_down = (0..n).map(|a| a > 0 && ic[a][a - 1].abs() <= tol).collect();
    ContractReport { ir, ic, binding_ir, binding_ic_down, violations, tolerance: tol }
}

/// One row of the published menu document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub n: usize,
    pub theta: f64,
    pub p: f64,
    pub effort: f64,
    pub reward: f64,
    pub objective_share: f64,
    pub binding: Binding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub ir: bool,
    pub ic_down: bool,
}

/// JSON form of a solved menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractDocument {
    pub levels: Vec<LevelRow>,
    pub diagnostics: SolverDiagnostics,
    pub verified: bool,
    pub violations: Vec<String>,
}

impl ContractDocument {
    pub fn new(menu: &ContractMenu, market: &MarketModel, report: &ContractReport) -> Self {
        let levels = menu
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| LevelRow {
                n: e.level,
                theta: market.theta[i],
                p: market.p[i],
                effort: e.effort,
                reward: e.reward,
                objective_share: e.objective_share,
                binding: Binding { ir: report.binding_ir[i], ic_down: report.binding_ic_down[i] },
            })
            .collect();
        Self {
            levels,
            diagnostics: menu.diagnostics.clone(),
            verified: report.ok(),
            violations: report.violations.clone(),
        }
    }

    pub fn menu(&self) -> ContractMenu {
        ContractMenu {
            entries: self
                .levels
                .iter()
                .map(|r| ContractEntry {
                    level: r.n,
                    effort: r.effort,
                    reward: r.reward,
                    objective_share: r.objective_share,
                })
                .collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}
