//! Least-squares calibration of the accuracy and quality curves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{accuracy_curve, quality_curve, AccuracyCurveParams, QualityParams};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveModel {
    /// Inputs `[e, θ]`, parameters `β1..β5`.
    AccuracyCurve,
    /// Inputs `[d, s]` (or `[x]` with `x = d - γ3·s` precomputed), parameters
    /// `γ1..γ4`. `γ3` is held at its initial value.
    DataQuality,
}

impl CurveModel {
    pub fn param_count(self) -> usize {
        match self {
            CurveModel::AccuracyCurve => 5,
            CurveModel::DataQuality => 4,
        }
    }

    fn free_params(self) -> usize {
        match self {
            CurveModel::AccuracyCurve => 5,
            CurveModel::DataQuality => 3,
        }
    }

    pub fn default_init(self) -> Vec<f64> {
        match self {
            CurveModel::AccuracyCurve => vec![0.5, 0.5, 0.5, 0.01, 2.0],
            CurveModel::DataQuality => vec![5.0, 1.0, 70.0, 0.2],
        }
    }

    /// Evaluates the model with a full parameter vector.
    pub fn eval(self, params: &[f64], inputs: &[f64]) -> f64 {
        match self {
            CurveModel::AccuracyCurve => {
                let acp = AccuracyCurveParams {
                    beta1: params[0],
                    beta2: params[1],
                    beta3: params[2],
                    beta4: params[3],
                    beta5: params[4],
                };
                accuracy_curve(inputs[0], inputs[1], &acp)
            }
            CurveModel::DataQuality => {
                let qp = QualityParams { gamma1: params[0], gamma2: params[1], gamma3: params[2], gamma4: params[3] };
                quality_curve(reduced_input(inputs, params[2]), &qp)
            }
        }
    }

    fn expand(self, free: &[f64], init: &[f64]) -> Vec<f64> {
        match self {
            CurveModel::AccuracyCurve => free.to_vec(),
            CurveModel::DataQuality => vec![free[0], free[1], init[2], free[2]],
        }
    }

    fn free_of(self, full: &[f64]) -> Vec<f64> {
        match self {
            CurveModel::AccuracyCurve => full.to_vec(),
            CurveModel::DataQuality => vec![full[0], full[1], full[3]],
        }
    }
}

fn reduced_input(inputs: &[f64], gamma3: f64) -> f64 {
    match inputs {
        [x] => *x,
        [d, s, ..] => d - gamma3 * s,
        [] => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSample {
    pub inputs: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: CurveModel,
    pub params: Vec<f64>,
    pub rmse: f64,
    pub converged: bool,
    pub starts: usize,
}

const STARTS: usize = 12;
const POLISH_ROUNDS: usize = 4;

/// Minimizes mean squared residual with multi-start Nelder-Mead. Start 0 is
/// `init`; the others perturb it log-normally from `seed`. The best run is
/// then restarted a few times, which keeps the simplex from collapsing early.
pub fn fit_curve(samples: &[FitSample], model: CurveModel, init: &[f64], seed: u64) -> Result<FitResult> {
    if init.len() != model.param_count() {
        return Err(Error::Precondition(format!(
            "{model:?} takes {} parameters, init has {}",
            model.param_count(),
            init.len()
        )));
    }
    if samples.len() < model.free_params() {
        return Err(Error::Precondition(format!(
            "{} samples cannot determine {} parameters",
            samples.len(),
            model.free_params()
        )));
    }
    let arity = match model {
        CurveModel::AccuracyCurve => 2..=2,
        CurveModel::DataQuality => 1..=2,
    };
    for s in samples {
        if !arity.contains(&s.inputs.len()) || !s.target.is_finite() {
            return Err(Error::Precondition(format!("malformed {model:?} sample {s:?}")));
        }
        if model == CurveModel::DataQuality && !(reduced_input(&s.inputs, init[2]) > 0.0) {
            return Err(Error::Precondition(format!(
                "quality sample {:?} has non-positive d - γ3·s",
                s.inputs
            )));
        }
    }

    let mse = |free: &[f64]| {
        let full = model.expand(free, init);
        samples
            .iter()
            .map(|s| (model.eval(&full, &s.inputs) - s.target).powi(2))
            .sum::<f64>()
            / samples.len() as f64
    };
    let steps = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| if *v == 0.0 { 1e-3 } else { 0.1 * v }).collect() };
    let opts = NelderMeadOptions::default();

    let base = model.free_of(init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0f64, 0.3).unwrap();
    let mut best = nelder_mead(mse, &base, &steps(&base), opts);
    for _ in 1..STARTS {
        let start: Vec<f64> = base.iter().map(|v| v * jitter.sample(&mut rng).exp()).collect();
        let run = nelder_mead(mse, &start, &steps(&start), opts);
        if run.fx < best.fx {
            best = run;
        }
    }
    for _ in 0..POLISH_ROUNDS {
        let run = nelder_mead(mse, &best.x, &steps(&best.x), opts);
        let improved = run.fx < best.fx;
        if run.fx <= best.fx {
            best = run;
        }
        if !improved {
            break;
        }
    }
    if !best.converged {
        log::warn!("{model:?} fit stopped at the iteration cap; returning best parameters found");
    }
    Ok(FitResult {
        model,
        params: model.expand(&best.x, init),
        rmse: best.fx.max(0.0).sqrt(),
        converged: best.converged,
        starts: STARTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy_samples(acp: &AccuracyCurveParams) -> Vec<FitSample> {
        let mut out = Vec::new();
        for t in [0.1, 0.4, 0.7, 1.0] {
            for i in 1..=15 {
                let e = 2000.0 * i as f64;
                out.push(FitSample { inputs: vec![e, t], target: accuracy_curve(e, t, acp) });
            }
        }
        out
    }

    #[test]
    fn recovers_reference_accuracy_curve() {
        let acp = AccuracyCurveParams::default();
        let samples = accuracy_samples(&acp);
        let fit = fit_curve(&samples, CurveModel::AccuracyCurve, &CurveModel::AccuracyCurve.default_init(), 1).unwrap();
        assert!(fit.rmse < 1e-3, "{fit:?}");
    }

    #[test]
    fn constant_targets_fit_exactly() {
        let samples: Vec<FitSample> = (1..20)
            .map(|i| FitSample { inputs: vec![1000.0 * i as f64, 0.5], target: 0.7 })
            .collect();
        let fit = fit_curve(&samples, CurveModel::AccuracyCurve, &CurveModel::AccuracyCurve.default_init(), 2).unwrap();
        assert!(fit.rmse < 1e-3, "{fit:?}");
    }

    #[test]
    fn underdetermined_input_is_rejected() {
        let samples = vec![
            FitSample { inputs: vec![1000.0, 0.5], target: 0.6 },
            FitSample { inputs: vec![2000.0, 0.5], target: 0.7 },
        ];
        assert!(matches!(
            fit_curve(&samples, CurveModel::AccuracyCurve, &CurveModel::AccuracyCurve.default_init(), 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn recovers_quality_curve_on_reduced_input() {
        let qp = QualityParams::default();
        let samples: Vec<FitSample> = (1..=30)
            .map(|i| {
                let x = 40.0 * (i * i) as f64;
                FitSample { inputs: vec![x], target: quality_curve(x, &qp) }
            })
            .collect();
        let fit = fit_curve(&samples, CurveModel::DataQuality, &CurveModel::DataQuality.default_init(), 5).unwrap();
        assert!(fit.rmse < 1e-3, "{fit:?}");
        assert_eq!(fit.params[2], 70.0);
    }
}
