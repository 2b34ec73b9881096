//! Reference training schemes: synchronous FedAvg, FedProx and centralized
//! SGD over the pooled client data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asyncsim::SummaryRow;
use crate::data::{ClientDataset, Dataset, PooledView};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, sgd_step_in_place, train_epochs, train_epochs_proximal, weighted_average, Batch, Model, Proximal,
    Samples, TrainConfig,
};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    LocalSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: Algorithm,
    pub local_epochs: usize,
    /// Proximal coefficient; only used by FedProx.
    pub prox_mu: f64,
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self { algorithm, local_epochs: 10, prox_mu: 0.01, rounds: 30, lr: 0.01, batch_size: 20, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::Config("local epochs, rounds and batch size must be positive".into()));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Config(format!("prox_mu must be >= 0, got {}", self.prox_mu)));
        }
        Ok(())
    }

    fn train_config(&self, stream: u64, round: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: seeds::derive(self.seed, seeds::TRAINING, stream, round as u64),
        }
    }
}

/// Stream id for the single pooled learner.
const POOLED_STREAM: u64 = u64::MAX;

fn synchronous_round(
    global: &Model,
    pool: &Dataset,
    clients: &[ClientDataset],
    cfg: &BaselineConfig,
    round: usize,
    mu: Option<f64>,
) -> Result<Model> {
    if clients.is_empty() {
        return Err(Error::Precondition("a synchronous round needs at least one client".into()));
    }
    let locals = clients
        .par_iter()
        .map(|c| {
            let tc = cfg.train_config(c.client_id as u64, round);
            let view = c.view(pool);
            match mu {
                None => train_epochs(global, &view, tc),
                Some(mu) => train_epochs_proximal(global, &view, tc, Proximal { anchor: global, mu }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = clients.iter().map(|c| c.size()).sum();
    let weighted: Vec<(&Model, f64)> = locals
        .iter()
        .zip(clients)
        .map(|(t, c)| (&t.model, c.size() as f64 / total as f64))
        .collect();
    weighted_average(&weighted)
}

/// Every client trains `local_epochs` from `global`; the results are
/// averaged with weights `d_k / D`.
pub fn fedavg_round(
    global: &Model,
    pool: &Dataset,
    clients: &[ClientDataset],
    cfg: &BaselineConfig,
    round: usize,
) -> Result<Model> {
    synchronous_round(global, pool, clients, cfg, round, None)
}

/// FedAvg round whose local objective adds `mu/2 · ||w - global||²`.
pub fn fedprox_round(
    global: &Model,
    pool: &Dataset,
    clients: &[ClientDataset],
    cfg: &BaselineConfig,
    round: usize,
) -> Result<Model> {
    synchronous_round(global, pool, clients, cfg, round, Some(cfg.prox_mu))
}

/// One SGD step on the proximally regularized loss.
pub fn fedprox_step(model: &Model, anchor: &Model, batch: &Batch, lr: f64, mu: f64) -> Result<Model> {
    if !(mu >= 0.0) {
        return Err(Error::Precondition(format!("proximal mu must be >= 0, got {mu}")));
    }
    if model.layer_dims() != anchor.layer_dims() {
        return Err(Error::Config("anchor has a different architecture".into()));
    }
    model.check_input(batch)?;
    model.check_labels(batch)?;
    let mut next = model.clone();
    let loss = sgd_step_in_place(&mut next, batch, lr, Some(Proximal { anchor, mu }));
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(next)
}

/// Centralized training on the union of all client shards, evaluated on
/// `test` after every round of `local_epochs` epochs.
pub fn local_sgd_run(
    initial: &Model,
    pool: &Dataset,
    clients: &[ClientDataset],
    test: &Dataset,
    cfg: &BaselineConfig,
) -> Result<(Model, Vec<SummaryRow>)> {
    let pooled = PooledView::new(pool, clients);
    if pooled.is_empty() {
        return Err(Error::Precondition("local SGD needs a non-empty pool".into()));
    }
    let mut model = initial.clone();
    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        model = train_epochs(&model, &pooled, cfg.train_config(POOLED_STREAM, round))
            .map_err(|e| e.in_round(round))?
            .model;
        let eval = evaluate(&model, test)?;
        rows.push(SummaryRow { round, test_loss: eval.loss, test_accuracy: eval.accuracy, admitted_count: 1 });
    }
    Ok((model, rows))
}

/// Runs the configured algorithm for `cfg.rounds` rounds.
pub fn run_baseline(
    initial: &Model,
    pool: &Dataset,
    clients: &[ClientDataset],
    test: &Dataset,
    cfg: &BaselineConfig,
) -> Result<(Model, Vec<SummaryRow>)> {
    cfg.validate()?;
    let round_fn = match cfg.algorithm {
        Algorithm::LocalSgd => return local_sgd_run(initial, pool, clients, test, cfg),
        Algorithm::FedAvg => fedavg_round,
        Algorithm::FedProx => fedprox_round,
    };
    let mut model = initial.clone();
    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        model = round_fn(&model, pool, clients, cfg, round).map_err(|e| e.in_round(round))?;
        let eval = evaluate(&model, test)?;
        rows.push(SummaryRow {
            round,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            admitted_count: clients.len(),
        });
    }
    Ok((model, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn fixture() -> (Dataset, Vec<ClientDataset>, Dataset, Model) {
        let spec = SyntheticSpec { dim: 6, ..SyntheticSpec::default() };
        let pool = spec.generate(300, 0).unwrap();
        let test = spec.generate(100, 1).unwrap();
        let clients = vec![
            ClientDataset::from_parent(0, &pool, (0..60).collect()),
            ClientDataset::from_parent(1, &pool, (60..200).collect()),
            ClientDataset::from_parent(2, &pool, (200..300).collect()),
        ];
        (pool, clients, test, Model::init(&[6, 16, 10], 4).unwrap())
    }

    fn cfg(algorithm: Algorithm) -> BaselineConfig {
        BaselineConfig { rounds: 3, local_epochs: 2, lr: 0.1, seed: 9, ..BaselineConfig::new(algorithm) }
    }

    #[test]
    fn single_client_round_is_plain_training() {
        let (pool, clients, _, init) = fixture();
        let c = cfg(Algorithm::FedAvg);
        let one = &clients[1..2];
        let got = fedavg_round(&init, &pool, one, &c, 4).unwrap();
        let want = train_epochs(&init, &one[0].view(&pool), c.train_config(1, 4)).unwrap().model;
        assert_eq!(got, want);
    }

    #[test]
    fn identical_clients_average_to_either() {
        let (pool, _, _, init) = fixture();
        let c = cfg(Algorithm::FedAvg);
        // Same client id means the same training stream.
        let twins = vec![
            ClientDataset::from_parent(0, &pool, (0..50).collect()),
            ClientDataset::from_parent(0, &pool, (0..50).collect()),
        ];
        let got = fedavg_round(&init, &pool, &twins, &c, 0).unwrap();
        let single = fedavg_round(&init, &pool, &twins[..1], &c, 0).unwrap();
        for (a, b) in got.params().iter().zip(single.params()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn prox_step_reductions() {
        let (pool, clients, _, init) = fixture();
        let batch = Batch::gather(&clients[0].view(&pool), &(0..20).collect::<Vec<_>>()).unwrap();
        let other = Model::init(&[6, 16, 10], 5).unwrap();
        let plain = crate::model::sgd_step(&init, &batch, 0.1).unwrap();
        assert_eq!(fedprox_step(&init, &other, &batch, 0.1, 0.0).unwrap(), plain);
        assert_eq!(fedprox_step(&init, &init, &batch, 0.1, 0.5).unwrap(), plain);
        assert_eq!(fedprox_step(&init, &other, &batch, 0.0, 0.5).unwrap(), init);
        assert_ne!(fedprox_step(&init, &other, &batch, 0.1, 0.5).unwrap(), plain);
        assert!(fedprox_step(&init, &other, &batch, 0.1, -1.0).is_err());
    }

    #[test]
    fn fedprox_without_prox_is_fedavg() {
        let (pool, clients, test, init) = fixture();
        let avg = run_baseline(&init, &pool, &clients, &test, &cfg(Algorithm::FedAvg)).unwrap();
        let prox_cfg = BaselineConfig { prox_mu: 0.0, ..cfg(Algorithm::FedProx) };
        let prox = run_baseline(&init, &pool, &clients, &test, &prox_cfg).unwrap();
        assert_eq!(avg.0, prox.0);
        assert_eq!(avg.1, prox.1);
    }

    #[test]
    fn local_sgd_composes_training_and_evaluation() {
        let (pool, clients, test, init) = fixture();
        let c = cfg(Algorithm::LocalSgd);
        let (model, rows) = run_baseline(&init, &pool, &clients, &test, &c).unwrap();
        let pooled = PooledView::new(&pool, &clients);
        let mut m = init.clone();
        for r in 0..c.rounds {
            m = train_epochs(&m, &pooled, c.train_config(POOLED_STREAM, r)).unwrap().model;
            assert_eq!(rows[r].test_accuracy, evaluate(&m, &test).unwrap().accuracy);
        }
        assert_eq!(model, m);
        assert!(local_sgd_run(&init, &pool, &[], &test, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig { prox_mu: -0.1, ..cfg(Algorithm::FedProx) }.validate().is_err());
        assert!(BaselineConfig { local_epochs: 0, ..cfg(Algorithm::FedAvg) }.validate().is_err());
        let json = serde_json::to_string(&Algorithm::LocalSgd).unwrap();
        assert_eq!(json, "\"local_sgd\"");
        assert_eq!(serde_json::to_string(&Algorithm::FedAvg).unwrap(), "\"fedavg\"");
    }
}
