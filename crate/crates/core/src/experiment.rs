//! Experiment configuration, presets and end-to-end runners.
//!
//! A run is fully determined by an [`ExperimentConfig`]. All randomness is
//! derived from `seed` through [`crate::seeds::derive`]:
//!
//! | stream      | used for                                   |
//! |-------------|--------------------------------------------|
//! | `DATA`      | synthetic train (a=0) and test (a=1) draws |
//! | `HOLDOUT`   | validation split of the training pool      |
//! | `PARTITION` | client quantities and class mixes          |
//! | `ATTACKER`  | attacker choice (a=0) and label flips (a=k)|
//! | `DELAY`     | per-client computation delays              |
//! | `INIT`      | initial model weights                      |
//! | `TRAINING`  | local training, per client and issue round |

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::asyncsim::{
    sample_delays, settle_rewards, AccessParams, ClientState, DelayModel, RoundLedger, Settlement, SimSettings,
    Simulation, SimulationInputs, SummaryRow, TimingParams,
};
use crate::baselines::{run_baseline, Algorithm, BaselineConfig};
use crate::data::{emd, flip_labels, load_idx, partition, uniform_benchmark, ClientDataset, Dataset, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::incentive::{
    data_quality, level_of, solve_contract_with, verify_contract, AccuracyCurveParams, ContractMenu, ContractReport,
    MarketModel, QualityParams, SolverOptions,
};
use crate::model::{Model, Samples};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        train_samples: usize,
        test_samples: usize,
    },
    /// IDX files, optionally gzip-compressed. `train_subset` keeps only the
    /// first that many training samples.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySettings {
    pub lo: f64,
    pub hi: f64,
    pub delta_t: f64,
    pub model: DelayModel,
}

impl Default for DelaySettings {
    fn default() -> Self {
        let tp = TimingParams::default();
        Self { lo: tp.delay_lo, hi: tp.delay_hi, delta_t: tp.delta_t, model: tp.delay_model }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Local epochs per round for the synchronous baselines.
    pub baseline_epochs: usize,
    pub prox_mu: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self { lr: 0.01, batch_size: 20, hidden: vec![64, 32], baseline_epochs: 10, prox_mu: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub attackers: usize,
    pub flip_fraction: f64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self { attackers: 0, flip_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub partition: PartitionSpec,
    pub validation_fraction: f64,
    pub market: MarketModel,
    pub accuracy: AccuracyCurveParams,
    pub quality: QualityParams,
    pub solver: SolverOptions,
    pub delay: DelaySettings,
    pub access: AccessParams,
    pub training: TrainingSettings,
    pub attack: AttackSettings,
    pub rounds: usize,
    pub seed: u64,
}

pub const PRESETS: [&str; 3] = ["paper-noattack", "paper-attack30", "desk"];

impl ExperimentConfig {
    /// 100 clients on full MNIST read from `data/mnist`.
    pub fn paper() -> Self {
        let dir = PathBuf::from("data/mnist");
        Self {
            dataset: DatasetSource::Mnist {
                train_images: dir.join("train-images-idx3-ubyte.gz"),
                train_labels: dir.join("train-labels-idx1-ubyte.gz"),
                test_images: dir.join("t10k-images-idx3-ubyte.gz"),
                test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
                train_subset: None,
            },
            partition: PartitionSpec::default(),
            validation_fraction: 0.1,
            market: MarketModel::uniform(10),
            accuracy: AccuracyCurveParams::default(),
            quality: QualityParams::default(),
            solver: SolverOptions::default(),
            delay: DelaySettings::default(),
            access: AccessParams::default(),
            training: TrainingSettings::default(),
            attack: AttackSettings::default(),
            rounds: 100,
            seed: 0,
        }
    }

    /// 20 clients on synthetic blobs, 30 rounds.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec::default(),
                train_samples: 12000,
                test_samples: 2000,
            },
            partition: PartitionSpec { num_clients: 20, ..PartitionSpec::default() },
            rounds: 30,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-noattack" => Ok(Self::paper()),
            "paper-attack30" => {
                let mut cfg = Self::paper();
                cfg.attack.attackers = 30;
                Ok(cfg)
            }
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies a `dotted.path=value` override. The value is read as JSON when
    /// it parses, otherwise as a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(key)
                    .ok_or_else(|| Error::Config(format!("unknown config field {path:?}")))?,
                Value::Array(items) => key
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| Error::Config(format!("bad index {key:?} in {path:?}")))?,
                _ => return Err(Error::Config(format!("{path:?} does not name a config field"))),
            };
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.quality.validate()?;
        self.accuracy.validate()?;
        self.access.validate()?;
        self.timing().validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::Config(format!(
                "validation fraction {} must lie in (0, 1)",
                self.validation_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.attack.flip_fraction) {
            return Err(Error::Config(format!("flip fraction {} outside [0, 1]", self.attack.flip_fraction)));
        }
        if self.attack.attackers > self.partition.num_clients {
            return Err(Error::Config(format!(
                "{} attackers among {} clients",
                self.attack.attackers, self.partition.num_clients
            )));
        }
        let t = &self.training;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.baseline_epochs == 0 || t.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid training settings {t:?}")));
        }
        if !(t.prox_mu >= 0.0) {
            return Err(Error::Config("prox_mu must be >= 0".into()));
        }
        Ok(())
    }

    pub fn timing(&self) -> TimingParams {
        TimingParams {
            delay_lo: self.delay.lo,
            delay_hi: self.delay.hi,
            delta_t: self.delay.delta_t,
            delay_model: self.delay.model,
            ..TimingParams::from_market(&self.market)
        }
    }

    pub fn baseline(&self, algorithm: Algorithm) -> BaselineConfig {
        BaselineConfig {
            algorithm,
            local_epochs: self.training.baseline_epochs,
            prox_mu: self.training.prox_mu,
            rounds: self.rounds,
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            seed: self.seed,
        }
    }
}

/// Solves and verifies the menu for `cfg`'s market.
pub fn solve_menu(cfg: &ExperimentConfig) -> Result<(ContractMenu, ContractReport)> {
    cfg.market.validate()?;
    let menu = solve_contract_with(&cfg.market, &cfg.accuracy, &cfg.solver)?;
    let report = verify_contract(&menu, &cfg.market);
    Ok((menu, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: usize,
    pub d: usize,
    pub emd: f64,
    pub theta: f64,
    pub level: usize,
    pub malicious: bool,
}

/// Loaded data, partitioned clients and everything else a run needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub pool: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Client shards as trained on; attackers' labels are already flipped.
    pub shards: Vec<ClientDataset>,
    pub profiles: Vec<ClientProfile>,
    pub menu: ContractMenu,
    pub report: ContractReport,
    pub delays: Vec<f64>,
    pub initial: Model,
}

fn load_dataset(source: &DatasetSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DatasetSource::Synthetic { spec, train_samples, test_samples } => Ok((
            spec.generate(*train_samples, seeds::derive(seed, seeds::DATA, 0, 0))?,
            spec.generate(*test_samples, seeds::derive(seed, seeds::DATA, 1, 0))?,
        )),
        DatasetSource::Mnist { train_images, train_labels, test_images, test_labels, train_subset } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let train = match train_subset {
                Some(n) if *n < train.len() => train.subset(&(0..*n).collect::<Vec<_>>()),
                _ => train,
            };
            Ok((train, test))
        }
    }
}

/// Chooses `count` clients spread round-robin over the levels present,
/// each level's candidates in a seeded random order.
pub fn choose_attackers(levels: &[usize], count: usize, seed: u64) -> Vec<bool> {
    let top = levels.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<usize>> = (1..=top)
        .map(|n| {
            let mut ids: Vec<usize> = (0..levels.len()).filter(|&k| levels[k] == n).collect();
            ids.shuffle(&mut rng);
            ids.reverse();
            ids
        })
        .collect();
    let mut chosen = vec![false; levels.len()];
    let mut left = count.min(levels.len());
    while left > 0 {
        for q in queues.iter_mut() {
            if left == 0 {
                break;
            }
            if let Some(k) = q.pop() {
                chosen[k] = true;
                left -= 1;
            }
        }
    }
    chosen
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let mut config = config.clone();
    let seed = config.seed;
    config.partition.seed = seeds::derive(seed, seeds::PARTITION, 0, 0);

    let (full, test) = load_dataset(&config.dataset, seed)?;
    let (pool, validation) = full.split(config.validation_fraction, seeds::derive(seed, seeds::HOLDOUT, 0, 0))?;
    let honest = partition(&pool, &config.partition)?;

    let (menu, report) = solve_menu(&config)?;
    if !report.ok() {
        return Err(Error::Contract(format!("menu fails verification: {}", report.violations.join("; "))));
    }

    let bench = uniform_benchmark(pool.num_classes());
    let mut profiles = Vec::with_capacity(honest.len());
    for c in &honest {
        let s = emd(&c.label_hist, &bench)?;
        let theta = data_quality(c.size(), s, &config.quality);
        let level = level_of(theta, &config.market);
        profiles.push(ClientProfile { client_id: c.client_id, d: c.size(), emd: s, theta, level, malicious: false });
    }
    let levels: Vec<usize> = profiles.iter().map(|p| p.level).collect();
    let attackers = choose_attackers(&levels, config.attack.attackers, seeds::derive(seed, seeds::ATTACKER, 0, 0));
    let mut shards = Vec::with_capacity(honest.len());
    for (c, p) in honest.into_iter().zip(profiles.iter_mut()) {
        if attackers[c.client_id] {
            p.malicious = true;
            let flip_seed = seeds::derive(seed, seeds::ATTACKER, 1 + c.client_id as u64, 0);
            shards.push(flip_labels(&c, config.attack.flip_fraction, pool.num_classes(), flip_seed)?);
        } else {
            shards.push(c);
        }
    }

    let delays = sample_delays(shards.len(), &config.timing(), seeds::derive(seed, seeds::DELAY, 0, 0));
    let mut dims = vec![pool.dim()];
    dims.extend(&config.training.hidden);
    dims.push(pool.num_classes());
    let initial = Model::init(&dims, seeds::derive(seed, seeds::INIT, 0, 0))?;

    Ok(Prepared { config, pool, validation, test, shards, profiles, menu, report, delays, initial })
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub ledgers: Vec<RoundLedger>,
    pub summary: Vec<SummaryRow>,
    pub settlement: Settlement,
    pub states: Vec<ClientState>,
    pub final_model: Model,
}

impl Prepared {
    pub fn client_states(&self) -> Vec<ClientState> {
        self.profiles
            .iter()
            .zip(&self.delays)
            .map(|(p, &delay)| {
                let effort = self.menu.entries[p.level - 1].effort;
                ClientState::new(p.client_id, p.level, p.theta, p.d, effort, delay, p.malicious)
            })
            .collect()
    }

    pub fn simulation(&self) -> Result<Simulation> {
        let cfg = &self.config;
        Simulation::new(SimulationInputs {
            pool: self.pool.clone(),
            shards: self.shards.clone(),
            states: self.client_states(),
            validation: self.validation.clone(),
            test: self.test.clone(),
            rewards: self.menu.rewards(),
            initial: self.initial.clone(),
            settings: SimSettings {
                lr: cfg.training.lr,
                batch_size: cfg.training.batch_size,
                seed: cfg.seed,
                timing: cfg.timing(),
                access: cfg.access,
            },
        })
    }

    pub fn simulate(&self) -> Result<SimulationOutput> {
        let mut sim = self.simulation()?;
        let ledgers = sim.run(self.config.rounds)?;
        let settlement = settle_rewards(&ledgers, sim.states(), sim.rewards(), sim.timing());
        let summary = ledgers.iter().map(SummaryRow::from).collect();
        Ok(SimulationOutput {
            ledgers,
            summary,
            settlement,
            states: sim.states().to_vec(),
            final_model: sim.global().clone(),
        })
    }

    pub fn run_baseline(&self, algorithm: Algorithm) -> Result<(Model, Vec<SummaryRow>)> {
        run_baseline(&self.initial, &self.pool, &self.shards, &self.test, &self.config.baseline(algorithm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.dataset = DatasetSource::Synthetic {
            spec: SyntheticSpec { dim: 8, ..SyntheticSpec::default() },
            train_samples: 600,
            test_samples: 200,
        };
        cfg.partition.num_clients = 6;
        cfg.rounds = 3;
        cfg.training.hidden = vec![8];
        cfg
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ExperimentConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset("paper-attack30").unwrap().attack.attackers, 30);
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = ExperimentConfig::desk();
        cfg.set("training.lr=0.05").unwrap();
        cfg.set("delay.model=per_upload").unwrap();
        cfg.set("market.theta.0=0.05").unwrap();
        cfg.set("training.hidden=[32,16]").unwrap();
        assert_eq!(cfg.training.lr, 0.05);
        assert_eq!(cfg.delay.model, DelayModel::PerUpload);
        assert_eq!(cfg.market.theta[0], 0.05);
        assert_eq!(cfg.training.hidden, vec![32, 16]);
        assert!(cfg.set("training.nope=1").is_err());
        let err = cfg.set("rounds=\"many\"").unwrap_err().to_string();
        assert!(err.contains("rounds"), "{err}");
        assert!(cfg.set("rounds").is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = ExperimentConfig::paper();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let err = ExperimentConfig::from_json(r#"{"rounds": 3}"#).unwrap_err().to_string();
        assert!(err.contains("dataset"), "{err}");
    }

    #[test]
    fn attackers_spread_over_levels() {
        let levels = [1, 1, 1, 2, 2, 3, 3, 3, 3];
        let chosen = choose_attackers(&levels, 3, 5);
        let mut hit: Vec<usize> = (0..levels.len()).filter(|&k| chosen[k]).map(|k| levels[k]).collect();
        hit.sort();
        assert_eq!(hit, vec![1, 2, 3]);
        let chosen = choose_attackers(&levels, 7, 5);
        assert_eq!(chosen.iter().filter(|c| **c).count(), 7);
        assert_eq!((0..9).filter(|&k| chosen[k] && levels[k] == 2).count(), 2);
        assert_eq!(choose_attackers(&levels, 20, 5), vec![true; 9]);
    }

    #[test]
    fn preparation_is_deterministic() {
        let mut cfg = small();
        cfg.attack.attackers = 2;
        let a = prepare(&cfg).unwrap();
        let b = prepare(&cfg).unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.profiles, b.profiles);
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.profiles.iter().filter(|p| p.malicious).count(), 2);
        assert_eq!(a.pool.len() + a.validation.len(), 600);
        let out = a.simulate().unwrap();
        assert_eq!(out.summary.len(), 3);
    }
}
