//! Asynchronous federated training on a simulated clock.
//!
//! The parameter server aggregates every `Δt` simulated seconds. Clients
//! train from whatever global model they last received and upload when
//! their (simulated) computation finishes. Each upload is scored by an
//! access indicator combining loss reduction, data quality and staleness.
//! A per-level outlier filter decides who is admitted. Admitted uploads are
//! aggregated with indicator-proportional weights and earn the contracted
//! reward; rejected uploads have their reward withheld.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::incentive::{local_epochs, MarketModel};
use crate::model::{aggregate, evaluate, train_epochs, Model, ModelDelta, TrainConfig};
use crate::seeds;

/// How a client's sampled delay turns into simulated training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayModel {
    /// `τ · delay`: every local epoch costs one sampled delay.
    PerEpoch,
    /// `delay`: the whole local computation costs one sampled delay.
    PerUpload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    /// CPU cycles per sample.
    pub c: f64,
    /// CPU frequency.
    pub f: f64,
    /// Effective capacitance coefficient.
    pub xi: f64,
    pub t_com: f64,
    pub e_com: f64,
    pub delay_lo: f64,
    pub delay_hi: f64,
    /// Aggregation period in simulated seconds.
    pub delta_t: f64,
    pub delay_model: DelayModel,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            c: 5.0,
            f: 1.0,
            xi: 2.0,
            t_com: 10.0,
            e_com: 20.0,
            delay_lo: 0.5,
            delay_hi: 2.0,
            delta_t: 1.0,
            delay_model: DelayModel::PerUpload,
        }
    }
}

impl TimingParams {
    /// Cost constants taken from `market`, delays and period at defaults.
    pub fn from_market(market: &MarketModel) -> Self {
        Self {
            c: market.c,
            f: market.f,
            xi: market.xi,
            t_com: market.t_com,
            e_com: market.e_com,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.c, self.f, self.xi, self.delay_lo, self.delay_hi, self.delta_t];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("timing constants must be positive: {self:?}")));
        }
        if !(self.t_com >= 0.0 && self.e_com >= 0.0) {
            return Err(Error::Config("T_com and E_com must be non-negative".into()));
        }
        if self.delay_lo > self.delay_hi {
            return Err(Error::Config(format!(
                "delay range [{}, {}] is empty",
                self.delay_lo, self.delay_hi
            )));
        }
        Ok(())
    }
}

/// Access-control constants: mean/median tolerance `a`, the spread multiple
/// `phi` used when the level looks symmetric, and the staleness decay
/// exponent `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessParams {
    pub a: f64,
    pub phi: f64,
    pub epsilon: f64,
}

impl Default for AccessParams {
    fn default() -> Self {
        Self { a: 0.5, phi: 3.0, epsilon: 2.0 }
    }
}

impl AccessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.phi >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(format!("need a >= 0, phi >= 0, epsilon > 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    /// 1-based quality level.
    pub level: usize,
    pub theta: f64,
    /// Number of local samples.
    pub d: usize,
    pub tau: usize,
    /// The contracted effort was below one epoch and was rounded up.
    pub tau_clamped: bool,
    /// Round whose global model the client is currently training from.
    pub issued_round: usize,
    pub started_at: f64,
    pub busy_until: f64,
    pub per_epoch_delay: f64,
    pub malicious: bool,
    pub cumulative_energy: f64,
    pub rewards_earned: f64,
    pub rewards_withheld: f64,
}

impl ClientState {
    /// A client holding the level-`level` contract with required `effort`.
    pub fn new(
        client_id: usize,
        level: usize,
        theta: f64,
        d: usize,
        effort: f64,
        per_epoch_delay: f64,
        malicious: bool,
    ) -> Self {
        let epochs = local_epochs(effort, d);
        Self {
            client_id,
            level,
            theta,
            d,
            tau: epochs.tau,
            tau_clamped: epochs.clamped,
            issued_round: 0,
            started_at: 0.0,
            busy_until: 0.0,
            per_epoch_delay,
            malicious,
            cumulative_energy: 0.0,
            rewards_earned: 0.0,
            rewards_withheld: 0.0,
        }
    }
}

/// Draws one delay per client from `U(delay_lo, delay_hi)`.
pub fn sample_delays(count: usize, tp: &TimingParams, seed: u64) -> Vec<f64> {
    if tp.delay_lo == tp.delay_hi {
        return vec![tp.delay_lo; count];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(tp.delay_lo, tp.delay_hi).expect("validated delay range");
    (0..count).map(|_| dist.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundCosts {
    /// Simulated seconds from receiving a model to uploading.
    pub sim_time: f64,
    /// `τ·c·d/f + T_com`.
    pub analytic_time: f64,
    /// `τ·ξ·c·d·f² + E_com`.
    pub energy: f64,
}

/// Time and energy of one local training pass. Communication is assumed to
/// fit inside the sampled delay, so it adds no simulated time.
pub fn round_costs(client: &ClientState, tp: &TimingParams) -> RoundCosts {
    let tau = client.tau as f64;
    let d = client.d as f64;
    let sim_time = match tp.delay_model {
        DelayModel::PerEpoch => tau * client.per_epoch_delay,
        DelayModel::PerUpload => client.per_epoch_delay,
    };
    RoundCosts {
        sim_time,
        analytic_time: tau * tp.c * d / tp.f + tp.t_com,
        energy: tau * tp.xi * tp.c * d * tp.f * tp.f + tp.e_com,
    }
}

/// Improvement of the client's training loss over the global model it
/// started from, measured on the validation split.
pub fn loss_reduction(global_loss_at_issue: f64, client_train_loss: f64) -> f64 {
    global_loss_at_issue - client_train_loss
}

/// `m · θ · (staleness + 1)^(-ε)`.
pub fn access_indicator(m: f64, theta: f64, staleness: usize, epsilon: f64) -> f64 {
    m * theta * ((staleness + 1) as f64).powf(-epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub client_id: usize,
    pub level: usize,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Admitted,
    /// Below its level's threshold.
    Filtered,
    /// Passed the level filter but had a non-positive indicator.
    NonPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `|mean - median| > a`, so the tighter one-σ threshold applied.
    pub skewed: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessOutcome {
    /// One verdict per upload, in input order.
    pub verdicts: Vec<Verdict>,
    /// Aggregation weight per upload; zero unless admitted.
    pub weights: Vec<f64>,
    pub levels: Vec<LevelStats>,
}

impl AccessOutcome {
    pub fn admitted_count(&self) -> usize {
        self.verdicts.iter().filter(|v| **v == Verdict::Admitted).count()
    }
}

fn level_stats(level: usize, qs: &[f64], a: f64, phi: f64) -> LevelStats {
    let n = qs.len() as f64;
    let mean = qs.iter().sum::<f64>() / n;
    let mut sorted = qs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let std = (qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / n).sqrt();
    let skewed = (mean - median).abs() > a;
    let threshold = if skewed { mean - std } else { mean - phi * std };
    LevelStats { level, count: qs.len(), mean, median, std, skewed, threshold }
}

/// Per-level outlier filter followed by weight normalization over every
/// admitted upload. When nothing survives, all weights are zero.
pub fn access_control(uploads: &[Upload], a: f64, phi: f64) -> Result<AccessOutcome> {
    if uploads.is_empty() {
        return Err(Error::Precondition("access control needs at least one upload".into()));
    }
    if let Some(u) = uploads.iter().find(|u| !u.q.is_finite()) {
        return Err(Error::Precondition(format!("client {} has non-finite indicator {}", u.client_id, u.q)));
    }
    let mut by_level: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, u) in uploads.iter().enumerate() {
        by_level.entry(u.level).or_default().push(i);
    }
    let mut verdicts = vec![Verdict::Admitted; uploads.len()];
    let mut levels = Vec::with_capacity(by_level.len());
    for (level, members) in by_level {
        let qs: Vec<f64> = members.iter().map(|&i| uploads[i].q).collect();
        let stats = level_stats(level, &qs, a, phi);
        for &i in &members {
            let q = uploads[i].q;
            verdicts[i] = if q < stats.threshold {
                Verdict::Filtered
            } else if q <= 0.0 {
                Verdict::NonPositive
            } else {
                Verdict::Admitted
            };
        }
        levels.push(stats);
    }
    let total: f64 = uploads
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| **v == Verdict::Admitted)
        .map(|(u, _)| u.q)
        .sum();
    let weights = uploads
        .iter()
        .zip(&verdicts)
        .map(|(u, v)| if *v == Verdict::Admitted { u.q / total } else { 0.0 })
        .collect();
    Ok(AccessOutcome { verdicts, weights, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadRecord {
    pub client_id: usize,
    pub level: usize,
    pub issued_round: usize,
    pub staleness: usize,
    pub tau: usize,
    pub train_loss: f64,
    pub m: f64,
    pub q: f64,
    pub verdict: Verdict,
    pub alpha: f64,
}

impl UploadRecord {
    pub fn admitted(&self) -> bool {
        self.verdict == Verdict::Admitted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: usize,
    /// End of this round's aggregation window.
    pub sim_time: f64,
    /// Uploads in ascending client id.
    pub uploads: Vec<UploadRecord>,
    pub levels: Vec<LevelStats>,
    pub admitted_count: usize,
    /// The global model did not change this round.
    pub no_op: bool,
    pub warning: Option<String>,
    /// Validation loss of the model produced by this round.
    pub validation_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub lr: f64,
    pub batch_size: usize,
    /// Master seed; local training streams are derived from it per client
    /// and issue round.
    pub seed: u64,
    pub timing: TimingParams,
    pub access: AccessParams,
}

/// Everything a simulation owns. `shards[k]` and `states[k]` must both
/// belong to client `k`.
pub struct SimulationInputs {
    pub pool: Dataset,
    pub shards: Vec<ClientDataset>,
    pub states: Vec<ClientState>,
    pub validation: Dataset,
    pub test: Dataset,
    /// Contracted reward per level, indexed by `level - 1`.
    pub rewards: Vec<f64>,
    pub initial: Model,
    pub settings: SimSettings,
}

pub struct Simulation {
    pool: Dataset,
    shards: Vec<ClientDataset>,
    states: Vec<ClientState>,
    validation: Dataset,
    test: Dataset,
    rewards: Vec<f64>,
    settings: SimSettings,
    global: Arc<Model>,
    /// The model each client is training from.
    issued: Vec<Arc<Model>>,
    /// Validation loss of the global model issued at each round.
    validation_history: Vec<f64>,
    last_test: (f64, f64),
    round: usize,
}

impl Simulation {
    pub fn new(inputs: SimulationInputs) -> Result<Self> {
        let SimulationInputs { pool, shards, mut states, validation, test, rewards, initial, settings } = inputs;
        settings.timing.validate()?;
        settings.access.validate()?;
        if shards.len() != states.len() {
            return Err(Error::Config(format!("{} shards but {} client states", shards.len(), states.len())));
        }
        for (k, (shard, st)) in shards.iter().zip(&states).enumerate() {
            if shard.client_id != k || st.client_id != k {
                return Err(Error::Config(format!("client {k} is out of order")));
            }
            if st.d != shard.size() || st.d == 0 {
                return Err(Error::Config(format!("client {k} size {} does not match its shard", st.d)));
            }
            if st.level == 0 || st.level > rewards.len() || st.tau == 0 {
                return Err(Error::Config(format!("client {k} has level {} / tau {}", st.level, st.tau)));
            }
        }
        let global = Arc::new(initial);
        let start = evaluate(global.as_ref(), &validation)?;
        let test_eval = evaluate(global.as_ref(), &test)?;
        for st in &mut states {
            st.issued_round = 0;
            st.started_at = 0.0;
            st.busy_until = round_costs(st, &settings.timing).sim_time;
        }
        Ok(Self {
            issued: vec![global.clone(); states.len()],
            pool,
            shards,
            states,
            validation,
            test,
            rewards,
            settings,
            global,
            validation_history: vec![start.loss],
            last_test: (test_eval.loss, test_eval.accuracy),
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn states(&self) -> &[ClientState] {
        &self.states
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn timing(&self) -> &TimingParams {
        &self.settings.timing
    }

    /// Test loss and accuracy of the current global model.
    pub fn test_metrics(&self) -> (f64, f64) {
        self.last_test
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundLedger>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    /// Closes aggregation window `(t·Δt, (t+1)·Δt]`.
    pub fn run_round(&mut self) -> Result<RoundLedger> {
        let t = self.round;
        self.step(t).map_err(|e| e.in_round(t))
    }

    fn step(&mut self, t: usize) -> Result<RoundLedger> {
        let tp = self.settings.timing;
        let window_end = (t + 1) as f64 * tp.delta_t;
        let uploaders: Vec<usize> = (0..self.states.len())
            .filter(|&k| self.states[k].busy_until <= window_end)
            .collect();

        let trained = uploaders
            .par_iter()
            .map(|&k| {
                let st = &self.states[k];
                let cfg = TrainConfig {
                    epochs: st.tau,
                    lr: self.settings.lr,
                    batch_size: self.settings.batch_size,
                    seed: seeds::derive(self.settings.seed, seeds::TRAINING, k as u64, st.issued_round as u64),
                };
                train_epochs(self.issued[k].as_ref(), &self.shards[k].view(&self.pool), cfg)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::with_capacity(uploaders.len());
        let mut uploads = Vec::with_capacity(uploaders.len());
        for (&k, run) in uploaders.iter().zip(&trained) {
            let st = &self.states[k];
            let staleness = t - st.issued_round;
            let train_loss = run.final_loss();
            let m = loss_reduction(self.validation_history[st.issued_round], train_loss);
            let q = access_indicator(m, st.theta, staleness, self.settings.access.epsilon);
            uploads.push(Upload { client_id: k, level: st.level, q });
            records.push(UploadRecord {
                client_id: k,
                level: st.level,
                issued_round: st.issued_round,
                staleness,
                tau: st.tau,
                train_loss,
                m,
                q,
                verdict: Verdict::Admitted,
                alpha: 0.0,
            });
        }

        let mut levels = Vec::new();
        let mut warning = None;
        let mut admitted_count = 0;
        let mut deltas: Vec<(ModelDelta, f64)> = Vec::new();
        if !uploads.is_empty() {
            let access = self.settings.access;
            let outcome = access_control(&uploads, access.a, access.phi)?;
            admitted_count = outcome.admitted_count();
            for (i, rec) in records.iter_mut().enumerate() {
                rec.verdict = outcome.verdicts[i];
                rec.alpha = outcome.weights[i];
                if rec.admitted() {
                    let k = rec.client_id;
                    deltas.push((trained[i].model.delta_from(&self.issued[k])?, rec.alpha));
                }
            }
            let non_positive = outcome.verdicts.iter().filter(|v| **v == Verdict::NonPositive).count();
            if non_positive > 0 {
                log::debug!("round {t}: dropped {non_positive} uploads with non-positive indicator");
            }
            if admitted_count == 0 {
                let msg = format!("round {t}: all {} uploads rejected; global model unchanged", uploads.len());
                log::warn!("{msg}");
                warning = Some(msg);
            }
            levels = outcome.levels;
        }

        let no_op = deltas.is_empty();
        let validation_loss = if no_op {
            *self.validation_history.last().unwrap()
        } else {
            let next = aggregate(&self.global, &deltas)?;
            self.global = Arc::new(next);
            let val = evaluate(self.global.as_ref(), &self.validation)?;
            let test = evaluate(self.global.as_ref(), &self.test)?;
            self.last_test = (test.loss, test.accuracy);
            val.loss
        };
        self.validation_history.push(validation_loss);

        for rec in &records {
            let k = rec.client_id;
            let reward = self.rewards[rec.level - 1];
            let st = &mut self.states[k];
            st.cumulative_energy += round_costs(st, &tp).energy;
            if rec.admitted() {
                st.rewards_earned += reward;
            } else {
                st.rewards_withheld += reward;
            }
            st.issued_round = t + 1;
            st.started_at = window_end;
            st.busy_until = window_end + round_costs(st, &tp).sim_time;
            self.issued[k] = self.global.clone();
        }

        self.round = t + 1;
        Ok(RoundLedger {
            round: t,
            sim_time: window_end,
            uploads: records,
            levels,
            admitted_count,
            no_op,
            warning,
            validation_loss,
            test_loss: self.last_test.0,
            test_accuracy: self.last_test.1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSettlement {
    pub client_id: usize,
    pub level: usize,
    pub malicious: bool,
    pub uploads: usize,
    pub admitted_rounds: usize,
    pub rejected_rounds: usize,
    pub rewards: f64,
    pub withheld: f64,
    pub energy: f64,
    /// `θ · rewards - energy`.
    pub realized_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublisherSettlement {
    pub payout: f64,
    pub withheld: f64,
    pub uploads: usize,
    pub admitted_uploads: usize,
    pub final_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub clients: Vec<ClientSettlement>,
    pub publisher: PublisherSettlement,
}

/// Pays each level's reward for every admitted upload and withholds it for
/// every rejected one. Energy is charged for every upload.
pub fn settle_rewards(
    ledgers: &[RoundLedger],
    states: &[ClientState],
    rewards: &[f64],
    tp: &TimingParams,
) -> Settlement {
    let mut clients: Vec<ClientSettlement> = states
        .iter()
        .map(|st| ClientSettlement {
            client_id: st.client_id,
            level: st.level,
            malicious: st.malicious,
            uploads: 0,
            admitted_rounds: 0,
            rejected_rounds: 0,
            rewards: 0.0,
            withheld: 0.0,
            energy: 0.0,
            realized_utility: 0.0,
        })
        .collect();
    for rec in ledgers.iter().flat_map(|l| &l.uploads) {
        let c = &mut clients[rec.client_id];
        let reward = rewards[rec.level - 1];
        c.uploads += 1;
        c.energy += round_costs(&states[rec.client_id], tp).energy;
        if rec.admitted() {
            c.admitted_rounds += 1;
            c.rewards += reward;
        } else {
            c.rejected_rounds += 1;
            c.withheld += reward;
        }
    }
    for (c, st) in clients.iter_mut().zip(states) {
        c.realized_utility = st.theta * c.rewards - c.energy;
    }
    let publisher = PublisherSettlement {
        payout: clients.iter().map(|c| c.rewards).sum(),
        withheld: clients.iter().map(|c| c.withheld).sum(),
        uploads: clients.iter().map(|c| c.uploads).sum(),
        admitted_uploads: clients.iter().map(|c| c.admitted_rounds).sum(),
        final_test_accuracy: ledgers.last().map_or(f64::NAN, |l| l.test_accuracy),
    };
    Settlement { clients, publisher }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub admitted_count: usize,
}

impl From<&RoundLedger> for SummaryRow {
    fn from(l: &RoundLedger) -> Self {
        Self { round: l.round, test_loss: l.test_loss, test_accuracy: l.test_accuracy, admitted_count: l.admitted_count }
    }
}

#[derive(Serialize)]
struct LedgerRow {
    round: usize,
    sim_time: f64,
    client_id: usize,
    level: usize,
    staleness: usize,
    m: f64,
    q: f64,
    admitted: bool,
    alpha: f64,
}

/// One row per upload: `round,sim_time,client_id,level,staleness,m,q,admitted,alpha`.
pub fn write_ledger_csv<W: Write>(ledgers: &[RoundLedger], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in ledgers {
        for u in &l.uploads {
            w.serialize(LedgerRow {
                round: l.round,
                sim_time: l.sim_time,
                client_id: u.client_id,
                level: u.level,
                staleness: u.staleness,
                m: u.m,
                q: u.q,
                admitted: u.admitted(),
                alpha: u.alpha,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per round: `round,test_loss,test_accuracy,admitted_count`.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["round", "test_loss", "test_accuracy", "admitted_count"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
