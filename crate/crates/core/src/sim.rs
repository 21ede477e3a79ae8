//! Round loop: select, train locally, aggregate, score, learn.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    encode_state, fit_pca, select_top_u, AgentCheckpoint, AgentState, DdqlAgent, NormStats,
    Transition,
};
use crate::config::{DatasetConfig, PerformanceMetric, PolicyKind, RunConfig};
use crate::data::{load_idx, partition, synth_blobs, train_validation_split, PartitionPlan};
use crate::error::{Error, Result};
use crate::hardware::{
    client_latency, model_size_bits, sample_round_conditions, transmission_time,
    ClientSystemProfile, RoundConditions,
};
use crate::numerics::{
    evaluate, local_train, LabeledDataset, Metrics, ModelSpec, OptimizerState, ParamVector,
};
use crate::scoring::{
    divergence, minmax_normalize, reputation_update, reputation_update_accuracy, utility,
    ReputationLedger, ScoreMode,
};
use crate::seeds::{derive_seed, purpose, stream};

/// One row of the per-round metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub global_accuracy: f64,
    pub global_macro_f1: f64,
    /// Slowest selected client, seconds.
    pub round_latency: f64,
    pub cumulative_latency: f64,
    pub mean_reward: f64,
    pub agent_loss: Option<f64>,
    pub epsilon: Option<f64>,
}

/// What happened to one selected client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundOutcome {
    pub client: usize,
    pub data_size: usize,
    pub latency: f64,
    pub latency_norm: f64,
    pub divergence: f64,
    pub utility: f64,
    /// Reputation after this round's update; also the reward.
    pub reputation: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    pub clients: Vec<ClientRoundOutcome>,
    pub improved: bool,
    pub transition: Option<Transition>,
}

/// Weighted average of client models, weights proportional to `sizes`.
/// Terms are accumulated in the order given.
pub fn aggregate_fedavg(models: &[&ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::Empty("models to aggregate"));
    }
    if models.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation weights",
            expected: models.len(),
            actual: sizes.len(),
        });
    }
    let dim = models[0].len();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("all selected clients hold zero samples"));
    }
    let mut out = vec![0.0; dim];
    for (m, &n) in models.iter().zip(sizes) {
        if m.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "aggregated model",
                expected: dim,
                actual: m.len(),
            });
        }
        let w = n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(m.as_slice()) {
            *o += w * v;
        }
    }
    Ok(ParamVector(out))
}

/// First round whose metric reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], metric: PerformanceMetric, target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| metric_of(r, metric) >= target)
        .map(|r| r.round)
}

pub fn metric_of(r: &RoundRecord, metric: PerformanceMetric) -> f64 {
    match metric {
        PerformanceMetric::Accuracy => r.global_accuracy,
        PerformanceMetric::MacroF1 => r.global_macro_f1,
    }
}

fn perf(m: &Metrics, metric: PerformanceMetric) -> f64 {
    match metric {
        PerformanceMetric::Accuracy => m.accuracy,
        PerformanceMetric::MacroF1 => m.macro_f1,
    }
}

/// Build the dataset the config describes.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_classes,
            input_dim,
            samples_per_class,
            spread,
        } => synth_blobs(
            *num_classes,
            *input_dim,
            *samples_per_class,
            *spread,
            &mut stream(cfg.seed, purpose::DATASET, 0, 0),
        ),
        DatasetConfig::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Training set, validation set and client partition for a config.
pub struct PreparedData {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub plan: PartitionPlan,
}

/// Load, split and partition exactly as a run with this config would.
/// Depends only on the data, partition and seed settings, never the policy.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let full = load_dataset(cfg)?;
    let (train, validation) = train_validation_split(
        &full,
        cfg.validation_fraction,
        &mut stream(cfg.seed, purpose::SPLIT, 0, 0),
    )?;
    let plan = partition(
        &train,
        cfg.num_clients,
        &cfg.partition,
        derive_seed(cfg.seed, purpose::PARTITION, 0, 0),
    )?;
    Ok(PreparedData {
        train,
        validation,
        plan,
    })
}

/// Full simulator state between rounds.
pub struct Simulation {
    cfg: RunConfig,
    spec: ModelSpec,
    validation: LabeledDataset,
    plan: PartitionPlan,
    clients: Vec<LabeledDataset>,
    profiles: Vec<ClientSystemProfile>,
    model_bits: f64,
    global: ParamVector,
    ledger: ReputationLedger,
    last_known: Vec<ParamVector>,
    agent: Option<DdqlAgent>,
    /// Encoded state for the upcoming round, cached from the previous one.
    pending_state: Option<AgentState>,
    initial_metrics: Metrics,
    prev_perf: f64,
    cumulative_latency: f64,
    completed: usize,
    parallel: bool,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let prepared = prepare_data(&cfg)?;
        Self::with_data(cfg, prepared.train, prepared.validation, prepared.plan)
    }

    /// Start from an explicit training set, validation set and partition.
    pub fn with_data(
        cfg: RunConfig,
        train: LabeledDataset,
        validation: LabeledDataset,
        plan: PartitionPlan,
    ) -> Result<Self> {
        cfg.validate()?;
        if plan.num_clients() != cfg.num_clients {
            return Err(Error::DimensionMismatch {
                context: "partition client count",
                expected: cfg.num_clients,
                actual: plan.num_clients(),
            });
        }
        plan.validate(train.len())?;
        if validation.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let spec = ModelSpec::new(train.input_dim, cfg.hidden_dim, train.num_classes)?;
        let clients: Vec<LabeledDataset> =
            plan.assignments.iter().map(|idx| train.subset(idx)).collect();
        let profiles = cfg.hardware.profiles(cfg.num_clients)?;
        let model_bits = model_size_bits(&spec, cfg.bits_per_param) as f64;
        let global = spec.init_params(&mut stream(cfg.seed, purpose::MODEL_INIT, 0, 0));
        let initial_metrics = evaluate(&global, &spec, &validation)?;
        let prev_perf = perf(&initial_metrics, cfg.performance_metric);
        let ledger = ReputationLedger::new(cfg.num_clients, cfg.score.psi_init);
        let last_known = vec![global.clone(); cfg.num_clients];

        let mut sim = Simulation {
            spec,
            validation,
            plan,
            clients,
            profiles,
            model_bits,
            global,
            ledger,
            last_known,
            agent: None,
            pending_state: None,
            initial_metrics,
            prev_perf,
            cumulative_latency: 0.0,
            completed: 0,
            parallel: true,
            cfg,
        };
        if sim.cfg.policy == PolicyKind::FlashRl {
            sim.agent = Some(sim.build_agent()?);
        }
        Ok(sim)
    }

    /// Warm-up: every client trains one epoch from the initial model and
    /// the PCA basis is fit on those models.
    fn build_agent(&self) -> Result<DdqlAgent> {
        let cfg = &self.cfg;
        let warm: Vec<ParamVector> = self.map_clients(&(0..cfg.num_clients).collect::<Vec<_>>(), |k| {
            let opt = OptimizerState::new(self.global.len(), cfg.learning_rate, cfg.momentum)?;
            let out = local_train(
                &self.global,
                &self.spec,
                &self.clients[k],
                1,
                cfg.batch_size,
                opt,
                &mut stream(cfg.seed, purpose::WARMUP, k as u64, 0),
            )?;
            Ok(out.params)
        })?;
        let rows: Vec<Vec<f64>> = warm.into_iter().map(|p| p.0).collect();
        // N warm-up models span at most N-1 centred directions.
        let k_pca = cfg
            .agent
            .k_pca
            .min(cfg.num_clients - 1)
            .min(self.spec.param_count());
        let projector = fit_pca(&rows, k_pca, &mut stream(cfg.seed, purpose::PCA, 0, 0))?;
        let norm = NormStats::from_catalog(
            &cfg.hardware.catalog(),
            &self.profiles,
            &self.plan.client_sizes(),
        );
        DdqlAgent::new(
            cfg.agent.clone(),
            cfg.num_clients,
            cfg.total_rounds,
            projector,
            norm,
            &mut stream(cfg.seed, purpose::QNET_INIT, 0, 0),
        )
    }

    fn map_clients<T: Send>(
        &self,
        ids: &[usize],
        f: impl Fn(usize) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        if self.parallel {
            ids.par_iter().map(|&k| f(k)).collect()
        } else {
            ids.iter().map(|&k| f(k)).collect()
        }
    }

    /// Train selected clients one after another instead of in parallel.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn profiles(&self) -> &[ClientSystemProfile] {
        &self.profiles
    }

    pub fn client_data(&self) -> &[LabeledDataset] {
        &self.clients
    }

    pub fn validation(&self) -> &LabeledDataset {
        &self.validation
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn ledger(&self) -> &ReputationLedger {
        &self.ledger
    }

    pub fn agent(&self) -> Option<&DdqlAgent> {
        self.agent.as_ref()
    }

    pub fn last_known_weights(&self) -> &[ParamVector] {
        &self.last_known
    }

    pub fn initial_metrics(&self) -> Metrics {
        self.initial_metrics
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.cfg.total_rounds
    }

    /// Per-client hardware conditions for 1-based `round`.
    pub fn conditions_for_round(&self, round: usize) -> Vec<RoundConditions> {
        self.profiles
            .iter()
            .enumerate()
            .map(|(k, p)| {
                sample_round_conditions(
                    p,
                    &mut stream(self.cfg.seed, purpose::CONDITIONS, k as u64, round as u64),
                )
            })
            .collect()
    }

    /// Agent state for `round` given the current last-known weights.
    pub fn encode_round_state(&self, round: usize) -> Result<AgentState> {
        let agent = self
            .agent
            .as_ref()
            .ok_or_else(|| Error::invalid("policy has no agent state"))?;
        encode_state(
            &self.plan.client_sizes(),
            &self.profiles,
            &self.conditions_for_round(round),
            &self.last_known,
            &agent.projector,
            &agent.norm,
        )
    }

    fn latency(&self, k: usize, cond: &RoundConditions) -> Result<f64> {
        let bits = self.clients[k].size_bits() as f64;
        if bits == 0.0 {
            return transmission_time(self.model_bits, cond.bandwidth_mbps);
        }
        client_latency(&self.profiles[k], cond, bits, self.model_bits)
    }

    fn select(&mut self, round: usize) -> Result<(Vec<usize>, Option<AgentState>, Option<f64>)> {
        let cfg = &self.cfg;
        let mut rng = stream(cfg.seed, purpose::SELECT, 0, round as u64);
        match cfg.policy {
            PolicyKind::Random => {
                let mut ids = index::sample(&mut rng, cfg.num_clients, cfg.clients_per_round).into_vec();
                ids.sort_unstable();
                Ok((ids, None, None))
            }
            PolicyKind::FullParticipation => Ok(((0..cfg.num_clients).collect(), None, None)),
            PolicyKind::FlashRl => {
                let state = match self.pending_state.take() {
                    Some(s) => s,
                    None => self.encode_round_state(round)?,
                };
                let agent = self.agent.as_ref().expect("flash_rl policy has an agent");
                let eps = agent.schedule.epsilon_at(round - 1);
                let q = agent.main.q_forward(&state)?;
                let ids = select_top_u(&q, cfg.clients_per_round, eps, &mut rng)?;
                Ok((ids, Some(state), Some(eps)))
            }
        }
    }

    /// Run the next round.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        if self.is_finished() {
            return Err(Error::invalid(format!(
                "all {} rounds already completed",
                self.cfg.total_rounds
            )));
        }
        let round = self.completed + 1;
        let conditions = self.conditions_for_round(round);
        let (selected, state, epsilon) = self.select(round)?;

        let cfg = &self.cfg;
        let locals: Vec<ParamVector> = self.map_clients(&selected, |k| {
            let opt = OptimizerState::new(self.global.len(), cfg.learning_rate, cfg.momentum)?;
            let out = local_train(
                &self.global,
                &self.spec,
                &self.clients[k],
                cfg.local_epochs,
                cfg.batch_size,
                opt,
                &mut stream(cfg.seed, purpose::TRAIN, k as u64, round as u64),
            )?;
            Ok(out.params)
        })?;
        let sizes: Vec<usize> = selected.iter().map(|&k| self.clients[k].len()).collect();
        let latencies = selected
            .iter()
            .map(|&k| self.latency(k, &conditions[k]))
            .collect::<Result<Vec<f64>>>()?;

        let refs: Vec<&ParamVector> = locals.iter().collect();
        let new_global = aggregate_fedavg(&refs, &sizes)?;
        if !new_global.is_finite() {
            let bad: Vec<usize> = selected
                .iter()
                .zip(&locals)
                .filter(|(_, p)| !p.is_finite())
                .map(|(&k, _)| k)
                .collect();
            return Err(Error::NonFinite(format!(
                "global model after round {round} (non-finite client models: {bad:?})"
            )));
        }
        let metrics = evaluate(&new_global, &self.spec, &self.validation)?;
        let perf_now = perf(&metrics, cfg.performance_metric);
        let improved = perf_now > self.prev_perf;

        let score = cfg.score;
        let lat_norm = minmax_normalize(&latencies)?;
        let mut outcomes = Vec::with_capacity(selected.len());
        for (i, &k) in selected.iter().enumerate() {
            let d = divergence(&locals[i], &new_global, score.divergence_eps)?;
            let zeta = utility(d, improved)?;
            let psi = match score.mode {
                ScoreMode::UtilityLatency => {
                    reputation_update(&mut self.ledger, k, zeta, lat_norm[i], &score)?
                }
                ScoreMode::Accuracy => {
                    let local_acc = evaluate(&locals[i], &self.spec, &self.validation)?.accuracy;
                    reputation_update_accuracy(&mut self.ledger, k, local_acc, self.prev_perf, score.lambda)?
                }
            };
            outcomes.push(ClientRoundOutcome {
                client: k,
                data_size: sizes[i],
                latency: latencies[i],
                latency_norm: lat_norm[i],
                divergence: d,
                utility: zeta,
                reputation: psi,
            });
        }
        let rewards: Vec<f64> = outcomes.iter().map(|o| o.reputation).collect();
        for (&k, p) in selected.iter().zip(locals) {
            self.last_known[k] = p;
        }
        self.global = new_global;
        self.prev_perf = perf_now;
        self.completed = round;

        let mut agent_loss = None;
        let mut transition = None;
        if let Some(state) = state {
            let done = round == self.cfg.total_rounds;
            let next_state = if done {
                state.clone()
            } else {
                self.encode_round_state(round + 1)?
            };
            let tr = Transition {
                state,
                actions: selected.clone(),
                next_state: next_state.clone(),
                rewards: rewards.clone(),
                done,
            };
            let agent = self.agent.as_mut().expect("state implies agent");
            let loss = agent.observe(
                tr.clone(),
                &mut stream(self.cfg.seed, purpose::REPLAY, 0, round as u64),
            )?;
            agent.rounds_seen = round;
            agent_loss = Some(loss);
            if !done {
                self.pending_state = Some(next_state);
            }
            transition = Some(tr);
        }

        let round_latency = latencies.iter().copied().fold(0.0, f64::max);
        self.cumulative_latency += round_latency;
        let record = RoundRecord {
            round,
            selected,
            global_accuracy: metrics.accuracy,
            global_macro_f1: metrics.macro_f1,
            round_latency,
            cumulative_latency: self.cumulative_latency,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            agent_loss,
            epsilon,
        };
        log::debug!(
            "round {round}: acc {:.4} latency {:.3}s selected {:?}",
            record.global_accuracy,
            record.round_latency,
            record.selected
        );
        Ok(RoundOutcome {
            record,
            clients: outcomes,
            improved,
            transition,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.completed,
            global: self.global.clone(),
            reputation: self.ledger.snapshot().to_vec(),
            cumulative_latency: self.cumulative_latency,
            agent: self.agent.as_ref().map(DdqlAgent::checkpoint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub global: ParamVector,
    pub reputation: Vec<f64>,
    pub cumulative_latency: f64,
    pub agent: Option<AgentCheckpoint>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub client_outcomes: Vec<Vec<ClientRoundOutcome>>,
    pub final_global: ParamVector,
    pub reputation: Vec<f64>,
    pub initial_metrics: Metrics,
}

/// Run every round, calling `on_round` after each.
pub fn run_with<F>(cfg: RunConfig, mut on_round: F) -> Result<RunResult>
where
    F: FnMut(&Simulation, &RoundOutcome) -> Result<()>,
{
    let mut sim = Simulation::new(cfg)?;
    let mut records = Vec::with_capacity(sim.cfg.total_rounds);
    let mut client_outcomes = Vec::with_capacity(sim.cfg.total_rounds);
    while !sim.is_finished() {
        let out = sim.step()?;
        on_round(&sim, &out)?;
        records.push(out.record);
        client_outcomes.push(out.clients);
    }
    Ok(RunResult {
        records,
        client_outcomes,
        final_global: sim.global.clone(),
        reputation: sim.ledger.snapshot().to_vec(),
        initial_metrics: sim.initial_metrics,
    })
}

pub fn run_simulation(cfg: RunConfig) -> Result<RunResult> {
    run_with(cfg, |_, _| Ok(()))
}
