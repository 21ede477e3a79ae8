//! Double-deep-Q client-selection agent.
//!
//! The agent sees one block per client (PCA-reduced weights plus four
//! normalized system features), scores every client with a single
//! Q-network output, and selects the top `U` clients. Each selected
//! client's reward trains its own output; unselected outputs receive no
//! gradient.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{Catalog, ClientSystemProfile, RoundConditions};
use crate::numerics::{self, ModelSpec, ParamVector};

/// Power-iteration cap per component.
pub const PCA_MAX_ITERS: usize = 20_000;
/// Convergence threshold on `‖Cv − λv‖`, relative to the total variance.
pub const PCA_RESIDUAL_TOL: f64 = 1e-9;

/// Number of scalar features per client block after the reduced weights.
pub const SCALAR_FEATURES: usize = 4;

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// Orthonormal rows, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
    }
}

/// Top-`k` principal components by power iteration with deflation.
///
/// The covariance is never materialized: `Cv = Xᵀ(Xv)/(M−1)` on the
/// centered rows, so the cost per iteration is `O(M·D)`. Each component
/// starts from a random direction drawn from `rng`, found components are
/// projected out at every iteration, and the sign is fixed so that the
/// largest-magnitude coordinate is positive.
pub fn fit_pca<R: Rng + ?Sized>(rows: &[Vec<f64>], k: usize, rng: &mut R) -> Result<PcaProjector> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {m}")));
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "PCA rows",
            expected: d,
            actual: bad.len(),
        });
    }
    if k == 0 || k > (m - 1).min(d) {
        return Err(Error::invalid(format!(
            "k_pca {k} must be in [1, min(M-1, D)] = [1, {}]",
            (m - 1).min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();
    let denom = (m - 1) as f64;
    let cov_mul = |v: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.resize(d, 0.0);
        for row in &centered {
            let s = dot(row, v) / denom;
            out.iter_mut().zip(row).for_each(|(o, x)| *o += s * x);
        }
    };
    let total_var: f64 = centered.iter().map(|r| dot(r, r)).sum::<f64>() / denom;
    let tol = PCA_RESIDUAL_TOL * total_var.max(f64::MIN_POSITIVE);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut w = Vec::with_capacity(d);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        for _ in 0..PCA_MAX_ITERS {
            cov_mul(&v, &mut w);
            orthogonalize(&mut w, &components);
            let lambda = dot(&v, &w);
            let residual = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if normalize(&mut w) == 0.0 {
                break;
            }
            std::mem::swap(&mut v, &mut w);
            if residual <= tol {
                break;
            }
        }
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        cov_mul(&v, &mut w);
        explained.push(dot(&v, &w).max(0.0));
        components.push(v);
    }
    Ok(PcaProjector {
        mean,
        components,
        explained_variance: explained,
    })
}

impl PcaProjector {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `components · (w − mean)`.
    pub fn project(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "PCA projection",
                expected: self.dim(),
                actual: w.len(),
            });
        }
        let centered: Vec<f64> = w.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self.components.iter().map(|c| dot(c, &centered)).collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::DimensionMismatch {
                context: "PCA reconstruction",
                expected: self.k(),
                actual: z.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, &zi) in self.components.iter().zip(z) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += zi * ci);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// State encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn of(values: impl IntoIterator<Item = f64>) -> Range {
        values.into_iter().fold(
            Range {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            },
            |r, v| Range {
                min: r.min.min(v),
                max: r.max.max(v),
            },
        )
    }

    /// Clamped min-max scaling; a degenerate range maps to 0.5.
    pub fn scale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if !(span > 0.0) {
            0.5
        } else {
            ((v - self.min) / span).clamp(0.0, 1.0)
        }
    }
}

/// Ranges used to squash the scalar state features into `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub data_size: Range,
    pub cores: Range,
    pub freq_mhz: Range,
    pub bandwidth_mbps: Range,
}

impl NormStats {
    /// Device and link ranges come from the whole catalog (plus any
    /// per-client overrides); data sizes from the clients.
    pub fn from_catalog(catalog: &Catalog, profiles: &[ClientSystemProfile], data_sizes: &[usize]) -> Self {
        let cores = catalog
            .hardware
            .iter()
            .map(|h| h.cores)
            .chain(profiles.iter().map(|p| p.hardware.cores));
        let freq = catalog
            .hardware
            .iter()
            .map(|h| h.cpu_freq_mean)
            .chain(profiles.iter().map(|p| p.hardware.cpu_freq_mean));
        let bw = catalog
            .protocols
            .iter()
            .map(|p| p.bandwidth_mean)
            .chain(profiles.iter().map(|p| p.protocol.bandwidth_mean));
        NormStats {
            data_size: Range::of(data_sizes.iter().map(|&n| n as f64)),
            cores: Range::of(cores.map(f64::from)),
            freq_mhz: Range::of(freq),
            bandwidth_mbps: Range::of(bw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentState(pub Vec<f64>);

impl AgentState {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn block(&self, client: usize, block_len: usize) -> &[f64] {
        &self.0[client * block_len..(client + 1) * block_len]
    }
}

pub fn state_len(num_clients: usize, k_pca: usize) -> usize {
    num_clients * (k_pca + SCALAR_FEATURES)
}

/// Concatenate per-client blocks `(reduced weights, n, cores, f, b)` in
/// client-id order.
pub fn encode_state(
    data_sizes: &[usize],
    profiles: &[ClientSystemProfile],
    conditions: &[RoundConditions],
    last_known_weights: &[ParamVector],
    projector: &PcaProjector,
    norm: &NormStats,
) -> Result<AgentState> {
    let n = data_sizes.len();
    for (what, len) in [
        ("client profiles", profiles.len()),
        ("round conditions", conditions.len()),
        ("last-known weights", last_known_weights.len()),
    ] {
        if len != n {
            return Err(Error::invalid(format!(
                "state encoding needs {n} {what}, got {len}"
            )));
        }
    }
    let mut out = Vec::with_capacity(state_len(n, projector.k()));
    for k in 0..n {
        out.extend(projector.project(last_known_weights[k].as_slice())?);
        out.push(norm.data_size.scale(data_sizes[k] as f64));
        out.push(norm.cores.scale(f64::from(profiles[k].hardware.cores)));
        out.push(norm.freq_mhz.scale(conditions[k].freq_mhz));
        out.push(norm.bandwidth_mbps.scale(conditions[k].bandwidth_mbps));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("agent state".into()));
    }
    Ok(AgentState(out))
}

// ---------------------------------------------------------------------------
// Exploration and selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub eps_init: f64,
    pub eps_end: f64,
    pub decay_rounds: usize,
}

impl EpsilonSchedule {
    pub fn new(eps_init: f64, eps_end: f64, decay_rounds: usize) -> Result<Self> {
        if !(0.0 <= eps_end && eps_end <= eps_init && eps_init <= 1.0) {
            return Err(Error::invalid(format!(
                "epsilon schedule needs 0 <= eps_end ({eps_end}) <= eps_init ({eps_init}) <= 1"
            )));
        }
        Ok(EpsilonSchedule {
            eps_init,
            eps_end,
            decay_rounds,
        })
    }

    /// Linear decay from `eps_init` to `eps_end` over `decay_rounds`.
    pub fn epsilon_at(&self, round: usize) -> f64 {
        if round >= self.decay_rounds {
            return self.eps_end;
        }
        let frac = round as f64 / self.decay_rounds as f64;
        self.eps_init + (self.eps_end - self.eps_init) * frac
    }
}

/// Indices of the `u` largest values; ties go to the lower index.
pub fn top_u_indices(qvals: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..qvals.len()).collect();
    // partial_cmp so that -0.0 and 0.0 tie; callers reject NaN beforehand.
    order.sort_by(|&a, &b| {
        qvals[b]
            .partial_cmp(&qvals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(u);
    order.sort_unstable();
    order
}

/// Epsilon-greedy multi-action selection. Returns `u` distinct indices in
/// ascending order.
pub fn select_top_u<R: Rng + ?Sized>(qvals: &[f64], u: usize, eps: f64, rng: &mut R) -> Result<Vec<usize>> {
    let n = qvals.len();
    if u > n {
        return Err(Error::invalid(format!("cannot select {u} of {n} clients")));
    }
    let explore = rng.random::<f64>() < eps;
    if explore {
        let mut picked = index::sample(rng, n, u).into_vec();
        picked.sort_unstable();
        Ok(picked)
    } else {
        Ok(top_u_indices(qvals, u))
    }
}

// ---------------------------------------------------------------------------
// Q-network and replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(state_len: usize, hidden_dim: usize, num_clients: usize, rng: &mut R) -> Result<Self> {
        let spec = ModelSpec::new(state_len, hidden_dim, num_clients)?;
        Ok(QNetwork {
            params: spec.init_params(rng),
            spec,
        })
    }

    pub fn zeros(state_len: usize, hidden_dim: usize, num_clients: usize) -> Result<Self> {
        let spec = ModelSpec::new(state_len, hidden_dim, num_clients)?;
        Ok(QNetwork {
            params: ParamVector::zeros(spec.param_count()),
            spec,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_classes
    }

    /// One Q-value per client.
    pub fn q_forward(&self, state: &AgentState) -> Result<Vec<f64>> {
        let q = numerics::outputs(&self.params, &self.spec, &state.0)?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Q-network output".into()));
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: AgentState,
    pub actions: Vec<usize>,
    pub next_state: AgentState,
    /// Aligned with `actions`.
    pub rewards: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be >= 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Append, evicting the oldest transition when full.
    pub fn push(&mut self, tr: Transition) -> Result<()> {
        if tr.actions.len() != tr.rewards.len() {
            return Err(Error::DimensionMismatch {
                context: "transition rewards",
                expected: tr.actions.len(),
                actual: tr.rewards.len(),
            });
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
        Ok(())
    }

    /// Buffer positions of a sampled batch: with replacement while the
    /// buffer holds fewer than `batch_size` items, without replacement
    /// afterwards.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        let n = self.items.len();
        if n == 0 {
            return Err(Error::Empty("replay buffer"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("replay batch size must be >= 1"));
        }
        Ok(if n < batch_size {
            (0..batch_size).map(|_| rng.random_range(0..n)).collect()
        } else {
            index::sample(rng, n, batch_size).into_vec()
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Double-DQN update
// ---------------------------------------------------------------------------

/// Which state both Q terms of the bootstrap target are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetState {
    /// `s_{t+1}` (standard double DQN).
    #[default]
    Next,
    /// `s_t`, for reproducing the literal single-state form.
    Current,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-action targets `r_k + γ·Q_target(s', argmax_a Q_main(s', a))`.
pub fn ddql_target(
    tr: &Transition,
    main: &QNetwork,
    target: &QNetwork,
    gamma: f64,
    target_state: TargetState,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} not in [0,1]")));
    }
    if tr.done || gamma == 0.0 {
        return Ok(tr.rewards.clone());
    }
    let s = match target_state {
        TargetState::Next => &tr.next_state,
        TargetState::Current => &tr.state,
    };
    let best = argmax(&main.q_forward(s)?);
    let bootstrap = gamma * target.q_forward(s)?[best];
    Ok(tr.rewards.iter().map(|r| r + bootstrap).collect())
}

/// Mean squared TD error over every (transition, selected action) pair
/// and its gradient with respect to the main network's parameters.
/// Targets are treated as constants.
pub fn ddql_loss_and_grad(
    main: &QNetwork,
    target: &QNetwork,
    batch: &[&Transition],
    gamma: f64,
    target_state: TargetState,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("DDQL batch"));
    }
    let pairs: usize = batch.iter().map(|t| t.actions.len()).sum();
    if pairs == 0 {
        return Err(Error::Empty("DDQL batch actions"));
    }
    let mut grad = ParamVector::zeros(main.params.len());
    let mut loss = 0.0;
    let n_actions = main.num_actions();
    for tr in batch {
        let y = ddql_target(tr, main, target, gamma, target_state)?;
        let q = main.q_forward(&tr.state)?;
        let mut d_out = vec![0.0; n_actions];
        for (&a, &yk) in tr.actions.iter().zip(&y) {
            if a >= n_actions {
                return Err(Error::UnknownClient(a));
            }
            let err = q[a] - yk;
            loss += err * err;
            d_out[a] += 2.0 * err / pairs as f64;
        }
        numerics::output_vjp(&main.params, &main.spec, &tr.state.0, &d_out, &mut grad)?;
    }
    Ok((loss / pairs as f64, grad))
}

/// One SGD step on the main network. Returns the batch loss measured
/// before the step.
pub fn ddql_update(
    main: &mut QNetwork,
    target: &QNetwork,
    batch: &[&Transition],
    gamma: f64,
    lr: f64,
    target_state: TargetState,
) -> Result<f64> {
    let (loss, grad) = ddql_loss_and_grad(main, target, batch, gamma, target_state)?;
    for (w, g) in main.params.0.iter_mut().zip(&grad.0) {
        *w -= lr * g;
    }
    if !main.params.is_finite() {
        return Err(Error::NonFinite("Q-network parameters after update".into()));
    }
    Ok(loss)
}

/// Copy main into target when `step_counter` is a multiple of `period`.
pub fn sync_target(main: &QNetwork, target: &mut QNetwork, step_counter: u64, period: u64) -> bool {
    if period == 0 || !step_counter.is_multiple_of(period) {
        return false;
    }
    target.params.clone_from(&main.params);
    true
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden_dim: usize,
    pub k_pca: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_sync_every: u64,
    pub replay_capacity: usize,
    pub eps_init: f64,
    pub eps_end: f64,
    /// Defaults to the run's total rounds.
    pub eps_decay_rounds: Option<usize>,
    pub target_state: TargetState,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden_dim: 128,
            k_pca: 10,
            gamma: 0.9,
            learning_rate: 0.01,
            batch_size: 50,
            target_sync_every: 10,
            replay_capacity: 1000,
            eps_init: 0.9,
            eps_end: 0.2,
            eps_decay_rounds: None,
            target_state: TargetState::Next,
        }
    }
}

impl AgentConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.k_pca == 0 {
            p.push("agent.k_pca must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            p.push(format!("agent.gamma {} not in [0,1]", self.gamma));
        }
        if !(self.learning_rate > 0.0) {
            p.push("agent.learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            p.push("agent.batch_size must be >= 1".into());
        }
        if self.target_sync_every == 0 {
            p.push("agent.target_sync_every (P) must be >= 1".into());
        }
        if self.replay_capacity == 0 {
            p.push("agent.replay_capacity must be >= 1".into());
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_init && self.eps_init <= 1.0) {
            p.push(format!(
                "agent epsilon schedule needs 0 <= eps_end ({}) <= eps_init ({}) <= 1",
                self.eps_end, self.eps_init
            ));
        }
        p
    }
}

/// Serializable agent snapshot. Field order is the on-disk order; the
/// replay buffer is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub q_spec: ModelSpec,
    pub main_params: ParamVector,
    pub target_params: ParamVector,
    pub step_counter: u64,
    pub epsilon: EpsilonSchedule,
    pub rounds_seen: usize,
    pub projector: PcaProjector,
}

/// Networks, replay memory and bookkeeping for one run.
#[derive(Debug, Clone)]
pub struct DdqlAgent {
    pub config: AgentConfig,
    pub main: QNetwork,
    pub target: QNetwork,
    pub buffer: ReplayBuffer,
    pub schedule: EpsilonSchedule,
    pub projector: PcaProjector,
    pub norm: NormStats,
    pub step_counter: u64,
    pub rounds_seen: usize,
}

impl DdqlAgent {
    pub fn new<R: Rng + ?Sized>(
        config: AgentConfig,
        num_clients: usize,
        total_rounds: usize,
        projector: PcaProjector,
        norm: NormStats,
        init_rng: &mut R,
    ) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let main = QNetwork::new(
            state_len(num_clients, projector.k()),
            config.hidden_dim,
            num_clients,
            init_rng,
        )?;
        let target = main.clone();
        let schedule = EpsilonSchedule::new(
            config.eps_init,
            config.eps_end,
            config.eps_decay_rounds.unwrap_or(total_rounds),
        )?;
        Ok(DdqlAgent {
            buffer: ReplayBuffer::new(config.replay_capacity)?,
            config,
            main,
            target,
            schedule,
            projector,
            norm,
            step_counter: 0,
            rounds_seen: 0,
        })
    }

    /// Store a transition, train on a replay batch and sync the target
    /// network when due. Returns the batch loss.
    pub fn observe<R: Rng + ?Sized>(&mut self, tr: Transition, rng: &mut R) -> Result<f64> {
        self.buffer.push(tr)?;
        let batch = self.buffer.sample_batch(self.config.batch_size, rng)?;
        let loss = ddql_update(
            &mut self.main,
            &self.target,
            &batch,
            self.config.gamma,
            self.config.learning_rate,
            self.config.target_state,
        )?;
        self.step_counter += 1;
        sync_target(
            &self.main,
            &mut self.target,
            self.step_counter,
            self.config.target_sync_every,
        );
        Ok(loss)
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            q_spec: self.main.spec,
            main_params: self.main.params.clone(),
            target_params: self.target.params.clone(),
            step_counter: self.step_counter,
            epsilon: self.schedule,
            rounds_seen: self.rounds_seen,
            projector: self.projector.clone(),
        }
    }
}
