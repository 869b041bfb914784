//! Double DQN: replay buffer, epsilon-greedy exploration over feasible
//! actions, online/target networks and the double-Q regression target.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Mlp, LAYER_SIZES};
use crate::perception::{encode, sense_obstacles, OccupancyGrid, GRID_LEN};
use crate::reward::{stranded_step_reward, total_reward, RewardWeights};
use crate::seeding::{rng_for, stream};
use crate::sim::{Action, ActionMask, Scenario, Simulator};

/// Divisor (m/s) applied to grid values before they reach the network.
/// Vehicle tiles land in `[0, 5]`, so a one-step speed change moves an
/// input by 0.2, and off-road tiles become -0.2.
pub const INPUT_SCALE: f64 = 5.0;

pub fn network_input(grid: &OccupancyGrid) -> Vec<f64> {
    grid.as_slice().iter().map(|v| v / INPUT_SCALE).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Arc<[f64]>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Arc<[f64]>,
    pub done: bool,
    pub next_feasible: ActionMask,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn push(&mut self, transition: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
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

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: u32,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the training episodes over which epsilon anneals linearly.
    pub epsilon_decay_fraction: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected before the first gradient step.
    pub learning_starts: usize,
    /// Environment steps between gradient steps.
    pub train_every: u32,
    /// Gradient steps between target-network copies.
    pub target_sync_period: u64,
    /// Multiplier applied to rewards before they enter the TD target.
    pub reward_scale: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1500,
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            batch_size: 32,
            buffer_capacity: 50_000,
            learning_starts: 1_000,
            train_every: 1,
            target_sync_period: 1000,
            reward_scale: 0.01,
            learning_rate: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return fail("epsilon bounds must lie in [0, 1]");
        }
        if !unit.contains(&self.epsilon_decay_fraction) {
            return fail("epsilon_decay_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.train_every == 0 {
            return fail("batch_size, buffer_capacity and train_every must be positive");
        }
        if self.target_sync_period == 0 {
            return fail("target_sync_period must be at least 1");
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return fail("reward_scale must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Linear anneal from `start` to `end` over the first `decay_fraction` of
/// training, `progress` being the completed share of training.
pub fn epsilon_at(progress: f64, start: f64, end: f64, decay_fraction: f64) -> f64 {
    if decay_fraction <= 0.0 || progress >= decay_fraction {
        return end;
    }
    start + (end - start) * progress / decay_fraction
}

/// Highest-valued feasible action; ties go to the lowest index.
pub fn greedy_action(q: &[f64], feasible: ActionMask) -> Result<usize> {
    let mut best: Option<usize> = None;
    for i in (0..q.len()).filter(|&i| feasible.contains_index(i)) {
        if best.map_or(true, |b| q[i] > q[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no feasible action".into()))
}

/// Epsilon-greedy choice restricted to `feasible`.
pub fn select_action<R: Rng + ?Sized>(
    q: &[f64],
    feasible: ActionMask,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let allowed: Vec<usize> = (0..q.len())
        .filter(|&i| feasible.contains_index(i))
        .collect();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("empty action mask".into()));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(allowed[rng.gen_range(0..allowed.len())]);
    }
    greedy_action(q, feasible)
}

/// Double-Q target from precomputed next-state values: the online network
/// picks the action, the target network scores it.
pub fn double_q_target(
    reward: f64,
    done: bool,
    gamma: f64,
    online_next: &[f64],
    target_next: &[f64],
    feasible_next: ActionMask,
) -> Result<f64> {
    if done || gamma == 0.0 {
        return Ok(reward);
    }
    let best = greedy_action(online_next, feasible_next)?;
    Ok(reward + gamma * target_next[best])
}

pub fn td_target(
    reward: f64,
    next_state: &[f64],
    done: bool,
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
    feasible_next: ActionMask,
) -> Result<f64> {
    if done || gamma == 0.0 {
        return Ok(reward);
    }
    let q_online = online.forward(next_state)?;
    let q_target = target.forward(next_state)?;
    double_q_target(reward, done, gamma, &q_online, &q_target, feasible_next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u32,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub collisions: u32,
    pub epsilon: f64,
    /// Mean minibatch loss over the episode's gradient steps, if any.
    pub loss_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
    pub gradient_steps: u64,
    pub target_syncs: u64,
    /// Minibatches dropped because the loss or a gradient was not finite.
    pub skipped_batches: u64,
}

/// Column names of the training log, written even when there are no rows.
pub const TRAIN_LOG_HEADER: &str = "episode,return,collisions,epsilon,loss_mean";

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        if self.episodes.is_empty() {
            return Ok(format!("{TRAIN_LOG_HEADER}\n"));
        }
        crate::table::to_csv(&self.episodes)
    }

    /// Mean return over episodes `range`.
    pub fn mean_return(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.episodes[range];
        rows.iter().map(|r| r.total_return).sum::<f64>() / rows.len() as f64
    }
}

pub struct TrainOutcome {
    pub online: Mlp,
    pub target: Mlp,
    pub log: TrainLog,
}

/// The network a training run with `config` starts from.
pub fn initial_network(config: &TrainConfig) -> Mlp {
    let mut rng = rng_for(config.seed, &[stream::TRAIN, 0]);
    Mlp::new(&LAYER_SIZES, &mut rng).expect("static layer sizes are valid")
}

/// Scenario `episode` of a training run.
pub fn training_scenario(
    scenario_config: &crate::sim::ScenarioConfig,
    seed: u64,
    episode: u32,
) -> Result<Scenario> {
    let mut rng = rng_for(seed, &[stream::TRAIN, 2, episode as u64]);
    crate::sim::generate_scenario(scenario_config, &mut rng)
}

struct Learner {
    online: Mlp,
    target: Mlp,
    adam: Adam,
    gamma: f64,
    sync_period: u64,
}

impl Learner {
    /// One minibatch step; returns the loss, or `None` if the batch was
    /// skipped for non-finite values.
    fn step(&mut self, batch: &[&Transition], log: &mut TrainLog) -> Result<Option<f64>> {
        let n = batch.len();
        let mut states = Array2::<f64>::zeros((n, GRID_LEN));
        let mut next_states = Array2::<f64>::zeros((n, GRID_LEN));
        for (i, tr) in batch.iter().enumerate() {
            states
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&tr.state[..]));
            next_states
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&tr.next_state[..]));
        }
        let q_online = self.online.forward_batch(next_states.view())?;
        let q_target = self.target.forward_batch(next_states.view())?;
        let mut targets = Vec::with_capacity(n);
        for (i, tr) in batch.iter().enumerate() {
            targets.push(double_q_target(
                tr.reward,
                tr.done,
                self.gamma,
                q_online.row(i).as_slice().expect("standard layout"),
                q_target.row(i).as_slice().expect("standard layout"),
                tr.next_feasible,
            )?);
        }
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let (grads, loss) = self
            .online
            .backward_batch(states.view(), &actions, &targets)?;
        if !loss.is_finite() {
            log.skipped_batches += 1;
            return Ok(None);
        }
        match self.adam.update(&mut self.online, &grads) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient) => {
                log.skipped_batches += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        log.gradient_steps += 1;
        if log.gradient_steps % self.sync_period == 0 {
            self.target = self.online.clone();
            log.target_syncs += 1;
        }
        Ok(Some(loss))
    }
}

/// Train a DDQN agent on the scenarios produced by `scenario_source`
/// (called with the episode index).
pub fn train<F>(
    config: &TrainConfig,
    weights: &RewardWeights,
    mut scenario_source: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u32) -> Result<Scenario>,
{
    config.validate()?;
    weights.validate()?;
    let online = initial_network(config);
    let mut learner = Learner {
        target: online.clone(),
        adam: Adam::new(&online, config.adam()),
        online,
        gamma: config.gamma,
        sync_period: config.target_sync_period,
    };
    let mut rng = rng_for(config.seed, &[stream::TRAIN, 1]);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut log = TrainLog::default();
    let mut env_steps: u64 = 0;
    let stranded = stranded_step_reward(weights);

    for episode in 0..config.episodes {
        let scenario = scenario_source(episode)?;
        let horizon = scenario.duration_steps();
        let epsilon = epsilon_at(
            episode as f64 / config.episodes as f64,
            config.epsilon_start,
            config.epsilon_end,
            config.epsilon_decay_fraction,
        );
        let sim = Simulator::new(&scenario, weights.delta0);
        let mut state = sim.initial_state();
        let mut obs: Arc<[f64]> = network_input(&encode(&state)).into();
        let mut episode_return = 0.0;
        let mut losses = Vec::new();

        while !sim.is_final(&state) {
            let q = learner.online.forward(&obs)?;
            let action = select_action(&q, state.feasible_actions(), epsilon, &mut rng)?;
            let next = sim.step(&state, Action::from_index(action).expect("masked index"))?;
            let reward = total_reward(
                &sense_obstacles(&next),
                next.ego_speed(),
                next.prev_ego_speed,
                next.ego_lane(),
                next.prev_ego_lane,
                weights,
            )
            .total;
            episode_return += reward;

            let mut train_reward = reward;
            if next.collided {
                // The observation carries no clock, so with discounting a
                // collision is charged the stationary tail rather than one
                // that depends on the steps actually left.
                train_reward += if config.gamma < 1.0 {
                    stranded * config.gamma / (1.0 - config.gamma)
                } else {
                    crate::episode::collision_tail(horizon, next.t(), weights)
                };
            }
            let next_obs: Arc<[f64]> = network_input(&encode(&next)).into();
            buffer.push(Transition {
                state: obs,
                action,
                reward: train_reward * config.reward_scale,
                next_state: next_obs.clone(),
                done: next.collided,
                next_feasible: next.feasible_actions(),
            });
            env_steps += 1;

            if buffer.len() >= config.learning_starts.max(config.batch_size)
                && env_steps % config.train_every as u64 == 0
            {
                let batch = buffer.sample(config.batch_size, &mut rng);
                if let Some(loss) = learner.step(&batch, &mut log)? {
                    losses.push(loss);
                }
            }
            obs = next_obs;
            state = next;
        }
        if state.collided {
            episode_return += crate::episode::collision_tail(horizon, state.t(), weights);
        }
        log.episodes.push(EpisodeLog {
            episode,
            total_return: episode_return,
            collisions: u32::from(state.collided),
            epsilon,
            loss_mean: (!losses.is_empty())
                .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        });
    }
    Ok(TrainOutcome {
        online: learner.online,
        target: learner.target,
        log,
    })
}
