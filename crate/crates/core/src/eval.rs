//! Batch evaluation of driving policies over seeded scenarios: summary
//! metrics per density, paired policy comparison and the measurement-error sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddqn::{greedy_action, network_input};
use crate::dp::{self, DpSolution};
use crate::episode::{run_episode, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::perception::{
    apply_measurement_error, encode_obstacles, sense_obstacles, OccupancyGrid,
};
use crate::reward::RewardWeights;
use crate::seeding::{derive_seed, rng_for, stream};
use crate::sim::{generate_scenario, Action, ActionMask, Scenario, ScenarioConfig, SimState};

/// The standard traffic densities, as seconds between entries.
pub const STANDARD_SPAWN_PERIODS: [u32; 4] = [8, 4, 2, 1];
pub const STANDARD_NOISE_LEVELS: [f64; 3] = [0.05, 0.10, 0.15];

/// Relative slack allowed before a return counts as beating the DP.
pub const DOMINANCE_TOLERANCE: f64 = 1e-9;

/// What a controller sees at one decision step.
pub struct StepView<'a> {
    /// Full simulator state; only the omniscient DP reads it.
    pub state: &'a SimState,
    /// Occupancy grid, measurement error already applied.
    pub grid: &'a OccupancyGrid,
    pub feasible: ActionMask,
}

/// Per-scenario decision maker created by a [`Policy`].
pub trait Controller {
    fn act(&mut self, view: &StepView<'_>) -> Result<Action>;
}

/// A driving policy. `begin` is called once per scenario, so policies that
/// plan (the DP) or draw random numbers get a fresh, seeded controller.
pub trait Policy: Sync {
    fn name(&self) -> String;

    fn begin<'a>(
        &'a self,
        scenario: &Scenario,
        weights: &RewardWeights,
        scenario_seed: u64,
    ) -> Result<Box<dyn Controller + 'a>>;
}

pub struct MaintainPolicy;

impl Policy for MaintainPolicy {
    fn name(&self) -> String {
        "maintain".into()
    }

    fn begin<'a>(
        &'a self,
        _: &Scenario,
        _: &RewardWeights,
        _: u64,
    ) -> Result<Box<dyn Controller + 'a>> {
        struct Maintain;
        impl Controller for Maintain {
            fn act(&mut self, _: &StepView<'_>) -> Result<Action> {
                Ok(Action::Maintain)
            }
        }
        Ok(Box::new(Maintain))
    }
}

/// Uniform choice among the feasible actions.
pub struct RandomPolicy;

struct RandomController {
    rng: ChaCha8Rng,
}

impl Controller for RandomController {
    fn act(&mut self, view: &StepView<'_>) -> Result<Action> {
        let options: Vec<Action> = view.feasible.iter().collect();
        if options.is_empty() {
            return Err(Error::InvalidArgument("empty action mask".into()));
        }
        Ok(options[self.rng.gen_range(0..options.len())])
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn begin<'a>(
        &'a self,
        _: &Scenario,
        _: &RewardWeights,
        seed: u64,
    ) -> Result<Box<dyn Controller + 'a>> {
        Ok(Box::new(RandomController {
            rng: rng_for(seed, &[stream::POLICY]),
        }))
    }
}

/// Greedy policy of a trained Q-network.
pub struct DdqnPolicy {
    pub network: Mlp,
}

struct DdqnController<'a> {
    network: &'a Mlp,
}

impl Controller for DdqnController<'_> {
    fn act(&mut self, view: &StepView<'_>) -> Result<Action> {
        let q = self.network.forward(&network_input(view.grid))?;
        let index = greedy_action(&q, view.feasible)?;
        Ok(Action::from_index(index).expect("network has one output per action"))
    }
}

impl Policy for DdqnPolicy {
    fn name(&self) -> String {
        "ddqn".into()
    }

    fn begin<'a>(
        &'a self,
        _: &Scenario,
        _: &RewardWeights,
        _: u64,
    ) -> Result<Box<dyn Controller + 'a>> {
        Ok(Box::new(DdqnController {
            network: &self.network,
        }))
    }
}

/// Exact optimum for the scenario, solved when the scenario begins. It
/// reads the true ego state and ignores the (possibly noisy) grid.
pub struct DpPolicy;

struct DpController {
    solution: DpSolution,
}

impl Controller for DpController {
    fn act(&mut self, view: &StepView<'_>) -> Result<Action> {
        self.solution
            .action(&view.state.ego)
            .ok_or_else(|| Error::Solver(format!("no optimal action for {:?}", view.state.ego)))
    }
}

impl Policy for DpPolicy {
    fn name(&self) -> String {
        "dp".into()
    }

    fn begin<'a>(
        &'a self,
        scenario: &Scenario,
        weights: &RewardWeights,
        _: u64,
    ) -> Result<Box<dyn Controller + 'a>> {
        Ok(Box::new(DpController {
            solution: dp::solve(scenario, weights)?,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Scenarios per density.
    pub scenarios: usize,
    pub seed: u64,
    /// Relative measurement-error magnitude applied to sensed gaps.
    pub noise: f64,
    /// Half-width of the "at desired speed" band (m/s).
    pub desired_speed_band: f64,
    /// Worker threads; 0 lets the thread pool decide.
    pub jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            scenarios: 100,
            seed: 1,
            noise: 0.0,
            desired_speed_band: 0.5,
            jobs: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        if !(self.desired_speed_band.is_finite() && self.desired_speed_band >= 0.0) {
            return Err(Error::Config("desired_speed_band must be >= 0".into()));
        }
        Ok(())
    }
}

/// Seed of scenario `index` at `spawn_period_s`; shared by every policy so
/// that comparisons are paired.
pub fn scenario_seed(base: u64, spawn_period_s: u32, index: usize) -> u64 {
    derive_seed(
        base,
        &[stream::SCENARIO, spawn_period_s as u64, index as u64],
    )
}

pub fn batch_scenario(config: &ScenarioConfig, base_seed: u64, index: usize) -> Result<Scenario> {
    let seed = scenario_seed(base_seed, config.spawn_period_s, index);
    generate_scenario(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub spawn_period_s: u32,
    pub index: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub collided: bool,
    pub lane_changes: u32,
    pub pct_desired_speed: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub spawn_period_s: u32,
    pub noise: f64,
    pub scenarios: usize,
    pub collisions: usize,
    pub lane_changes_total: u64,
    /// Mean over scenarios of the per-scenario percentage.
    pub pct_desired_speed: f64,
    pub mean_return: f64,
    pub rows: Vec<ScenarioRow>,
}

/// One summary line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: String,
    pub spawn_period_s: u32,
    pub noise: f64,
    pub scenarios: usize,
    pub collisions: usize,
    pub lane_changes: u64,
    pub pct_desired_speed: f64,
    pub mean_return: f64,
}

impl MetricsReport {
    /// Aggregate per-scenario rows into the summary metrics.
    pub fn from_rows(
        policy: String,
        spawn_period_s: u32,
        noise: f64,
        rows: Vec<ScenarioRow>,
    ) -> Self {
        let n = rows.len();
        let mean = |f: &dyn Fn(&ScenarioRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            policy,
            spawn_period_s,
            noise,
            scenarios: n,
            collisions: rows.iter().filter(|r| r.collided).count(),
            lane_changes_total: rows.iter().map(|r| r.lane_changes as u64).sum(),
            pct_desired_speed: mean(&|r| r.pct_desired_speed),
            mean_return: mean(&|r| r.total_return),
            rows,
        }
    }

    pub fn summary(&self) -> SummaryRow {
        SummaryRow {
            policy: self.policy.clone(),
            spawn_period_s: self.spawn_period_s,
            noise: self.noise,
            scenarios: self.scenarios,
            collisions: self.collisions,
            lane_changes: self.lane_changes_total,
            pct_desired_speed: self.pct_desired_speed,
            mean_return: self.mean_return,
        }
    }

    pub fn rows_csv(&self) -> Result<String> {
        crate::table::to_csv(&self.rows)
    }
}

/// One line per (policy, density).
pub fn summary_csv<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Result<String> {
    crate::table::to_csv(reports.into_iter().map(MetricsReport::summary))
}

/// Roll one scenario under `policy`, corrupting each observation with
/// measurement error of relative magnitude `noise`.
pub fn run_scenario(
    policy: &dyn Policy,
    scenario: &Scenario,
    weights: &RewardWeights,
    seed: u64,
    noise: f64,
    desired_speed_band: f64,
) -> Result<EpisodeOutcome> {
    let mut controller = policy.begin(scenario, weights, seed)?;
    let mut noise_rng = rng_for(seed, &[stream::NOISE]);
    run_episode(scenario, weights, desired_speed_band, |state| {
        let sensed = sense_obstacles(state);
        let grid = if noise > 0.0 {
            encode_obstacles(&apply_measurement_error(&sensed, noise, &mut noise_rng)?)
        } else {
            encode_obstacles(&sensed)
        };
        let feasible = state.feasible_actions();
        let action = controller.act(&StepView {
            state,
            grid: &grid,
            feasible,
        })?;
        if !feasible.contains(action) {
            return Err(Error::InfeasibleAction {
                action,
                lane: state.ego_lane(),
                speed: state.ego_speed(),
            });
        }
        Ok(action)
    })
}

fn in_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(work))
}

/// Evaluate `policy` on `settings.scenarios` seeded scenarios drawn from
/// `config`. Rows are reduced in scenario order, so the report does not
/// depend on the number of workers.
pub fn run_batch(
    policy: &dyn Policy,
    config: &ScenarioConfig,
    weights: &RewardWeights,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    config.validate()?;
    weights.validate()?;
    settings.validate()?;
    let rows: Vec<ScenarioRow> = in_pool(settings.jobs, || {
        (0..settings.scenarios)
            .into_par_iter()
            .map(|index| {
                let seed = scenario_seed(settings.seed, config.spawn_period_s, index);
                let scenario = batch_scenario(config, settings.seed, index)?;
                let outcome = run_scenario(
                    policy,
                    &scenario,
                    weights,
                    seed,
                    settings.noise,
                    settings.desired_speed_band,
                )?;
                Ok(ScenarioRow {
                    spawn_period_s: config.spawn_period_s,
                    index,
                    seed,
                    total_return: outcome.total_return,
                    collided: outcome.collided,
                    lane_changes: outcome.lane_changes,
                    pct_desired_speed: outcome.pct_desired_speed(),
                    steps: outcome.steps.len(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(MetricsReport::from_rows(
        policy.name(),
        config.spawn_period_s,
        settings.noise,
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub spawn_period_s: u32,
    pub noise: f64,
    pub scenarios: usize,
    pub collisions: usize,
}

/// Collision counts over density x measurement-error magnitude, one line
/// per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub policy: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn collisions(&self, spawn_period_s: u32, noise: f64) -> Option<usize> {
        self.cells
            .iter()
            .find(|c| c.spawn_period_s == spawn_period_s && c.noise == noise)
            .map(|c| c.collisions)
    }

    pub fn to_csv(&self) -> Result<String> {
        crate::table::to_csv(&self.cells)
    }
}

pub fn robustness_sweep(
    policy: &dyn Policy,
    config: &ScenarioConfig,
    weights: &RewardWeights,
    spawn_periods: &[u32],
    magnitudes: &[f64],
    settings: &EvalSettings,
) -> Result<SweepTable> {
    let mut cells = Vec::with_capacity(spawn_periods.len() * magnitudes.len());
    for &period in spawn_periods {
        let config = config.clone().with_spawn_period(period);
        for &noise in magnitudes {
            let settings = EvalSettings {
                noise,
                ..settings.clone()
            };
            let report = run_batch(policy, &config, weights, &settings)?;
            cells.push(SweepCell {
                spawn_period_s: period,
                noise,
                scenarios: report.scenarios,
                collisions: report.collisions,
            });
        }
    }
    Ok(SweepTable {
        policy: policy.name(),
        cells,
    })
}

/// Scenarios where `challenger` beats `reference` by more than the
/// dominance tolerance.
pub fn dominance_violations(reference: &MetricsReport, challenger: &MetricsReport) -> usize {
    reference
        .rows
        .iter()
        .zip(&challenger.rows)
        .filter(|(r, c)| {
            c.total_return > r.total_return + DOMINANCE_TOLERANCE * r.total_return.abs().max(1.0)
        })
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedReport {
    pub a: MetricsReport,
    pub b: MetricsReport,
    /// Scenarios where `b` returned more than `a`.
    pub dominance_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub spawn_period_s: u32,
    pub scenarios: usize,
    pub policy_a: String,
    pub collisions_a: usize,
    pub lane_changes_a: u64,
    pub pct_desired_speed_a: f64,
    pub mean_return_a: f64,
    pub policy_b: String,
    pub collisions_b: usize,
    pub lane_changes_b: u64,
    pub pct_desired_speed_b: f64,
    pub mean_return_b: f64,
    pub dominance_violations: usize,
}

impl PairedReport {
    pub fn row(&self) -> PairedRow {
        PairedRow {
            spawn_period_s: self.a.spawn_period_s,
            scenarios: self.a.scenarios,
            policy_a: self.a.policy.clone(),
            collisions_a: self.a.collisions,
            lane_changes_a: self.a.lane_changes_total,
            pct_desired_speed_a: self.a.pct_desired_speed,
            mean_return_a: self.a.mean_return,
            policy_b: self.b.policy.clone(),
            collisions_b: self.b.collisions,
            lane_changes_b: self.b.lane_changes_total,
            pct_desired_speed_b: self.b.pct_desired_speed,
            mean_return_b: self.b.mean_return,
            dominance_violations: self.dominance_violations,
        }
    }
}

pub fn pair(a: MetricsReport, b: MetricsReport) -> PairedReport {
    PairedReport {
        dominance_violations: dominance_violations(&a, &b),
        a,
        b,
    }
}

/// Run both policies on identical scenario seeds at each density.
pub fn compare_policies(
    policy_a: &dyn Policy,
    policy_b: &dyn Policy,
    config: &ScenarioConfig,
    weights: &RewardWeights,
    spawn_periods: &[u32],
    settings: &EvalSettings,
) -> Result<Vec<PairedReport>> {
    spawn_periods
        .iter()
        .map(|&period| {
            let config = config.clone().with_spawn_period(period);
            let a = run_batch(policy_a, &config, weights, settings)?;
            let b = run_batch(policy_b, &config, weights, settings)?;
            Ok(pair(a, b))
        })
        .collect()
}

pub fn comparison_csv(reports: &[PairedReport]) -> Result<String> {
    crate::table::to_csv(reports.iter().map(PairedReport::row))
}
