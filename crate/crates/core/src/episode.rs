//! Closed-loop rollout of one scenario under an arbitrary action source.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::perception::sense_obstacles;
use crate::reward::{stranded_step_reward, total_reward, RewardBreakdown, RewardWeights};
use crate::sim::{Action, Lane, Scenario, SimState, Simulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step index at which the action was taken.
    pub t: u32,
    pub lane: Lane,
    pub x: f64,
    pub v: f64,
    pub action: Action,
    pub reward: RewardBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub steps: Vec<StepRecord>,
    /// Undiscounted sum of per-step rewards, including `collision_tail`.
    pub total_return: f64,
    /// Stranded-step reward charged for the steps a collision cut off.
    pub collision_tail: f64,
    pub collided: bool,
    pub lane_changes: u32,
    /// Post-step states with `|v - v_d| <= band`.
    pub steps_at_desired_speed: u32,
    /// Nominal episode length; steps lost to a collision count as not at
    /// desired speed.
    pub duration_steps: u32,
}

impl EpisodeOutcome {
    pub fn pct_desired_speed(&self) -> f64 {
        if self.duration_steps == 0 {
            return 100.0;
        }
        100.0 * self.steps_at_desired_speed as f64 / self.duration_steps as f64
    }
}

/// Reward for the steps remaining after a collision at step `t`.
pub fn collision_tail(horizon: u32, t: u32, weights: &RewardWeights) -> f64 {
    horizon.saturating_sub(t) as f64 * stranded_step_reward(weights)
}

/// Roll `scenario` to its end or first collision, asking `choose` for each
/// ego action.
pub fn run_episode<F>(
    scenario: &Scenario,
    weights: &RewardWeights,
    desired_speed_band: f64,
    mut choose: F,
) -> Result<EpisodeOutcome>
where
    F: FnMut(&SimState) -> Result<Action>,
{
    let sim = Simulator::new(scenario, weights.delta0);
    let mut state = sim.initial_state();
    let mut out = EpisodeOutcome {
        steps: Vec::with_capacity(scenario.duration_steps() as usize),
        total_return: 0.0,
        collision_tail: 0.0,
        collided: state.collided,
        lane_changes: 0,
        steps_at_desired_speed: 0,
        duration_steps: scenario.duration_steps(),
    };
    while !sim.is_final(&state) {
        let action = choose(&state)?;
        let next = sim.step(&state, action)?;
        let reward = total_reward(
            &sense_obstacles(&next),
            next.ego_speed(),
            next.prev_ego_speed,
            next.ego_lane(),
            next.prev_ego_lane,
            weights,
        );
        out.total_return += reward.total;
        out.lane_changes += reward.lane_change;
        if (next.ego_speed() - weights.desired_speed).abs() <= desired_speed_band {
            out.steps_at_desired_speed += 1;
        }
        let ego = state.ego_vehicle();
        out.steps.push(StepRecord {
            t: state.t(),
            lane: ego.lane,
            x: ego.x,
            v: ego.v,
            action,
            reward,
        });
        out.collided = next.collided;
        state = next;
    }
    if out.collided {
        out.collision_tail = collision_tail(scenario.duration_steps(), state.t(), weights);
        out.total_return += out.collision_tail;
    }
    Ok(out)
}
