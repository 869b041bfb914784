//! Five-term per-step reward: proximity, speed deviation, collisions,
//! acceleration and lane changes, combined as a negative weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::SensedObstacles;
use crate::sim::Lane;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Proximity penalty weight.
    pub w1: f64,
    /// Speed-deviation weight.
    pub w2: f64,
    /// Collision weight.
    pub w3: f64,
    /// Acceleration weight.
    pub w4: f64,
    /// Lane-change weight.
    pub w5: f64,
    /// Minimum safe distance (m); the proximity penalty is 1 at this gap.
    pub delta0: f64,
    /// Desired ego speed (m/s).
    pub desired_speed: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.5,
            w3: 20.0,
            w4: 0.01,
            w5: 0.01,
            delta0: 10.0,
            desired_speed: 21.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3, self.w4, self.w5];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "reward weights must be finite and >= 0".into(),
            ));
        }
        if !(self.delta0.is_finite() && self.delta0 > 0.0) {
            return Err(Error::Config("delta0 must be positive".into()));
        }
        if !self.desired_speed.is_finite() {
            return Err(Error::Config("desired_speed must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub proximity_sum: f64,
    pub speed_dev: f64,
    pub collision_count: u32,
    pub accel: f64,
    pub lane_change: u32,
    pub total: f64,
}

/// `exp(-(delta - delta0))` for a same-lane obstacle, zero otherwise.
pub fn proximity_penalty(delta: f64, delta0: f64, same_lane: bool) -> Result<f64> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gap must be non-negative, got {delta}"
        )));
    }
    Ok(if same_lane {
        (delta0 - delta).exp()
    } else {
        0.0
    })
}

pub fn speed_penalty(v: f64, desired: f64) -> f64 {
    (v - desired).powi(2)
}

pub fn accel_penalty(v: f64, v_prev: f64) -> f64 {
    (v - v_prev).powi(2)
}

pub fn lane_change_penalty(lane: Lane, lane_prev: Lane) -> u32 {
    u32::from(lane != lane_prev)
}

/// Combine the per-term penalties into the weighted total.
pub fn combine(
    proximity_sum: f64,
    speed_dev: f64,
    collision_count: u32,
    accel: f64,
    lane_change: u32,
    w: &RewardWeights,
) -> RewardBreakdown {
    let total = -w.w1 * proximity_sum
        - w.w2 * speed_dev
        - w.w3 * collision_count as f64
        - w.w4 * accel
        - w.w5 * lane_change as f64;
    RewardBreakdown {
        proximity_sum,
        speed_dev,
        collision_count,
        accel,
        lane_change,
        total,
    }
}

/// Per-step reward charged for every step left in the horizon after a
/// collision: the ego is stopped (speed penalty at zero speed) and remains
/// in collision at the threshold proximity.
pub fn stranded_step_reward(w: &RewardWeights) -> f64 {
    combine(1.0, speed_penalty(0.0, w.desired_speed), 1, 0.0, 0, w).total
}

/// Reward for the transition that ended with the ego at (`v`, `lane`) and
/// sensing `obstacles`, coming from (`v_prev`, `lane_prev`).
pub fn total_reward(
    obstacles: &SensedObstacles,
    v: f64,
    v_prev: f64,
    lane: Lane,
    lane_prev: Lane,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let mut proximity_sum = 0.0;
    let mut collision_count = 0;
    for o in &obstacles.items {
        let gap = o.gap(obstacles.ego_length);
        // gaps come from the geometry and are never negative
        let f = proximity_penalty(gap, weights.delta0, o.lane == lane).unwrap_or(0.0);
        proximity_sum += f;
        if f >= 1.0 {
            collision_count += 1;
        }
    }
    combine(
        proximity_sum,
        speed_penalty(v, weights.desired_speed),
        collision_count,
        accel_penalty(v, v_prev),
        lane_change_penalty(lane, lane_prev),
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::SensedObstacle;
    use proptest::prelude::*;

    fn obstacles(lane: Lane, gaps: &[(u8, f64)]) -> SensedObstacles {
        SensedObstacles {
            ego_lane: lane,
            ego_speed: 21.0,
            ego_length: 5.0,
            items: gaps
                .iter()
                .enumerate()
                .map(|(i, &(l, gap))| SensedObstacle {
                    id: i,
                    lane: Lane::new(l).unwrap(),
                    offset: gap,
                    speed: 15.0,
                    length: 5.0,
                })
                .collect(),
        }
    }

    #[test]
    fn proximity_points() {
        assert_eq!(proximity_penalty(10.0, 10.0, true).unwrap(), 1.0);
        assert_eq!(proximity_penalty(3.0, 10.0, false).unwrap(), 0.0);
        assert_eq!(proximity_penalty(120.0, 10.0, false).unwrap(), 0.0);
        let v = proximity_penalty(12.0, 10.0, true).unwrap();
        assert!((v - 0.135335283236612).abs() < 1e-12);
        assert!(proximity_penalty(-0.1, 10.0, true).is_err());
    }

    #[test]
    fn quadratic_and_indicator_points() {
        assert_eq!(speed_penalty(21.0, 21.0), 0.0);
        assert_eq!(speed_penalty(17.0, 21.0), 16.0);
        assert_eq!(speed_penalty(23.0, 21.0), 4.0);
        assert_eq!(accel_penalty(15.0, 15.0), 0.0);
        assert_eq!(accel_penalty(16.0, 14.0), 4.0);
        assert_eq!(accel_penalty(20.0, 21.0), 1.0);
        assert_eq!(lane_change_penalty(Lane::CENTER, Lane::CENTER), 0);
        assert_eq!(lane_change_penalty(Lane::LEFT, Lane::CENTER), 1);
        assert_eq!(lane_change_penalty(Lane::RIGHT, Lane::CENTER), 1);
    }

    #[test]
    fn total_reward_points() {
        let w = RewardWeights::default();
        let none = obstacles(Lane::CENTER, &[]);
        let r = total_reward(&none, 21.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
        assert_eq!(r.total, 0.0);

        let at_threshold = obstacles(Lane::CENTER, &[(1, 10.0)]);
        let r = total_reward(&at_threshold, 21.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
        assert_eq!(r.collision_count, 1);
        assert_eq!(r.proximity_sum, 1.0);
        assert_eq!(r.total, -21.0);

        let r = total_reward(&none, 19.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
        assert!((r.total - -2.04).abs() < 1e-12);
    }

    #[test]
    fn stranded_step_is_worse_than_any_safe_step() {
        let w = RewardWeights::default();
        assert_eq!(stranded_step_reward(&w), -(1.0 + 0.5 * 441.0 + 20.0));
        // a safe step at the worst speed, with two close same-lane vehicles
        let worst_safe = combine(2.0, speed_penalty(0.0, 21.0), 0, 4.0, 1, &w).total;
        assert!(stranded_step_reward(&w) < worst_safe);
    }

    #[test]
    fn adjacent_lane_obstacles_count_but_contribute_nothing() {
        let w = RewardWeights::default();
        let adj = obstacles(Lane::CENTER, &[(0, 0.0), (2, 1.0)]);
        let r = total_reward(&adj, 21.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
        assert_eq!(adj.count(), 2);
        assert_eq!(r.total, 0.0);
        assert_eq!(r.collision_count, 0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = RewardWeights {
            w3: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = RewardWeights {
            delta0: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(RewardWeights::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn reward_is_never_positive(
            gaps in proptest::collection::vec((0u8..3, 0.0f64..150.0), 0..6),
            v in 0.0f64..25.0, dv in -2i32..=2, lane in 0u8..3, prev in 0u8..3,
        ) {
            let lane = Lane::new(lane).unwrap();
            let r = total_reward(
                &obstacles(lane, &gaps),
                v,
                v - dv as f64,
                lane,
                Lane::new(prev).unwrap(),
                &RewardWeights::default(),
            );
            prop_assert!(r.total <= 0.0);
            prop_assert!(r.collision_count as usize <= gaps.len());
            let w = RewardWeights::default();
            let rebuilt = -w.w1 * r.proximity_sum - w.w2 * r.speed_dev
                - w.w3 * r.collision_count as f64 - w.w4 * r.accel - w.w5 * r.lane_change as f64;
            prop_assert_eq!(rebuilt, r.total);
        }

        #[test]
        fn closer_same_lane_obstacle_costs_more(gap in 0.0f64..120.0, shrink in 0.01f64..5.0) {
            let w = RewardWeights::default();
            let far = obstacles(Lane::CENTER, &[(1, gap + shrink)]);
            let near = obstacles(Lane::CENTER, &[(1, gap)]);
            let rf = total_reward(&far, 21.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
            let rn = total_reward(&near, 21.0, 21.0, Lane::CENTER, Lane::CENTER, &w);
            prop_assert!(rn.proximity_sum > rf.proximity_sum);
        }
    }
}
