//! Kinematic three-lane freeway simulator.
//!
//! Manual vehicles enter at `x = 0`, keep their lane and drive at a constant
//! speed. The ego vehicle is stepped once per second with one of seven
//! high-level actions. Ego kinematics are kept on an exact integer lattice
//! (speed offset from the spawn speed, half-meter position offset from the
//! constant-speed trajectory) so that the DP solver and the simulator agree
//! bit for bit on every position they compute.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANE_COUNT: u8 = 3;
/// Length of every vehicle, ego included (meters).
pub const VEHICLE_LENGTH: f64 = 5.0;
pub const MIN_SPEED: f64 = 0.0;
pub const MAX_SPEED: f64 = 25.0;

/// A lane index; lane 0 is the leftmost lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Lane(u8);

impl Lane {
    pub const LEFT: Lane = Lane(0);
    pub const CENTER: Lane = Lane(1);
    pub const RIGHT: Lane = Lane(2);
    pub const ALL: [Lane; 3] = [Lane::LEFT, Lane::CENTER, Lane::RIGHT];

    pub fn new(index: u8) -> Option<Lane> {
        (index < LANE_COUNT).then_some(Lane(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Lane shifted by `delta` lanes, if it stays on the road.
    pub fn offset(self, delta: i8) -> Option<Lane> {
        let target = self.0 as i16 + delta as i16;
        u8::try_from(target).ok().and_then(Lane::new)
    }
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The seven high-level ego actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    LaneLeft,
    LaneRight,
    Accel1,
    Accel2,
    Decel1,
    Decel2,
    Maintain,
}

impl Action {
    pub const COUNT: usize = 7;

    /// Canonical order; `index()` is the position in this array and the
    /// output unit of the Q-network.
    pub const ALL: [Action; 7] = [
        Action::LaneLeft,
        Action::LaneRight,
        Action::Accel1,
        Action::Accel2,
        Action::Decel1,
        Action::Decel2,
        Action::Maintain,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::LaneLeft => 0,
            Action::LaneRight => 1,
            Action::Accel1 => 2,
            Action::Accel2 => 3,
            Action::Decel1 => 4,
            Action::Decel2 => 5,
            Action::Maintain => 6,
        }
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    /// Lateral move in lanes; negative is towards lane 0.
    pub fn lateral(self) -> i8 {
        match self {
            Action::LaneLeft => -1,
            Action::LaneRight => 1,
            _ => 0,
        }
    }

    /// Longitudinal acceleration in m/s².
    pub fn accel(self) -> i32 {
        match self {
            Action::Accel1 => 1,
            Action::Accel2 => 2,
            Action::Decel1 => -1,
            Action::Decel2 => -2,
            _ => 0,
        }
    }

    pub fn is_lane_change(self) -> bool {
        self.lateral() != 0
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::LaneLeft => "lane_left",
            Action::LaneRight => "lane_right",
            Action::Accel1 => "accel1",
            Action::Accel2 => "accel2",
            Action::Decel1 => "decel1",
            Action::Decel2 => "decel2",
            Action::Maintain => "maintain",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bit set over `Action::ALL`, indexed by `Action::index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ActionMask(u8);

impl ActionMask {
    pub const EMPTY: ActionMask = ActionMask(0);
    pub const FULL: ActionMask = ActionMask(0x7f);

    pub fn from_bits(bits: u8) -> ActionMask {
        ActionMask(bits & 0x7f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, action: Action) {
        self.0 |= 1 << action.index();
    }

    pub fn remove(&mut self, action: Action) {
        self.0 &= !(1 << action.index());
    }

    pub fn contains(self, action: Action) -> bool {
        self.contains_index(action.index())
    }

    pub fn contains_index(self, index: usize) -> bool {
        index < Action::COUNT && self.0 & (1 << index) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionMask {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut mask = ActionMask::EMPTY;
        for a in iter {
            mask.insert(a);
        }
        mask
    }
}

/// Actions available to an ego in `lane` driving at `speed`.
///
/// Lane changes off the road and accelerations leaving `[0, 25]` m/s are
/// masked. `Maintain` is always available.
pub fn feasible_mask(lane: Lane, speed: f64) -> ActionMask {
    Action::ALL
        .into_iter()
        .filter(|a| match a.lateral() {
            0 => {
                let next = speed + a.accel() as f64;
                (MIN_SPEED..=MAX_SPEED).contains(&next)
            }
            d => lane.offset(d).is_some(),
        })
        .chain(std::iter::once(Action::Maintain))
        .collect()
}

/// Position, speed and lane of one vehicle at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub lane: Lane,
    /// Front-bumper longitudinal position (m).
    pub x: f64,
    pub v: f64,
    pub length: f64,
}

impl VehicleState {
    pub fn rear(&self) -> f64 {
        self.x - self.length
    }
}

/// Bumper-to-bumper longitudinal distance between two vehicle bodies,
/// zero when they overlap.
pub fn longitudinal_gap(a_front: f64, a_length: f64, b_front: f64, b_length: f64) -> f64 {
    let b_ahead = (b_front - b_length) - a_front;
    let b_behind = (a_front - a_length) - b_front;
    b_ahead.max(b_behind).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Ego decision steps per episode (1 s each).
    pub duration_steps: u32,
    /// Seconds between consecutive vehicle entries.
    pub spawn_period_s: u32,
    /// 1-based index of the spawn event that is the ego vehicle.
    pub ego_spawn_index: u32,
    pub speed_low: f64,
    pub speed_high: f64,
    pub desired_speed: f64,
    /// An entry lane is blocked while the rear of its last vehicle is within
    /// this distance of `x = 0`.
    pub min_entry_gap: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration_steps: 60,
            spawn_period_s: 2,
            ego_spawn_index: 10,
            speed_low: 12.0,
            speed_high: 17.0,
            desired_speed: 21.0,
            min_entry_gap: 10.0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_spawn_period(mut self, seconds: u32) -> Self {
        self.spawn_period_s = seconds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.spawn_period_s == 0 {
            return fail("spawn_period_s must be positive");
        }
        if self.ego_spawn_index == 0 {
            return fail("ego_spawn_index must be at least 1");
        }
        if !(self.speed_low.is_finite() && self.speed_high.is_finite()) {
            return fail("speed bounds must be finite");
        }
        if self.speed_low > self.speed_high {
            return fail("speed_low must not exceed speed_high");
        }
        if self.speed_low < MIN_SPEED || self.speed_high > MAX_SPEED {
            return fail("spawn speeds must lie within [0, 25] m/s");
        }
        if !(self.desired_speed.is_finite() && self.desired_speed >= 0.0) {
            return fail("desired_speed must be a non-negative number");
        }
        if !(self.min_entry_gap.is_finite() && self.min_entry_gap >= 0.0) {
            return fail("min_entry_gap must be a non-negative number");
        }
        Ok(())
    }
}

/// One vehicle entering the road at `x = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpawnEvent {
    /// Absolute entry time (s).
    pub time_s: u32,
    pub lane: Lane,
    pub v0: f64,
    pub is_ego: bool,
}

impl SpawnEvent {
    /// Front-bumper position at absolute time `time_s`, if already on the road.
    pub fn front_at(&self, time_s: u32) -> Option<f64> {
        (time_s >= self.time_s).then(|| self.v0 * (time_s - self.time_s) as f64)
    }
}

/// A fully determined traffic scenario: the ordered spawn events plus the
/// episode length counted from the ego's entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    events: Vec<SpawnEvent>,
    duration_steps: u32,
    ego_event: usize,
}

impl Scenario {
    /// Build a scenario from explicit events. Exactly one event must be the
    /// ego and events must be ordered by entry time.
    pub fn new(events: Vec<SpawnEvent>, duration_steps: u32) -> Result<Scenario> {
        let mut egos = events.iter().enumerate().filter(|(_, e)| e.is_ego);
        let ego_event = match (egos.next(), egos.next()) {
            (Some((i, _)), None) => i,
            _ => {
                return Err(Error::Scenario(
                    "scenario must contain exactly one ego event".into(),
                ))
            }
        };
        if events.windows(2).any(|w| w[0].time_s > w[1].time_s) {
            return Err(Error::Scenario("spawn events must be time-ordered".into()));
        }
        if let Some(e) = events
            .iter()
            .find(|e| !(e.v0.is_finite() && (MIN_SPEED..=MAX_SPEED).contains(&e.v0)))
        {
            return Err(Error::Scenario(format!(
                "spawn speed {} out of range",
                e.v0
            )));
        }
        Ok(Scenario {
            events,
            duration_steps,
            ego_event,
        })
    }

    pub fn events(&self) -> &[SpawnEvent] {
        &self.events
    }

    pub fn duration_steps(&self) -> u32 {
        self.duration_steps
    }

    /// Vehicle id of the ego (its spawn-event index).
    pub fn ego_id(&self) -> usize {
        self.ego_event
    }

    pub fn ego_event(&self) -> &SpawnEvent {
        &self.events[self.ego_event]
    }

    pub fn ego_spawn_time(&self) -> u32 {
        self.ego_event().time_s
    }

    /// Same scenario with a different episode length.
    pub fn truncated(&self, duration_steps: u32) -> Scenario {
        Scenario {
            duration_steps,
            ..self.clone()
        }
    }

    /// Manual vehicles on the road at episode step `t`.
    pub fn manual_vehicles_at(&self, t: u32) -> impl Iterator<Item = VehicleState> + '_ {
        let now = self.ego_spawn_time() + t;
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_ego)
            .filter_map(move |(id, e)| {
                e.front_at(now).map(|x| VehicleState {
                    id,
                    lane: e.lane,
                    x,
                    v: e.v0,
                    length: VEHICLE_LENGTH,
                })
            })
    }

    /// Line-oriented text form: `time_s lane v0 is_ego`, one event per line,
    /// preceded by a `duration_steps N` header. Speeds use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut out = format!("duration_steps {}\n", self.duration_steps);
        for e in &self.events {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.time_s,
                e.lane,
                e.v0,
                u8::from(e.is_ego)
            ));
        }
        out
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(text: &str) -> Result<Scenario> {
        let bad = |line: usize, msg: &str| Error::Scenario(format!("line {}: {}", line + 1, msg));
        let mut duration = None;
        let mut events = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "duration_steps" {
                let value = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(n, "invalid duration_steps"))?;
                duration = Some(value);
                continue;
            }
            if fields.len() != 4 {
                return Err(bad(n, "expected `time_s lane v0 is_ego`"));
            }
            let time_s = fields[0].parse().map_err(|_| bad(n, "invalid time"))?;
            let lane = fields[1]
                .parse()
                .ok()
                .and_then(Lane::new)
                .ok_or_else(|| bad(n, "invalid lane"))?;
            let v0 = fields[2].parse().map_err(|_| bad(n, "invalid speed"))?;
            let is_ego = match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(n, "is_ego must be 0 or 1")),
            };
            events.push(SpawnEvent {
                time_s,
                lane,
                v0,
                is_ego,
            });
        }
        let duration = duration.ok_or_else(|| Error::Scenario("missing duration_steps".into()))?;
        Scenario::new(events, duration)
    }
}

/// Draw a scenario: one entry every `spawn_period_s` seconds, uniform lane,
/// uniform speed in `[speed_low, speed_high]`. Lanes whose entry is blocked
/// by an earlier vehicle are not drawn; when all three are blocked the
/// entry waits one second. Entries continue until the ego's episode ends.
///
/// For blocking, the ego is assumed to hold its entry lane and speed; its
/// actual motion depends on the policy and is unknown here.
pub fn generate_scenario<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<Scenario> {
    config.validate()?;
    let period = config.spawn_period_s;
    let ego_index = config.ego_spawn_index as usize - 1;

    let mut events: Vec<SpawnEvent> = Vec::new();
    // (event index, speed) of entries waiting to be placed, FIFO.
    let mut pending: std::collections::VecDeque<(usize, f64)> = Default::default();
    let mut next_nominal: u64 = 0;
    let mut drawn = 0usize;
    let mut end_time: Option<u64> = None;
    let mut now: u64 = 0;

    loop {
        if let Some(end) = end_time {
            if now > end {
                break;
            }
        }
        while next_nominal * period as u64 == now {
            let v0 = if config.speed_low == config.speed_high {
                config.speed_low
            } else {
                rng.gen_range(config.speed_low..=config.speed_high)
            };
            pending.push_back((drawn, v0));
            drawn += 1;
            next_nominal += 1;
        }
        while let Some(&(index, v0)) = pending.front() {
            let open: Vec<Lane> = Lane::ALL
                .into_iter()
                .filter(|&lane| entry_clear(&events, lane, now as u32, config.min_entry_gap))
                .collect();
            let Some(&lane) = open.choose(rng) else {
                break;
            };
            pending.pop_front();
            let is_ego = index == ego_index;
            events.push(SpawnEvent {
                time_s: now as u32,
                lane,
                v0,
                is_ego,
            });
            if is_ego {
                end_time = Some(now + config.duration_steps as u64);
            }
        }
        now += 1;
    }
    Scenario::new(events, config.duration_steps)
}

fn entry_clear(events: &[SpawnEvent], lane: Lane, now: u32, min_gap: f64) -> bool {
    events
        .iter()
        .filter(|e| e.lane == lane)
        .filter_map(|e| e.front_at(now))
        .all(|front| front - VEHICLE_LENGTH > min_gap)
}

/// Exact ego kinematic state.
///
/// `speed = v0 + speed_offset` and
/// `x = t * v0 + half_meters / 2` (entry at `x = 0`), so every reachable
/// state is an integer point and positions are recomputed in closed form
/// instead of being accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EgoLattice {
    pub t: u32,
    pub lane: Lane,
    pub speed_offset: i32,
    pub half_meters: i64,
}

impl EgoLattice {
    pub fn origin(lane: Lane) -> Self {
        Self {
            t: 0,
            lane,
            speed_offset: 0,
            half_meters: 0,
        }
    }

    pub fn speed(&self, v0: f64) -> f64 {
        ego_speed(v0, self.speed_offset)
    }

    pub fn front(&self, v0: f64) -> f64 {
        ego_front(v0, self.t, self.half_meters)
    }

    /// Successor after one decision step. Assumes the action is feasible.
    pub fn advance(&self, action: Action) -> EgoLattice {
        let a = action.accel();
        EgoLattice {
            t: self.t + 1,
            lane: self.lane.offset(action.lateral()).unwrap_or(self.lane),
            speed_offset: self.speed_offset + a,
            // displacement v + a/2 = v0 + offset + a/2
            half_meters: self.half_meters + 2 * self.speed_offset as i64 + a as i64,
        }
    }
}

pub fn ego_speed(v0: f64, speed_offset: i32) -> f64 {
    v0 + speed_offset as f64
}

pub fn ego_front(v0: f64, t: u32, half_meters: i64) -> f64 {
    t as f64 * v0 + half_meters as f64 * 0.5
}

/// Simulator state at one decision instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub ego_id: usize,
    pub ego_v0: f64,
    pub ego: EgoLattice,
    /// Manual vehicles currently on the road, in spawn order.
    pub vehicles: Vec<VehicleState>,
    pub prev_ego_speed: f64,
    pub prev_ego_lane: Lane,
    pub collided: bool,
}

impl SimState {
    pub fn t(&self) -> u32 {
        self.ego.t
    }

    pub fn ego_speed(&self) -> f64 {
        self.ego.speed(self.ego_v0)
    }

    pub fn ego_lane(&self) -> Lane {
        self.ego.lane
    }

    pub fn ego_vehicle(&self) -> VehicleState {
        VehicleState {
            id: self.ego_id,
            lane: self.ego.lane,
            x: self.ego.front(self.ego_v0),
            v: self.ego_speed(),
            length: VEHICLE_LENGTH,
        }
    }

    pub fn feasible_actions(&self) -> ActionMask {
        feasible_mask(self.ego.lane, self.ego_speed())
    }
}

/// Whether any sensed same-lane vehicle has a proximity penalty of at least
/// one, i.e. sits within `min_safe_distance` of the ego.
pub fn detect_collision(state: &SimState, min_safe_distance: f64) -> bool {
    let sensed = crate::perception::sense_obstacles(state);
    sensed.items.iter().any(|o| {
        o.lane == sensed.ego_lane && is_collision_gap(o.gap(sensed.ego_length), min_safe_distance)
    })
}

/// Collision test on one same-lane gap: the proximity penalty reaches 1.
pub fn is_collision_gap(gap: f64, min_safe_distance: f64) -> bool {
    crate::reward::proximity_penalty(gap, min_safe_distance, true).is_ok_and(|f| f >= 1.0)
}

/// Steps one scenario. Holds no mutable state; every call maps a state to
/// its successor.
#[derive(Clone, Copy, Debug)]
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    min_safe_distance: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario, min_safe_distance: f64) -> Self {
        Self {
            scenario,
            min_safe_distance,
        }
    }

    pub fn scenario(&self) -> &'a Scenario {
        self.scenario
    }

    pub fn initial_state(&self) -> SimState {
        let ego = self.scenario.ego_event();
        let mut state = SimState {
            ego_id: self.scenario.ego_id(),
            ego_v0: ego.v0,
            ego: EgoLattice::origin(ego.lane),
            vehicles: self.scenario.manual_vehicles_at(0).collect(),
            prev_ego_speed: ego.v0,
            prev_ego_lane: ego.lane,
            collided: false,
        };
        state.collided = detect_collision(&state, self.min_safe_distance);
        state
    }

    pub fn step(&self, state: &SimState, action: Action) -> Result<SimState> {
        if state.collided {
            return Err(Error::EpisodeOver);
        }
        if !state.feasible_actions().contains(action) {
            return Err(Error::InfeasibleAction {
                action,
                lane: state.ego.lane,
                speed: state.ego_speed(),
            });
        }
        let ego = state.ego.advance(action);
        let mut next = SimState {
            ego_id: state.ego_id,
            ego_v0: state.ego_v0,
            ego,
            vehicles: self.scenario.manual_vehicles_at(ego.t).collect(),
            prev_ego_speed: state.ego_speed(),
            prev_ego_lane: state.ego.lane,
            collided: false,
        };
        next.collided = detect_collision(&next, self.min_safe_distance);
        Ok(next)
    }

    pub fn is_final(&self, state: &SimState) -> bool {
        state.collided || state.t() >= self.scenario.duration_steps()
    }
}
