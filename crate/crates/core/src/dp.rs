//! Exact finite-horizon dynamic programming over the ego's reachable lattice.
//!
//! Manual vehicles move at constant speed, so their positions at every step
//! are known in closed form and the only free state is the ego's
//! `(t, lane, speed offset, half-meter offset)`. The reachable set is built
//! forward from the entry state, with collision states kept as absorbing
//! terminals, and values are then computed backward with the undiscounted
//! per-step reward. There is no discretization: every lattice point is an
//! exact ego state of the simulator.
//!
//! Ties between equally good actions go to the first action in
//! [`TIE_BREAK_ORDER`].

use serde::Serialize;

use crate::episode::{collision_tail, run_episode, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::perception::observe_vehicle;
use crate::reward::{
    accel_penalty, combine, lane_change_penalty, proximity_penalty, speed_penalty, RewardWeights,
};
use crate::sim::{
    ego_front, ego_speed, feasible_mask, is_collision_gap, Action, EgoLattice, Lane, Scenario,
    VehicleState, VEHICLE_LENGTH,
};

/// Maintain first, then smaller |a| (accelerate before decelerate), then
/// lane changes left before right.
pub const TIE_BREAK_ORDER: [Action; 7] = [
    Action::Maintain,
    Action::Accel1,
    Action::Decel1,
    Action::Accel2,
    Action::Decel2,
    Action::LaneLeft,
    Action::LaneRight,
];

const UNREACHED: u8 = 0;
const OPEN: u8 = 1;
const COLLIDED: u8 = 2;
const NO_ACTION: u8 = u8::MAX;

/// How a lattice state ends up after forward construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Open,
    Collided,
}

#[derive(Clone, Copy, Debug)]
struct Row {
    h_lo: i64,
    len: usize,
    start: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    v_lo: i32,
    n_v: usize,
    rows: Vec<Row>,
    status: Vec<u8>,
    proximity: Vec<f64>,
    collisions: Vec<u8>,
    value: Vec<f64>,
    action: Vec<u8>,
}

impl Layer {
    fn row_index(&self, lane: Lane, speed_offset: i32) -> Option<usize> {
        let vi = speed_offset - self.v_lo;
        (vi >= 0 && (vi as usize) < self.n_v)
            .then(|| lane.index() as usize * self.n_v + vi as usize)
    }

    fn cell(&self, lane: Lane, speed_offset: i32, half_meters: i64) -> Option<usize> {
        let row = self.rows[self.row_index(lane, speed_offset)?];
        let d = half_meters - row.h_lo;
        if d < 0 || d % 2 != 0 || (d / 2) as usize >= row.len {
            return None;
        }
        Some(row.start + (d / 2) as usize)
    }

    fn states(&self, t: u32) -> impl Iterator<Item = (EgoLattice, usize)> + '_ {
        self.rows.iter().enumerate().flat_map(move |(ri, row)| {
            let lane = Lane::new((ri / self.n_v) as u8).expect("row lane");
            let speed_offset = self.v_lo + (ri % self.n_v) as i32;
            (0..row.len).map(move |k| {
                (
                    EgoLattice {
                        t,
                        lane,
                        speed_offset,
                        half_meters: row.h_lo + 2 * k as i64,
                    },
                    row.start + k,
                )
            })
        })
    }
}

/// Manual-vehicle positions per step and lane, sorted front to rear.
struct Traffic {
    lanes: Vec<[Vec<VehicleState>; 3]>,
}

impl Traffic {
    fn new(scenario: &Scenario, horizon: u32) -> Self {
        let lanes = (0..=horizon)
            .map(|t| {
                let mut by_lane: [Vec<VehicleState>; 3] = Default::default();
                for v in scenario.manual_vehicles_at(t) {
                    by_lane[v.lane.index() as usize].push(v);
                }
                for l in &mut by_lane {
                    l.sort_by(|a, b| b.rear().total_cmp(&a.rear()).then(a.id.cmp(&b.id)));
                }
                by_lane
            })
            .collect();
        Self { lanes }
    }

    /// Same-lane proximity sum and collision count for an ego front bumper
    /// at `x`, summed in the order the sensing pipeline uses.
    fn node_terms(&self, t: u32, lane: Lane, x: f64, delta0: f64) -> (f64, u8) {
        let ego = VehicleState {
            id: usize::MAX,
            lane,
            x,
            v: 0.0,
            length: VEHICLE_LENGTH,
        };
        let vehicles = &self.lanes[t as usize][lane.index() as usize];
        let first = vehicles.partition_point(|v| v.rear() - x >= 101.0);
        let mut proximity = 0.0;
        let mut collisions = 0u8;
        for v in &vehicles[first..] {
            let Some(o) = observe_vehicle(&ego, v) else {
                if v.x - x <= -75.0 {
                    break;
                }
                continue;
            };
            let gap = o.gap(VEHICLE_LENGTH);
            proximity += proximity_penalty(gap, delta0, true).unwrap_or(0.0);
            if is_collision_gap(gap, delta0) {
                collisions = collisions.saturating_add(1);
            }
        }
        (proximity, collisions)
    }
}

/// The reachable ego states of one scenario, layer by layer.
#[derive(Clone, Debug)]
pub struct Lattice {
    v0: f64,
    horizon: u32,
    weights: RewardWeights,
    layers: Vec<Layer>,
    solved: bool,
}

/// Forward breadth-first construction over feasible actions. Collision
/// states get no successors.
pub fn build_reachable_lattice(
    scenario: &Scenario,
    horizon: u32,
    weights: &RewardWeights,
) -> Lattice {
    let traffic = Traffic::new(scenario, horizon);
    let ego = scenario.ego_event();
    let v0 = ego.v0;

    let mut first = Layer {
        v_lo: 0,
        n_v: 1,
        rows: (0..3)
            .map(|l| Row {
                h_lo: 0,
                len: usize::from(l == ego.lane.index()),
                start: 0,
            })
            .collect(),
        status: vec![UNREACHED],
        proximity: vec![0.0],
        collisions: vec![0],
        value: vec![0.0],
        action: vec![NO_ACTION],
    };
    let (p, c) = traffic.node_terms(0, ego.lane, ego_front(v0, 0, 0), weights.delta0);
    first.proximity[0] = p;
    first.collisions[0] = c;
    first.status[0] = if c > 0 { COLLIDED } else { OPEN };

    let mut layers = vec![first];
    for t in 0..horizon {
        let next = expand(&layers[t as usize], t, v0, &traffic, weights.delta0);
        layers.push(next);
    }
    Lattice {
        v0,
        horizon,
        weights: *weights,
        layers,
        solved: false,
    }
}

fn successors(
    layer: &Layer,
    t: u32,
    v0: f64,
) -> impl Iterator<Item = (EgoLattice, EgoLattice)> + '_ {
    layer
        .states(t)
        .filter(|(_, idx)| layer.status[*idx] == OPEN)
        .flat_map(move |(s, _)| {
            feasible_mask(s.lane, s.speed(v0))
                .iter()
                .map(move |a| (s, s.advance(a)))
        })
}

fn expand(layer: &Layer, t: u32, v0: f64, traffic: &Traffic, delta0: f64) -> Layer {
    let v_lo = layer.v_lo - 2;
    let n_v = layer.n_v + 4;
    let mut bounds = vec![(i64::MAX, i64::MIN); 3 * n_v];
    for (_, s) in successors(layer, t, v0) {
        let ri = s.lane.index() as usize * n_v + (s.speed_offset - v_lo) as usize;
        let b = &mut bounds[ri];
        b.0 = b.0.min(s.half_meters);
        b.1 = b.1.max(s.half_meters);
    }
    let mut rows = Vec::with_capacity(bounds.len());
    let mut total = 0;
    for &(lo, hi) in &bounds {
        let len = if lo > hi {
            0
        } else {
            ((hi - lo) / 2 + 1) as usize
        };
        rows.push(Row {
            h_lo: if len == 0 { 0 } else { lo },
            len,
            start: total,
        });
        total += len;
    }
    let mut next = Layer {
        v_lo,
        n_v,
        rows,
        status: vec![UNREACHED; total],
        proximity: vec![0.0; total],
        collisions: vec![0; total],
        value: vec![0.0; total],
        action: vec![NO_ACTION; total],
    };
    let succ: Vec<EgoLattice> = successors(layer, t, v0).map(|(_, s)| s).collect();
    for s in succ {
        let idx = next
            .cell(s.lane, s.speed_offset, s.half_meters)
            .expect("successor inside its own bounds");
        if next.status[idx] != UNREACHED {
            continue;
        }
        let x = ego_front(v0, s.t, s.half_meters);
        let (p, c) = traffic.node_terms(s.t, s.lane, x, delta0);
        next.proximity[idx] = p;
        next.collisions[idx] = c;
        next.status[idx] = if c > 0 { COLLIDED } else { OPEN };
    }
    next
}

impl Lattice {
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Number of reachable states at step `t`.
    pub fn state_count(&self, t: u32) -> usize {
        self.layers[t as usize]
            .status
            .iter()
            .filter(|&&s| s != UNREACHED)
            .count()
    }

    pub fn total_states(&self) -> usize {
        (0..=self.horizon).map(|t| self.state_count(t)).sum()
    }

    /// Reachable states at step `t` with their kind.
    pub fn states(&self, t: u32) -> Vec<(EgoLattice, CellKind)> {
        let layer = &self.layers[t as usize];
        layer
            .states(t)
            .filter_map(|(s, idx)| match layer.status[idx] {
                OPEN => Some((s, CellKind::Open)),
                COLLIDED => Some((s, CellKind::Collided)),
                _ => None,
            })
            .collect()
    }

    pub fn kind(&self, state: &EgoLattice) -> Option<CellKind> {
        let layer = self.layers.get(state.t as usize)?;
        let idx = layer.cell(state.lane, state.speed_offset, state.half_meters)?;
        match layer.status[idx] {
            OPEN => Some(CellKind::Open),
            COLLIDED => Some(CellKind::Collided),
            _ => None,
        }
    }

    fn index(&self, state: &EgoLattice) -> Option<(usize, usize)> {
        let layer = self.layers.get(state.t as usize)?;
        let idx = layer.cell(state.lane, state.speed_offset, state.half_meters)?;
        (layer.status[idx] != UNREACHED).then_some((state.t as usize, idx))
    }

    /// Reward of the transition `from --action--> to`, matching the
    /// simulator's reward on the same transition bit for bit.
    fn transition_reward(&self, from: &EgoLattice, to: &EgoLattice, to_idx: usize) -> f64 {
        transition_reward_parts(
            &self.v0,
            &self.weights,
            &self.layers[to.t as usize],
            from,
            to,
            to_idx,
        )
    }
}

/// Optimal values and actions over a solved lattice.
#[derive(Clone, Debug)]
pub struct DpSolution {
    lattice: Lattice,
}

/// Backward induction: `V(T) = 0`, a collision state is worth the
/// stranded-step reward for each step it cuts off, and
/// `V(s) = max_a r(s, a, s') + V(s')` elsewhere.
pub fn backward_induction(mut lattice: Lattice) -> Result<DpSolution> {
    let horizon = lattice.horizon;
    for t in (0..horizon).rev() {
        let (head, tail) = lattice.layers.split_at_mut(t as usize + 1);
        let layer = &mut head[t as usize];
        let next = &tail[0];
        let last = t + 1 == horizon;
        let cells: Vec<(EgoLattice, usize)> = layer
            .states(t)
            .filter(|(_, idx)| layer.status[*idx] == OPEN)
            .collect();
        for (s, idx) in cells {
            let mask = feasible_mask(s.lane, s.speed(lattice.v0));
            let mut best = f64::NEG_INFINITY;
            let mut best_action = NO_ACTION;
            for a in TIE_BREAK_ORDER.into_iter().filter(|a| mask.contains(*a)) {
                let succ = s.advance(a);
                let Some(sidx) = next.cell(succ.lane, succ.speed_offset, succ.half_meters) else {
                    return Err(Error::Solver(format!(
                        "successor {succ:?} missing from lattice"
                    )));
                };
                let continuation = match next.status[sidx] {
                    OPEN if !last => next.value[sidx],
                    OPEN => 0.0,
                    COLLIDED => collision_tail(horizon, succ.t, &lattice.weights),
                    _ => {
                        return Err(Error::Solver(format!(
                            "successor {succ:?} was never reached"
                        )))
                    }
                };
                let reward =
                    transition_reward_parts(&lattice.v0, &lattice.weights, next, &s, &succ, sidx);
                let q = reward + continuation;
                if q > best {
                    best = q;
                    best_action = a.index() as u8;
                }
            }
            layer.value[idx] = best;
            layer.action[idx] = best_action;
        }
    }
    lattice.solved = true;
    Ok(DpSolution { lattice })
}

// Free function so the borrow of one layer does not lock the whole lattice.
fn transition_reward_parts(
    v0: &f64,
    weights: &RewardWeights,
    next: &Layer,
    from: &EgoLattice,
    to: &EgoLattice,
    to_idx: usize,
) -> f64 {
    let v = ego_speed(*v0, to.speed_offset);
    let v_prev = ego_speed(*v0, from.speed_offset);
    combine(
        next.proximity[to_idx],
        speed_penalty(v, weights.desired_speed),
        next.collisions[to_idx] as u32,
        accel_penalty(v, v_prev),
        lane_change_penalty(to.lane, from.lane),
        weights,
    )
    .total
}

/// Build the lattice and solve it over the scenario's own horizon.
pub fn solve(scenario: &Scenario, weights: &RewardWeights) -> Result<DpSolution> {
    backward_induction(build_reachable_lattice(
        scenario,
        scenario.duration_steps(),
        weights,
    ))
}

impl DpSolution {
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// Optimal value-to-go; for a collision state, its stranded tail.
    pub fn value(&self, state: &EgoLattice) -> Option<f64> {
        let (t, idx) = self.lattice.index(state)?;
        let layer = &self.lattice.layers[t];
        Some(match layer.status[idx] {
            COLLIDED => collision_tail(self.lattice.horizon, state.t, &self.lattice.weights),
            _ if state.t < self.lattice.horizon => layer.value[idx],
            _ => 0.0,
        })
    }

    /// Optimal action; `None` for terminal or unreachable states.
    pub fn action(&self, state: &EgoLattice) -> Option<Action> {
        let (t, idx) = self.lattice.index(state)?;
        Action::from_index(self.lattice.layers[t].action[idx] as usize)
    }

    pub fn initial_value(&self) -> f64 {
        let origin = self
            .lattice
            .states(0)
            .first()
            .map(|(s, _)| *s)
            .expect("entry state always exists");
        self.value(&origin).unwrap_or(0.0)
    }

    /// Immediate reward of taking `action` in `state`, as the solver saw it.
    pub fn reward(&self, state: &EgoLattice, action: Action) -> Option<f64> {
        let succ = state.advance(action);
        let (_, idx) = self.lattice.index(&succ)?;
        Some(self.lattice.transition_reward(state, &succ, idx))
    }
}

/// One row of an optimal trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: u32,
    pub lane: u8,
    pub x: f64,
    pub v: f64,
    pub action: Action,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub outcome: EpisodeOutcome,
    pub rows: Vec<TrajectoryRow>,
    pub initial_value: f64,
}

impl Rollout {
    /// Trajectory dump: `t,lane,x,v,action,value`.
    pub fn to_csv(&self) -> Result<String> {
        crate::table::to_csv(&self.rows)
    }
}

/// Tolerance for the rollout-versus-value self-check.
pub const ROLLOUT_TOLERANCE: f64 = 1e-9;

/// Follow the optimal policy through the simulator and check that the
/// realized return equals the solver's initial value.
pub fn rollout_optimal(
    solution: &DpSolution,
    scenario: &Scenario,
    weights: &RewardWeights,
    desired_speed_band: f64,
) -> Result<Rollout> {
    let mut rows = Vec::new();
    let outcome = run_episode(scenario, weights, desired_speed_band, |state| {
        let action = solution.action(&state.ego).ok_or_else(|| {
            Error::Solver(format!("no optimal action stored for {:?}", state.ego))
        })?;
        let ego = state.ego_vehicle();
        rows.push(TrajectoryRow {
            t: state.t(),
            lane: ego.lane.index(),
            x: ego.x,
            v: ego.v,
            action,
            value: solution.value(&state.ego).unwrap_or(f64::NAN),
        });
        Ok(action)
    })?;
    let initial_value = solution.initial_value();
    let diff = (outcome.total_return - initial_value).abs();
    if diff >= ROLLOUT_TOLERANCE {
        return Err(Error::Solver(format!(
            "rollout return {} differs from V(initial) {} by {diff:e}",
            outcome.total_return, initial_value
        )));
    }
    Ok(Rollout {
        outcome,
        rows,
        initial_value,
    })
}
