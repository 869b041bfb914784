//! Oracles shared by the integration tests and the acceptance report. None
//! of them reuse the code paths they check.

#![allow(dead_code)]

use lanepilot_core::episode::run_episode;
use lanepilot_core::nn::{Mlp, LAYER_SIZES};
use lanepilot_core::perception::{
    encode, BANDS, GRID_LEN, OFF_ROAD, TILES_AHEAD, TILES_BEHIND, TILES_PER_BAND,
};
use lanepilot_core::reward::RewardWeights;
use lanepilot_core::seeding::rng_for;
use lanepilot_core::sim::{
    generate_scenario, Action, Lane, Scenario, ScenarioConfig, SimState, Simulator, SpawnEvent,
};
use lanepilot_core::Error;
use rand::seq::IteratorRandom;
use rand::Rng;

pub fn event(time_s: u32, lane: u8, v0: f64, is_ego: bool) -> SpawnEvent {
    SpawnEvent {
        time_s,
        lane: Lane::new(lane).unwrap(),
        v0,
        is_ego,
    }
}

/// Best return over every action sequence of the scenario's length, with
/// the first action of a best sequence (ties keep the earliest sequence in
/// `order`). Sequences that hit an infeasible action are discarded.
pub fn brute_force(
    scenario: &Scenario,
    w: &RewardWeights,
    order: &[Action],
) -> (f64, Option<Action>) {
    let horizon = scenario.duration_steps() as usize;
    let mut best = (f64::NEG_INFINITY, None);
    let total = order.len().pow(horizon as u32);
    for code in 0..total {
        let seq: Vec<Action> = (0..horizon)
            .map(|k| order[(code / order.len().pow((horizon - 1 - k) as u32)) % order.len()])
            .collect();
        let mut step = 0;
        let outcome = run_episode(scenario, w, 0.5, |_| {
            step += 1;
            Ok(seq[step - 1])
        });
        match outcome {
            Ok(o) => {
                if o.total_return > best.0 {
                    best = (o.total_return, seq.first().copied());
                }
            }
            Err(Error::InfeasibleAction { .. }) => {}
            Err(e) => panic!("unexpected simulator error: {e}"),
        }
    }
    best
}

/// Ego plus at most two manual vehicles placed to interact within a few
/// steps: earlier entries are ahead of the ego, later ones behind. The
/// horizon is between one and four steps.
pub fn small_scenario(seed: u64) -> Scenario {
    let mut rng = rng_for(seed, &[]);
    let ego_time = 6;
    let mut events = vec![event(
        ego_time,
        rng.gen_range(0..3),
        rng.gen_range(10.0..23.0),
        true,
    )];
    for _ in 0..rng.gen_range(0..=2) {
        let time = rng.gen_range(ego_time - 3..=ego_time + 2);
        events.push(event(
            time,
            rng.gen_range(0..3),
            rng.gen_range(4.0..18.0),
            false,
        ));
    }
    events.sort_by_key(|e| e.time_s);
    Scenario::new(events, rng.gen_range(1..=4)).unwrap()
}

/// `count` states visited by uniformly random feasible play over generated
/// scenarios at all four densities.
pub fn reachable_states(seed: u64, count: usize) -> Vec<SimState> {
    let mut rng = rng_for(seed, &[]);
    let w = RewardWeights::default();
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        let period = [8, 4, 2, 1][(k % 4) as usize];
        let cfg = ScenarioConfig::default().with_spawn_period(period);
        let scenario = generate_scenario(&cfg, &mut rng_for(seed, &[1, k])).unwrap();
        let sim = Simulator::new(&scenario, w.delta0);
        let mut state = sim.initial_state();
        out.push(state.clone());
        while !sim.is_final(&state) && out.len() < count {
            let action = state.feasible_actions().iter().choose(&mut rng).unwrap();
            state = sim.step(&state, action).unwrap();
            out.push(state.clone());
        }
        k += 1;
    }
    out
}

/// Everything wrong with `encode(state)`, checked tile by tile against the
/// raw vehicle list.
pub fn encoder_violations(state: &SimState) -> Vec<String> {
    let grid = encode(state);
    let values = grid.as_slice();
    let mut problems = Vec::new();
    if values.len() != GRID_LEN || GRID_LEN != 528 {
        problems.push(format!("length {}", values.len()));
        return problems;
    }
    let ego = state.ego_vehicle();
    let ego_lane = ego.lane.index() as i32;
    for band in 0..BANDS {
        let lane = ego_lane + band as i32 - 1;
        let row = &values[band * TILES_PER_BAND..(band + 1) * TILES_PER_BAND];
        if !(0..3).contains(&lane) {
            if row.iter().any(|&v| v != OFF_ROAD) {
                problems.push(format!("off-road band {band} not uniformly {OFF_ROAD}"));
            }
            continue;
        }
        let in_lane: Vec<_> = state
            .vehicles
            .iter()
            .filter(|v| v.lane.index() as i32 == lane)
            .collect();
        for (i, &value) in row.iter().enumerate() {
            let offset = i as f64 - TILES_BEHIND as f64;
            let overlaps = |front: f64, length: f64| {
                let (rear, front) = (front - length - ego.x, front - ego.x);
                rear < offset + 1.0 && front > offset
            };
            let ego_tile = band == 1 && overlaps(ego.x, ego.length);
            let sources: Vec<f64> = in_lane
                .iter()
                .filter(|v| overlaps(v.x, v.length))
                .map(|v| v.v)
                .collect();
            if value != 0.0 {
                let traced = sources.contains(&value) || (ego_tile && value == ego.v);
                if !traced {
                    problems.push(format!(
                        "band {band} offset {offset}: {value} has no source"
                    ));
                }
            } else if sources.iter().any(|&v| v != 0.0) || (ego_tile && ego.v != 0.0) {
                problems.push(format!(
                    "band {band} offset {offset}: occupied tile left empty"
                ));
            }
        }
    }
    debug_assert_eq!(TILES_PER_BAND as i32, TILES_BEHIND + TILES_AHEAD + 1);
    problems
}

#[derive(Debug, Default)]
pub struct GradientCheck {
    pub worst_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because the step crossed a rectifier kink, where
    /// the derivative does not exist.
    pub kinks: usize,
}

/// Compare backpropagation against central differences on the full-size
/// network: `draws` random (network, input, action, target) tuples,
/// `per_draw` parameter indices each, spread over all layers.
pub fn gradient_check(seed: u64, draws: usize, per_draw: usize) -> GradientCheck {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut rng = rng_for(seed, &[]);
    let mut report = GradientCheck::default();
    for _ in 0..draws {
        let mut net = Mlp::new(&LAYER_SIZES, &mut rng).unwrap();
        let x: Vec<f64> = (0..LAYER_SIZES[0])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let action = rng.gen_range(0..LAYER_SIZES[3]);
        let target = rng.gen_range(-3.0..3.0);
        let grads = net.backward(&x, action, target).unwrap();
        let base = net.td_loss(&x, action, target).unwrap();
        for _ in 0..per_draw {
            let i = rng.gen_range(0..net.param_len());
            let p = net.param(i);
            net.set_param(i, p + STEP);
            let plus = net.td_loss(&x, action, target).unwrap();
            net.set_param(i, p - STEP);
            let minus = net.td_loss(&x, action, target).unwrap();
            net.set_param(i, p);
            let (right, left) = ((plus - base) / STEP, (base - minus) / STEP);
            let central = (plus - minus) / (2.0 * STEP);
            // a piecewise-quadratic loss has matching one-sided slopes up to
            // O(STEP) unless a unit switched on or off inside the step
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(FLOOR) {
                report.kinks += 1;
                continue;
            }
            let analytic = grads.get(i);
            let denom = analytic.abs().max(central.abs()).max(FLOOR);
            let rel = (analytic - central).abs() / denom;
            report.worst_relative_error = report.worst_relative_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
