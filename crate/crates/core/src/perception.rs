//! Occupancy-grid observation and obstacle sensing around the ego.
//!
//! The sensed area covers the ego lane and both neighbours, from 75 m behind
//! to 100 m ahead of the ego front bumper, cut into 1 m tiles. Tile `o`
//! (relative offset, `-75 ..= 100`) covers `[o, o + 1)` and a vehicle body
//! `[rear, front)` lights every tile it overlaps, so a 5 m vehicle whose rear
//! sits on an integer offset occupies exactly five tiles. The ego, with its
//! front at offset 0, occupies tiles `-5 ..= -1`.
//!
//! Vectorization is band-major (left, center, right band relative to the
//! ego), rear to front inside a band.

use rand::Rng;

use crate::error::{Error, Result};
use crate::sim::{longitudinal_gap, Lane, SimState, VehicleState, VEHICLE_LENGTH};

pub const TILES_BEHIND: i32 = 75;
pub const TILES_AHEAD: i32 = 100;
pub const TILES_PER_BAND: usize = (TILES_BEHIND + TILES_AHEAD + 1) as usize;
pub const BANDS: usize = 3;
pub const GRID_LEN: usize = BANDS * TILES_PER_BAND;
pub const OFF_ROAD: f64 = -1.0;
pub const EGO_LENGTH: f64 = VEHICLE_LENGTH;

/// Whether a vehicle body overlaps the sensed span `[-75, 101)` around an ego
/// whose front bumper is at `ego_front`.
pub fn in_sensing_window(ego_front: f64, other_front: f64, other_length: f64) -> bool {
    let rear = other_front - other_length - ego_front;
    let front = other_front - ego_front;
    rear < (TILES_AHEAD + 1) as f64 && front > -(TILES_BEHIND as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Band 0 is left of the ego, 1 the ego lane, 2 the right.
    pub fn band(&self, band: usize) -> &[f64] {
        &self.values[band * TILES_PER_BAND..(band + 1) * TILES_PER_BAND]
    }

    /// Value at `offset` meters relative to the ego front bumper.
    pub fn at(&self, band: usize, offset: i32) -> f64 {
        self.band(band)[(offset + TILES_BEHIND) as usize]
    }

    /// Debug dump: three lines of 176 integer-rounded values.
    pub fn to_text(&self) -> String {
        (0..BANDS)
            .map(|b| {
                self.band(b)
                    .iter()
                    .map(|v| format!("{}", v.round() as i64))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensedObstacle {
    pub id: usize,
    pub lane: Lane,
    /// Rear bumper relative to the ego front bumper (m).
    pub offset: f64,
    pub speed: f64,
    pub length: f64,
}

impl SensedObstacle {
    /// Absolute bumper-to-bumper gap to the ego.
    pub fn gap(&self, ego_length: f64) -> f64 {
        longitudinal_gap(0.0, ego_length, self.offset + self.length, self.length)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensedObstacles {
    pub ego_lane: Lane,
    pub ego_speed: f64,
    pub ego_length: f64,
    /// Sorted by lane, then front to rear.
    pub items: Vec<SensedObstacle>,
}

impl SensedObstacles {
    /// The obstacle count `O_t`.
    pub fn count(&self) -> usize {
        self.items.len()
    }
}

pub fn sense_obstacles(state: &SimState) -> SensedObstacles {
    let ego = state.ego_vehicle();
    let mut items: Vec<SensedObstacle> = state
        .vehicles
        .iter()
        .filter_map(|v| observe_vehicle(&ego, v))
        .collect();
    items.sort_by(|a, b| {
        a.lane
            .cmp(&b.lane)
            .then(b.offset.total_cmp(&a.offset))
            .then(a.id.cmp(&b.id))
    });
    SensedObstacles {
        ego_lane: ego.lane,
        ego_speed: ego.v,
        ego_length: ego.length,
        items,
    }
}

/// `other` as seen from `ego`, if it is in the ego lane or a neighbour and
/// overlaps the sensed window.
pub fn observe_vehicle(ego: &VehicleState, other: &VehicleState) -> Option<SensedObstacle> {
    (other.lane.index().abs_diff(ego.lane.index()) <= 1
        && in_sensing_window(ego.x, other.x, other.length))
    .then(|| SensedObstacle {
        id: other.id,
        lane: other.lane,
        offset: other.rear() - ego.x,
        speed: other.v,
        length: other.length,
    })
}

/// Replace every gap `d` by `d * (1 + u)`, `u ~ U[-p, p]` drawn independently
/// per obstacle. Speeds are untouched and each obstacle stays on its side of
/// the ego.
pub fn apply_measurement_error<R: Rng + ?Sized>(
    obstacles: &SensedObstacles,
    magnitude: f64,
    rng: &mut R,
) -> Result<SensedObstacles> {
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "measurement error magnitude must be >= 0, got {magnitude}"
        )));
    }
    let mut out = obstacles.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    for o in &mut out.items {
        let u = rng.gen_range(-magnitude..=magnitude);
        let gap = (o.gap(obstacles.ego_length) * (1.0 + u)).max(0.0);
        if o.offset >= 0.0 {
            o.offset = gap;
        } else if o.offset + o.length <= -obstacles.ego_length {
            o.offset = -obstacles.ego_length - gap - o.length;
        }
    }
    Ok(out)
}

pub fn encode(state: &SimState) -> OccupancyGrid {
    encode_obstacles(&sense_obstacles(state))
}

/// Rasterize a (possibly noise-corrupted) obstacle list around the ego.
pub fn encode_obstacles(obstacles: &SensedObstacles) -> OccupancyGrid {
    let mut values = vec![0.0; GRID_LEN];
    let ego_lane = obstacles.ego_lane.index() as i32;
    for band in 0..BANDS {
        if !(0..3).contains(&(ego_lane + band as i32 - 1)) {
            values[band * TILES_PER_BAND..(band + 1) * TILES_PER_BAND].fill(OFF_ROAD);
        }
    }
    let band_of = |lane: Lane| (lane.index() as i32 - ego_lane + 1) as usize;
    for o in &obstacles.items {
        paint(
            &mut values,
            band_of(o.lane),
            o.offset,
            o.offset + o.length,
            o.speed,
        );
    }
    paint(
        &mut values,
        1,
        -obstacles.ego_length,
        0.0,
        obstacles.ego_speed,
    );
    OccupancyGrid { values }
}

fn paint(values: &mut [f64], band: usize, rear: f64, front: f64, speed: f64) {
    let first = (rear.floor() as i64).max(-(TILES_BEHIND as i64));
    let last = (front.ceil() as i64 - 1).min(TILES_AHEAD as i64);
    let base = band * TILES_PER_BAND;
    for offset in first..=last {
        values[base + (offset + TILES_BEHIND as i64) as usize] = speed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Scenario, Simulator, SpawnEvent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lone_ego(lane: u8, v: f64) -> SimState {
        let s = Scenario::new(
            vec![SpawnEvent {
                time_s: 0,
                lane: Lane::new(lane).unwrap(),
                v0: v,
                is_ego: true,
            }],
            3,
        )
        .unwrap();
        Simulator::new(&s, 10.0).initial_state()
    }

    fn with_rear(id: usize, lane: u8, rear: f64, v: f64) -> VehicleState {
        VehicleState {
            id,
            lane: Lane::new(lane).unwrap(),
            x: rear + VEHICLE_LENGTH,
            v,
            length: VEHICLE_LENGTH,
        }
    }

    #[test]
    fn lone_ego_in_center_lane() {
        let g = encode(&lone_ego(1, 21.0));
        assert_eq!(g.as_slice().len(), GRID_LEN);
        assert!(g.as_slice().iter().all(|&v| v == 0.0 || v == 21.0));
        let ego_tiles: Vec<i32> = (-75..=100).filter(|&o| g.at(1, o) == 21.0).collect();
        assert_eq!(ego_tiles, vec![-5, -4, -3, -2, -1]);
        assert_eq!(g.as_slice().iter().filter(|&&v| v == 21.0).count(), 5);
    }

    #[test]
    fn edge_lanes_have_off_road_bands() {
        let left = encode(&lone_ego(0, 15.0));
        assert!(left.band(0).iter().all(|&v| v == OFF_ROAD));
        assert_eq!(left.band(0).len(), 176);
        assert!(left.band(2).iter().all(|&v| v == 0.0));
        let right = encode(&lone_ego(2, 15.0));
        assert!(right.band(2).iter().all(|&v| v == OFF_ROAD));
    }

    #[test]
    fn leader_ten_meters_ahead_occupies_offsets_ten_to_fourteen() {
        let mut st = lone_ego(1, 21.0);
        st.vehicles = vec![with_rear(3, 1, 10.0, 15.0)];
        let g = encode(&st);
        let lit: Vec<i32> = (-75..=100).filter(|&o| g.at(1, o) == 15.0).collect();
        assert_eq!(lit, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn window_boundaries() {
        let mut st = lone_ego(1, 20.0);
        st.vehicles = vec![
            with_rear(1, 1, 101.0, 14.0),
            with_rear(2, 1, 100.0, 13.0),
            with_rear(3, 0, -75.0, 12.0),
            with_rear(4, 2, -80.0, 12.5),
        ];
        let sensed = sense_obstacles(&st);
        let ids: Vec<usize> = sensed.items.iter().map(|o| o.id).collect();
        assert_eq!(ids, vec![3, 2]);
        let g = encode(&st);
        assert_eq!(g.at(1, 100), 13.0);
        assert_eq!(g.at(0, -75), 12.0);
    }

    #[test]
    fn lanes_two_away_are_not_sensed() {
        let mut st = lone_ego(0, 20.0);
        st.vehicles = vec![with_rear(1, 2, 20.0, 14.0)];
        assert_eq!(sense_obstacles(&st).count(), 0);
        assert_eq!(sense_obstacles(&lone_ego(1, 20.0)).count(), 0);
    }

    #[test]
    fn sensed_order_is_lane_then_front_to_rear() {
        let mut st = lone_ego(1, 20.0);
        st.vehicles = vec![
            with_rear(1, 1, -30.0, 14.0),
            with_rear(2, 1, 40.0, 13.0),
            with_rear(3, 0, 5.0, 12.0),
        ];
        let ids: Vec<usize> = sense_obstacles(&st).items.iter().map(|o| o.id).collect();
        assert_eq!(ids, vec![3, 2, 1]);
        let gaps: Vec<f64> = sense_obstacles(&st)
            .items
            .iter()
            .map(|o| o.gap(EGO_LENGTH))
            .collect();
        assert_eq!(gaps, vec![5.0, 40.0, 20.0]);
    }

    #[test]
    fn zero_noise_is_identity_and_bounds_hold() {
        let mut st = lone_ego(1, 20.0);
        st.vehicles = vec![with_rear(1, 1, 40.0, 14.0), with_rear(2, 2, -50.0, 14.0)];
        let sensed = sense_obstacles(&st);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            apply_measurement_error(&sensed, 0.0, &mut rng).unwrap(),
            sensed
        );
        assert!(apply_measurement_error(&sensed, -0.1, &mut rng).is_err());
        for _ in 0..1000 {
            let noisy = apply_measurement_error(&sensed, 0.05, &mut rng).unwrap();
            let g = noisy.items[0].gap(EGO_LENGTH);
            let ahead = noisy.items.iter().find(|o| o.id == 1).unwrap();
            assert!((38.0..=42.0).contains(&ahead.gap(EGO_LENGTH)), "{g}");
            let behind = noisy.items.iter().find(|o| o.id == 2).unwrap();
            assert!(behind.offset < -EGO_LENGTH);
            assert_eq!(behind.speed, 14.0);
        }
    }

    #[test]
    fn noise_is_zero_mean() {
        let mut st = lone_ego(1, 20.0);
        st.vehicles = vec![with_rear(1, 1, 40.0, 14.0)];
        let sensed = sense_obstacles(&st);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| {
                apply_measurement_error(&sensed, 0.05, &mut rng)
                    .unwrap()
                    .items[0]
                    .gap(EGO_LENGTH)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 40.0).abs() < 0.1, "mean gap {mean}");
    }

    #[test]
    fn text_dump_shape() {
        let text = encode(&lone_ego(0, 21.0)).to_text();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.split(' ').count() == 176));
        assert!(rows[0].split(' ').all(|v| v == "-1"));
    }
}
