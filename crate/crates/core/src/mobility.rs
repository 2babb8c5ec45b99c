//! Vehicle kinematics along a road and the Poisson arrival process.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::topology::{Point, Road};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    /// Initial speed is uniform in this range (m/s).
    pub speed_range_mps: [f64; 2],
    /// Per-frame i.i.d. Gaussian acceleration (m/s²).
    pub accel_std_mps2: f64,
    /// Speed is clamped to `[speed_floor_mps, speed_ceil_mps]` after each update.
    pub speed_floor_mps: f64,
    pub speed_ceil_mps: f64,
    /// Vehicles per minute on each road.
    pub arrival_rate_per_min: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            speed_range_mps: [15.0, 20.0],
            accel_std_mps2: 1.0,
            speed_floor_mps: 12.5,
            speed_ceil_mps: 25.0,
            arrival_rate_per_min: 50.0,
        }
    }
}

impl MobilityConfig {
    /// The same traffic with initial speeds drawn from `range`.
    pub fn with_speed_range(&self, range: [f64; 2]) -> Self {
        Self { speed_range_mps: range, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed_range_mps;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid(format!("speed range must be a non-empty positive interval, got [{lo}, {hi}]")));
        }
        if !(self.accel_std_mps2 >= 0.0) {
            return Err(invalid("accel_std_mps2 must be non-negative"));
        }
        if !(self.speed_floor_mps > 0.0 && self.speed_ceil_mps >= self.speed_floor_mps) {
            return Err(invalid("speed clamp must satisfy 0 < floor <= ceil"));
        }
        if !(self.arrival_rate_per_min >= 0.0) {
            return Err(invalid("arrival rate must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// One position per frame, all on the road segment.
    pub positions: Vec<Point>,
    pub road_id: usize,
    pub entry_time_s: f64,
}

impl Trajectory {
    pub fn num_frames(&self) -> usize {
        self.positions.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,x,y\n");
        for (f, p) in self.positions.iter().enumerate() {
            let _ = writeln!(out, "{f},{:.4},{:.4}", p.x, p.y);
        }
        out
    }
}

/// Drives one vehicle from the road's entry to its exit. The first step
/// uses the initial speed; after each step the speed takes a Gaussian
/// acceleration kick and is clamped. Frames whose position would lie at or
/// beyond the road end are not emitted.
pub fn generate_trajectory<R: Rng + ?Sized>(
    road: &Road,
    road_id: usize,
    cfg: &MobilityConfig,
    frame_s: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(frame_s > 0.0) {
        return Err(invalid("frame duration must be positive"));
    }
    let [lo, hi] = cfg.speed_range_mps;
    let mut speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let accel = Normal::new(0.0, cfg.accel_std_mps2).map_err(|e| invalid(e.to_string()))?;
    let length = road.length();
    let mut travelled = 0.0;
    let mut positions = Vec::with_capacity((length / (cfg.speed_floor_mps.min(lo) * frame_s)) as usize + 1);
    while travelled < length {
        positions.push(road.point_at(travelled));
        travelled += speed * frame_s;
        let a: f64 = accel.sample(rng);
        speed = (speed + a * frame_s).clamp(cfg.speed_floor_mps, cfg.speed_ceil_mps);
    }
    Ok(Trajectory { positions, road_id, entry_time_s: 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub entry_time_s: f64,
    pub road_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalSchedule {
    pub arrivals: Vec<Arrival>,
    pub rate_per_min_per_road: f64,
    pub horizon_s: f64,
}

/// Independent homogeneous Poisson arrivals on each road over `[0, horizon)`,
/// merged in time order (road index breaks ties).
pub fn generate_arrivals<R: Rng + ?Sized>(
    rate_per_min_per_road: f64,
    roads: usize,
    horizon_s: f64,
    rng: &mut R,
) -> Result<ArrivalSchedule> {
    if !(rate_per_min_per_road >= 0.0) {
        return Err(invalid(format!("arrival rate must be non-negative, got {rate_per_min_per_road}")));
    }
    if !(horizon_s > 0.0) {
        return Err(invalid("arrival horizon must be positive"));
    }
    let mut arrivals = Vec::new();
    if rate_per_min_per_road > 0.0 {
        let gap = Exp::new(rate_per_min_per_road / 60.0).map_err(|e| invalid(e.to_string()))?;
        for road_id in 0..roads {
            let mut t = gap.sample(rng);
            while t < horizon_s {
                arrivals.push(Arrival { entry_time_s: t, road_id });
                t += gap.sample(rng);
            }
        }
    }
    arrivals.sort_by(|a, b| a.entry_time_s.total_cmp(&b.entry_time_s).then(a.road_id.cmp(&b.road_id)));
    Ok(ArrivalSchedule { arrivals, rate_per_min_per_road, horizon_s })
}
