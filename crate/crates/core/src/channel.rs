//! Link budget in dB: log-distance pathloss, spatially correlated
//! log-normal shadowing, per-frame SNR and the exponential measurement filter.
//!
//! Fast fading is not modelled; the per-frame average SNR is
//! `P_tx + G - PL(d) - X_shadow - N`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::topology::LinkState;

/// `intercept + slope * log10(d)` in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathlossModel {
    pub intercept_db: f64,
    pub slope: f64,
}

/// Whose shadowing realization a trace sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowingScope {
    /// One realization per road and SBS, fixed by the region: every
    /// vehicle on a road sees the same shadowing at the same spot.
    #[default]
    Region,
    /// A fresh realization for every trajectory.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub tx_power_dbm: f64,
    pub beam_gain_db: f64,
    pub noise_power_dbm: f64,
    pub snr_threshold_db: f64,
    pub pl_los: PathlossModel,
    pub pl_nlos: PathlossModel,
    pub shadow_std_los_db: f64,
    pub shadow_std_nlos_db: f64,
    pub corr_dist_los_m: f64,
    pub corr_dist_nlos_m: f64,
    pub filter_coeff: f64,
    pub frame_duration_s: f64,
    pub shadowing_scope: ShadowingScope,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            tx_power_dbm: 30.0,
            beam_gain_db: 18.0,
            noise_power_dbm: -77.0,
            snr_threshold_db: 22.0,
            pl_los: PathlossModel { intercept_db: 61.4, slope: 20.0 },
            pl_nlos: PathlossModel { intercept_db: 72.0, slope: 29.2 },
            shadow_std_los_db: 5.8,
            shadow_std_nlos_db: 8.7,
            corr_dist_los_m: 10.0,
            corr_dist_nlos_m: 13.0,
            filter_coeff: 0.5,
            frame_duration_s: 0.1,
            shadowing_scope: ShadowingScope::Region,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_coeff > 0.0 && self.filter_coeff <= 1.0) {
            return Err(invalid(format!("filter_coeff must lie in (0, 1], got {}", self.filter_coeff)));
        }
        if self.shadow_std_los_db < 0.0 || self.shadow_std_nlos_db < 0.0 {
            return Err(invalid("shadowing standard deviations must be non-negative"));
        }
        if !(self.corr_dist_los_m > 0.0 && self.corr_dist_nlos_m > 0.0) {
            return Err(invalid("correlation distances must be positive"));
        }
        if !(self.frame_duration_s > 0.0) {
            return Err(invalid("frame_duration_s must be positive"));
        }
        Ok(())
    }

    pub fn shadow_std(&self, state: LinkState) -> f64 {
        match state {
            LinkState::Los => self.shadow_std_los_db,
            LinkState::Nlos => self.shadow_std_nlos_db,
        }
    }

    pub fn corr_dist(&self, state: LinkState) -> f64 {
        match state {
            LinkState::Los => self.corr_dist_los_m,
            LinkState::Nlos => self.corr_dist_nlos_m,
        }
    }

    fn pathloss_model(&self, state: LinkState) -> PathlossModel {
        match state {
            LinkState::Los => self.pl_los,
            LinkState::Nlos => self.pl_nlos,
        }
    }
}

pub fn pathloss_db(distance_m: f64, state: LinkState, params: &ChannelParams) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(invalid(format!("pathloss distance must be positive, got {distance_m}")));
    }
    let m = params.pathloss_model(state);
    Ok(m.intercept_db + m.slope * distance_m.log10())
}

/// One step of the Gudmundson AR(1) shadowing process:
/// `ρ·prev + √(1-ρ²)·σ·z` with `ρ = exp(-step / d_corr)`.
pub fn shadowing_step<R: Rng + ?Sized>(
    prev_db: f64,
    step_dist_m: f64,
    state: LinkState,
    params: &ChannelParams,
    rng: &mut R,
) -> f64 {
    debug_assert!(step_dist_m >= 0.0 && prev_db.is_finite());
    let rho = (-step_dist_m / params.corr_dist(state)).exp();
    let z: f64 = rng.sample(StandardNormal);
    if rho == 1.0 {
        return prev_db;
    }
    rho * prev_db + (1.0 - rho * rho).sqrt() * params.shadow_std(state) * z
}

pub fn snr_db(params: &ChannelParams, pathloss_db: f64, shadow_db: f64) -> f64 {
    params.tx_power_dbm + params.beam_gain_db - pathloss_db - shadow_db - params.noise_power_dbm
}

/// Shadowing process of one user-SBS link. A LOS/NLOS regime change
/// restarts the process from the stationary law of the new regime.
#[derive(Clone, Debug, Default)]
pub struct ShadowingLink {
    current: Option<(LinkState, f64)>,
}

impl ShadowingLink {
    pub fn advance<R: Rng + ?Sized>(&mut self, state: LinkState, step_dist_m: f64, params: &ChannelParams, rng: &mut R) -> f64 {
        let value = match self.current {
            Some((prev_state, prev)) if prev_state == state => shadowing_step(prev, step_dist_m, state, params, rng),
            _ => {
                let z: f64 = rng.sample(StandardNormal);
                params.shadow_std(state) * z
            }
        };
        self.current = Some((state, value));
        value
    }
}

/// Per-user SNR matrix, frames × SBSs, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrTrace {
    values: Vec<f64>,
    num_sbs: usize,
    pub frame_duration_s: f64,
    pub group_id: u8,
}

impl SnrTrace {
    pub fn from_rows(rows: Vec<Vec<f64>>, frame_duration_s: f64, group_id: u8) -> Result<Self> {
        let num_sbs = rows.first().map(Vec::len).ok_or(Error::Empty("trace has no frames"))?;
        if num_sbs == 0 {
            return Err(Error::Empty("trace has no SBS columns"));
        }
        let mut values = Vec::with_capacity(rows.len() * num_sbs);
        for row in rows {
            if row.len() != num_sbs {
                return Err(Error::DimensionMismatch { expected: num_sbs, got: row.len() });
            }
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite SNR {bad}")));
            }
            values.extend(row);
        }
        Ok(Self { values, num_sbs, frame_duration_s, group_id })
    }

    pub(crate) fn from_flat(values: Vec<f64>, num_sbs: usize, frame_duration_s: f64, group_id: u8) -> Self {
        debug_assert!(num_sbs > 0 && values.len().is_multiple_of(num_sbs));
        Self { values, num_sbs, frame_duration_s, group_id }
    }

    pub fn num_frames(&self) -> usize {
        self.values.len() / self.num_sbs
    }

    pub fn num_sbs(&self) -> usize {
        self.num_sbs
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * self.num_sbs..(f + 1) * self.num_sbs]
    }

    pub fn get(&self, frame: usize, sbs: usize) -> f64 {
        self.values[frame * self.num_sbs + sbs]
    }

    pub fn column(&self, sbs: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(sbs).step_by(self.num_sbs).copied()
    }

    /// Index of the strongest SBS in `frame`, lowest index on ties.
    pub fn strongest(&self, frame: usize) -> usize {
        argmax(self.frame(frame))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for b in 0..self.num_sbs {
            let _ = write!(out, ",sbs_{b}");
        }
        out.push('\n');
        for f in 0..self.num_frames() {
            let _ = write!(out, "{f}");
            for v in self.frame(f) {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, frame_duration_s: f64, group_id: u8) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Empty("trace CSV"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"frame") || cols.iter().skip(1).enumerate().any(|(b, c)| *c != format!("sbs_{b}")) {
            return Err(Error::Parse(format!("unexpected trace header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let mut fields = line.split(',');
            let frame: usize = fields
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad frame index on line {}", i + 2)))?;
            if frame != i {
                return Err(Error::Parse(format!("frame {frame} out of order on line {}", i + 2)));
            }
            let row = fields
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", i + 2))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows, frame_duration_s, group_id)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `s_0 = r_0`, `s_f = c·r_f + (1-c)·s_{f-1}`, independently per SBS column.
pub fn smooth_trace(raw: &SnrTrace, coeff: f64) -> Result<SnrTrace> {
    if !(coeff > 0.0 && coeff <= 1.0) {
        return Err(invalid(format!("filter coefficient must lie in (0, 1], got {coeff}")));
    }
    let n = raw.num_sbs;
    let mut values = raw.values.clone();
    for f in 1..raw.num_frames() {
        for b in 0..n {
            let prev = values[(f - 1) * n + b];
            let cur = &mut values[f * n + b];
            *cur = coeff * *cur + (1.0 - coeff) * prev;
        }
    }
    Ok(SnrTrace { values, ..raw.clone() })
}
