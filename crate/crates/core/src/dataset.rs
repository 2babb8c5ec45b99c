//! From trajectories to labelled samples.
//!
//! A trace is replayed with the proactive association rule: whenever the
//! serving SNR drops below the threshold (and no association freeze is
//! active) the next SBS is chosen from the *true* future SNRs, which gives
//! both the training label and the perfect-prediction policy. The input of
//! a sample is the last `n_obs` smoothed SNRs of every SBS at that instant.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, pathloss_db, snr_db, ChannelParams, ShadowingLink, ShadowingScope, SnrTrace};
use crate::error::{invalid, Error, Result};
use crate::mobility::{generate_trajectory, MobilityConfig, Trajectory};
use crate::rng::{self, RngStream};
use crate::topology::RegionTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Observation window length in frames.
    pub n_obs: usize,
    /// Prediction window (and association freeze) length in frames.
    pub n_pred: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { n_obs: 3, n_pred: 5 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 || self.n_pred == 0 {
            return Err(invalid("observation and prediction windows must be at least one frame"));
        }
        Ok(())
    }

    pub fn min_trace_len(&self) -> usize {
        self.n_obs + self.n_pred
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[SBS 0 window, SBS 1 window, ...]`, oldest frame first within a window.
    pub x: Vec<f64>,
    /// Index of the next associated SBS (the non-zero entry of the one-hot label).
    pub label: usize,
    pub group_id: u8,
}

impl Sample {
    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn group_count(&self, group_id: u8) -> usize {
        self.samples.iter().filter(|s| s.group_id == group_id).count()
    }

    /// CSV with columns `group_id,x_0..x_{n-1},label`. Values use the
    /// shortest representation that round-trips exactly.
    pub fn to_csv(&self) -> String {
        let dim = self.samples.first().map_or(0, |s| s.x.len());
        let mut out = String::from("group_id");
        for i in 0..dim {
            let _ = write!(out, ",x_{i}");
        }
        out.push_str(",label\n");
        for s in &self.samples {
            let _ = write!(out, "{}", s.group_id);
            for v in &s.x {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", s.label);
        }
        out
    }

    pub fn from_csv(text: &str, split: Split) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Empty("dataset CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim = cols.len().checked_sub(2).ok_or_else(|| Error::Parse("dataset header too short".into()))?;
        let well_formed = cols[0] == "group_id"
            && cols[cols.len() - 1] == "label"
            && cols[1..=dim].iter().enumerate().all(|(i, c)| *c == format!("x_{i}"));
        if !well_formed {
            return Err(Error::Parse(format!("unexpected dataset header `{header}`")));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let lineno = i + 2;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!("line {lineno}: expected {} fields, got {}", dim + 2, fields.len())));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("line {lineno}: {e}"));
            let group_id = fields[0].parse::<u8>().map_err(|e| bad(&e))?;
            let label = fields[dim + 1].parse::<usize>().map_err(|e| bad(&e))?;
            let x = fields[1..=dim].iter().map(|f| f.parse::<f64>().map_err(|e| bad(&e))).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { x, label, group_id });
        }
        Ok(Self { samples, split })
    }
}

/// Observation vector at `frame`: the `n_obs` most recent SNRs of every SBS.
pub fn observation(trace: &SnrTrace, frame: usize, n_obs: usize) -> Vec<f64> {
    debug_assert!(frame + 1 >= n_obs);
    let start = frame + 1 - n_obs;
    let mut x = Vec::with_capacity(trace.num_sbs() * n_obs);
    for b in 0..trace.num_sbs() {
        x.extend((start..=frame).map(|f| trace.get(f, b)));
    }
    x
}

/// Next SBS under perfect prediction of frames `frame+1 ..= frame+n_pred`:
/// the best mean future SNR among SBSs that never dip below `gamma_th`, or
/// among all SBSs when no such candidate exists. Lowest index wins ties.
pub fn oracle_next_sbs(trace: &SnrTrace, frame: usize, cfg: &WindowConfig, gamma_th: f64) -> Result<usize> {
    if frame + cfg.n_pred >= trace.num_frames() {
        return Err(Error::TraceTooShort { needed: frame + cfg.n_pred + 1, have: trace.num_frames() });
    }
    let window = frame + 1..=frame + cfg.n_pred;
    let mut best_candidate: Option<(usize, f64)> = None;
    let mut best_any: Option<(usize, f64)> = None;
    for b in 0..trace.num_sbs() {
        let mut sum = 0.0;
        let mut eligible = true;
        for f in window.clone() {
            let v = trace.get(f, b);
            sum += v;
            eligible &= v >= gamma_th;
        }
        let mean = sum / cfg.n_pred as f64;
        if best_any.is_none_or(|(_, m)| mean > m) {
            best_any = Some((b, mean));
        }
        if eligible && best_candidate.is_none_or(|(_, m)| mean > m) {
            best_candidate = Some((b, mean));
        }
    }
    Ok(best_candidate.or(best_any).map(|(b, _)| b).expect("trace has at least one SBS"))
}

/// Frame-by-frame log of a proactive replay.
#[derive(Clone, Debug, Default)]
pub(crate) struct ProactiveReplay {
    /// Serving SBS during each frame.
    pub serving: Vec<usize>,
    /// `(frame, chosen SBS)` for every trigger that was acted on.
    pub decisions: Vec<(usize, usize)>,
}

/// Replays `trace` from the strongest first-frame association. At the end of
/// each eligible frame the trigger is checked on the serving SNR; when it
/// fires `decide(frame)` picks the SBS that serves the next `n_pred` frames,
/// during which no trigger is evaluated. A frame is eligible once a full
/// observation window exists and while a full prediction window remains.
pub(crate) fn replay_proactive<F>(trace: &SnrTrace, cfg: &WindowConfig, gamma_th: f64, mut decide: F) -> Result<ProactiveReplay>
where
    F: FnMut(usize) -> Result<usize>,
{
    let len = trace.num_frames();
    let mut log = ProactiveReplay { serving: Vec::with_capacity(len), decisions: Vec::new() };
    if len == 0 {
        return Ok(log);
    }
    let mut current = trace.strongest(0);
    let mut next_eval = cfg.n_obs - 1;
    for f in 0..len {
        log.serving.push(current);
        if f < next_eval || f + cfg.n_pred >= len {
            continue;
        }
        if trace.get(f, current) < gamma_th {
            let next = decide(f)?;
            if next >= trace.num_sbs() {
                return Err(Error::OutOfRange { index: next, len: trace.num_sbs() });
            }
            log.decisions.push((f, next));
            current = next;
            next_eval = f + cfg.n_pred + 1;
        }
    }
    Ok(log)
}

pub(crate) fn extract_indexed(trace: &SnrTrace, cfg: &WindowConfig, gamma_th: f64) -> Result<Vec<(usize, Sample)>> {
    cfg.validate()?;
    if trace.num_frames() < cfg.min_trace_len() {
        return Err(Error::TraceTooShort { needed: cfg.min_trace_len(), have: trace.num_frames() });
    }
    let replay = replay_proactive(trace, cfg, gamma_th, |f| oracle_next_sbs(trace, f, cfg, gamma_th))?;
    Ok(replay
        .decisions
        .into_iter()
        .map(|(f, label)| (f, Sample { x: observation(trace, f, cfg.n_obs), label, group_id: trace.group_id }))
        .collect())
}

/// One sample per acted-on trigger of the oracle replay.
pub fn extract_samples(trace: &SnrTrace, cfg: &WindowConfig, gamma_th: f64) -> Result<Vec<Sample>> {
    Ok(extract_indexed(trace, cfg, gamma_th)?.into_iter().map(|(_, s)| s).collect())
}

/// Per-frame SNR of every SBS along `traj`, smoothed with the channel's
/// filter coefficient. Shadowing advances by the inter-frame displacement.
pub fn trace_from_trajectory(
    topology: &RegionTopology,
    params: &ChannelParams,
    traj: &Trajectory,
    rng: &mut RngStream,
) -> Result<SnrTrace> {
    if traj.positions.is_empty() {
        return Err(Error::Empty("trajectory has no frames"));
    }
    let group_id = topology.road(traj.road_id)?.group_id;
    let n = topology.num_sbs();
    let mut links = vec![ShadowingLink::default(); n];
    let mut values = Vec::with_capacity(traj.positions.len() * n);
    let mut prev = traj.positions[0];
    for pos in &traj.positions {
        let step = pos.distance(&prev);
        for (b, sbs) in topology.sbs_positions.iter().enumerate() {
            let state = topology.link_state(pos, sbs);
            let pl = pathloss_db(pos.distance(sbs), state, params)?;
            let shadow = links[b].advance(state, step, params, rng);
            values.push(snr_db(params, pl, shadow));
        }
        prev = *pos;
    }
    let raw = SnrTrace::from_flat(values, n, params.frame_duration_s, group_id);
    channel::smooth_trace(&raw, params.filter_coeff)
}

/// Shadowing sampled along every road for every SBS on a fine grid of arc
/// length, with the same correlated process a moving vehicle would see.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowField {
    pub resolution_m: f64,
    /// `[road][sbs][grid point]` in dB.
    values: Vec<Vec<Vec<f64>>>,
}

impl ShadowField {
    pub const DEFAULT_RESOLUTION_M: f64 = 0.1;

    pub fn build(topology: &RegionTopology, params: &ChannelParams, resolution_m: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        if !(resolution_m > 0.0) {
            return Err(invalid("shadow field resolution must be positive"));
        }
        let values = topology
            .roads
            .iter()
            .enumerate()
            .map(|(r, road)| {
                let points = (road.length() / resolution_m).ceil() as usize + 1;
                topology
                    .sbs_positions
                    .iter()
                    .enumerate()
                    .map(|(b, sbs)| {
                        let mut rng = rng::derive_stream(rng::derive_seed(seed, "road", r as u64), "sbs", b as u64);
                        let mut link = ShadowingLink::default();
                        (0..points)
                            .map(|i| {
                                let pos = road.point_at((i as f64 * resolution_m).min(road.length()));
                                let step = if i == 0 { 0.0 } else { resolution_m };
                                link.advance(topology.link_state(&pos, sbs), step, params, &mut rng)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { resolution_m, values })
    }

    /// Value at the grid point nearest to `travelled` metres along `road`.
    pub fn at(&self, road: usize, sbs: usize, travelled: f64) -> f64 {
        let column = &self.values[road][sbs];
        let i = (travelled / self.resolution_m).round().max(0.0) as usize;
        column[i.min(column.len() - 1)]
    }
}

/// Per-frame SNR along `traj` using the region's fixed shadowing field.
pub fn trace_in_field(topology: &RegionTopology, params: &ChannelParams, field: &ShadowField, traj: &Trajectory) -> Result<SnrTrace> {
    if traj.positions.is_empty() {
        return Err(Error::Empty("trajectory has no frames"));
    }
    let road = topology.road(traj.road_id)?;
    let n = topology.num_sbs();
    let mut values = Vec::with_capacity(traj.positions.len() * n);
    for pos in &traj.positions {
        let travelled = road.start.distance(pos);
        for (b, sbs) in topology.sbs_positions.iter().enumerate() {
            let pl = pathloss_db(pos.distance(sbs), topology.link_state(pos, sbs), params)?;
            values.push(snr_db(params, pl, field.at(traj.road_id, b, travelled)));
        }
    }
    let raw = SnrTrace::from_flat(values, n, params.frame_duration_s, road.group_id);
    channel::smooth_trace(&raw, params.filter_coeff)
}

/// Everything that shapes the radio environment of one region.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub topology: RegionTopology,
    pub channel: ChannelParams,
    pub mobility: MobilityConfig,
    pub window: WindowConfig,
    /// Present when shadowing is scoped to the region.
    pub shadow_field: Option<Arc<ShadowField>>,
}

/// One pass of a vehicle through the region.
#[derive(Clone, Debug)]
pub struct Traversal {
    pub trajectory: Trajectory,
    pub trace: SnrTrace,
    /// Samples paired with the frame at which each was taken.
    pub samples: Vec<(usize, Sample)>,
}

impl Traversal {
    pub fn duration_s(&self) -> f64 {
        self.trajectory.num_frames() as f64 * self.trace.frame_duration_s
    }

    pub fn sample_vec(&self) -> Vec<Sample> {
        self.samples.iter().map(|(_, s)| s.clone()).collect()
    }
}

impl Scenario {
    /// Builds the region's shadowing field from `seed` when the channel
    /// scopes shadowing to the region.
    pub fn new(topology: RegionTopology, channel: ChannelParams, mobility: MobilityConfig, window: WindowConfig, seed: u64) -> Result<Self> {
        channel.validate()?;
        mobility.validate()?;
        window.validate()?;
        let shadow_field = match channel.shadowing_scope {
            ShadowingScope::Region => Some(Arc::new(ShadowField::build(
                &topology,
                &channel,
                ShadowField::DEFAULT_RESOLUTION_M,
                rng::derive_seed(seed, "shadow-field", 0),
            )?)),
            ShadowingScope::Trajectory => None,
        };
        Ok(Self { topology, channel, mobility, window, shadow_field })
    }

    pub fn gamma_th(&self) -> f64 {
        self.channel.snr_threshold_db
    }

    pub fn num_sbs(&self) -> usize {
        self.topology.num_sbs()
    }

    pub fn input_dim(&self) -> usize {
        self.num_sbs() * self.window.n_obs
    }

    pub fn with_mobility(&self, mobility: MobilityConfig) -> Self {
        Self { mobility, ..self.clone() }
    }

    pub fn trajectory(&self, road_id: usize, seed: u64) -> Result<Trajectory> {
        let road = self.topology.road(road_id)?;
        generate_trajectory(road, road_id, &self.mobility, self.channel.frame_duration_s, &mut rng::derive_stream(seed, "trajectory", 0))
    }

    /// Deterministic traversal of road `road_id` driven by `seed`.
    pub fn traversal(&self, road_id: usize, seed: u64) -> Result<Traversal> {
        let trajectory = self.trajectory(road_id, seed)?;
        let trace = match &self.shadow_field {
            Some(field) => trace_in_field(&self.topology, &self.channel, field, &trajectory)?,
            None => trace_from_trajectory(&self.topology, &self.channel, &trajectory, &mut rng::derive_stream(seed, "channel", 0))?,
        };
        let samples = if trace.num_frames() >= self.window.min_trace_len() {
            extract_indexed(&trace, &self.window, self.gamma_th())?
        } else {
            Vec::new()
        };
        Ok(Traversal { trajectory, trace, samples })
    }

    /// Collects exactly `count` samples from fresh traversals of one road,
    /// truncating the last traversal. Traversal `i` uses
    /// `derive_seed(seed, tag, i)`.
    pub fn collect_samples(&self, road_id: usize, count: usize, tag: &str, seed: u64) -> Result<Vec<Sample>> {
        const CHUNK: u64 = 32;
        const MAX_TRAVERSALS: u64 = 1_000_000;
        let mut out = Vec::with_capacity(count);
        let mut next = 0u64;
        while out.len() < count {
            if next >= MAX_TRAVERSALS {
                return Err(invalid(format!("road {road_id} yields too few samples for {count}")));
            }
            let batch: Vec<Traversal> = (next..next + CHUNK)
                .into_par_iter()
                .map(|i| self.traversal(road_id, rng::derive_seed(seed, tag, i)))
                .collect::<Result<_>>()?;
            next += CHUNK;
            for t in batch {
                out.extend(t.samples.into_iter().map(|(_, s)| s).take(count - out.len()));
                if out.len() == count {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Equal halves from each road (group 1 first), `count` must be even.
    pub fn balanced_set(&self, count: usize, tag: &str, seed: u64, split: Split) -> Result<Dataset> {
        if !count.is_multiple_of(2) {
            return Err(invalid(format!("balanced set size must be even, got {count}")));
        }
        let mut samples = Vec::with_capacity(count);
        for road_id in 0..self.topology.roads.len().min(2) {
            samples.extend(self.collect_samples(road_id, count / 2, tag, seed)?);
        }
        Ok(Dataset::new(samples, split))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMix {
    /// Every local set is drawn from the user's own road.
    NonIid,
    /// A user's stored trajectories alternate between the two roads.
    Iid,
}

/// Road of a user's `k`-th stored trajectory.
pub fn history_road(home_road: usize, k: usize, mix: GroupMix) -> usize {
    match mix {
        GroupMix::NonIid => home_road,
        GroupMix::Iid => (home_road + k) % 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub test_size: usize,
    pub train_size: usize,
    pub num_users: usize,
    pub trajectories_per_user: usize,
    pub group_mix: GroupMix,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { test_size: 24_000, train_size: 1_400, num_users: 0, trajectories_per_user: 1, group_mix: GroupMix::NonIid }
    }
}

#[derive(Clone, Debug)]
pub struct Datasets {
    /// Local sets, user `u` living on road `u % 2`.
    pub users: Vec<Dataset>,
    /// Pooled set for the centralized baseline.
    pub pooled_train: Dataset,
    pub test: Dataset,
}

/// Training, per-user and test sets. The three draw from disjoint seed
/// domains, so no trajectory is shared between training and test data.
pub fn build_datasets(scenario: &Scenario, spec: &DatasetSpec, seed: u64) -> Result<Datasets> {
    let test = scenario.balanced_set(spec.test_size, "test", seed, Split::Test)?;
    let pooled_train = scenario.balanced_set(spec.train_size, "train", seed, Split::Train)?;
    let users = (0..spec.num_users)
        .into_par_iter()
        .map(|u| {
            let user_seed = rng::derive_seed(seed, "user", u as u64);
            let mut samples = Vec::new();
            for k in 0..spec.trajectories_per_user {
                let road = history_road(u % 2, k, spec.group_mix);
                let t = scenario.traversal(road, rng::derive_seed(user_seed, "history", k as u64))?;
                samples.extend(t.samples.into_iter().map(|(_, s)| s));
            }
            Ok(Dataset::new(samples, Split::Train))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Datasets { users, pooled_train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_region, Point, TopologyConfig};
    use proptest::prelude::*;

    fn trace(rows: Vec<Vec<f64>>) -> SnrTrace {
        SnrTrace::from_rows(rows, 0.1, 1).unwrap()
    }

    fn columns(cols: &[Vec<f64>]) -> SnrTrace {
        let frames = cols[0].len();
        trace((0..frames).map(|f| cols.iter().map(|c| c[f]).collect()).collect())
    }

    #[test]
    fn oracle_prefers_candidate_set() {
        let cfg = WindowConfig { n_obs: 1, n_pred: 2 };
        // Frame 0 is the decision frame; frames 1-2 are the future.
        let t = columns(&[vec![0.0, 23.0, 25.0], vec![0.0, 30.0, 10.0]]);
        assert_eq!(oracle_next_sbs(&t, 0, &cfg, 22.0).unwrap(), 0);
        let t = columns(&[vec![0.0, 21.0, 21.0], vec![0.0, 20.0, 23.0]]);
        assert_eq!(oracle_next_sbs(&t, 0, &cfg, 22.0).unwrap(), 1);
        let t = columns(&[vec![0.0, 30.0, 30.0], vec![0.0, 30.0, 30.0]]);
        assert_eq!(oracle_next_sbs(&t, 0, &cfg, 22.0).unwrap(), 0);
        assert!(matches!(oracle_next_sbs(&t, 1, &cfg, 22.0), Err(Error::TraceTooShort { .. })));
    }

    /// Literal enumeration of the candidate rule, kept independent of the
    /// single-pass implementation.
    fn brute_oracle(t: &SnrTrace, f: usize, n_pred: usize, th: f64) -> usize {
        let n = t.num_sbs();
        let mean = |b: usize| (1..=n_pred).map(|i| t.get(f + i, b)).sum::<f64>() / n_pred as f64;
        let candidates: Vec<usize> = (0..n).filter(|&b| (1..=n_pred).all(|i| t.get(f + i, b) >= th)).collect();
        let pool: Vec<usize> = if candidates.is_empty() { (0..n).collect() } else { candidates };
        let best = pool.iter().map(|&b| mean(b)).fold(f64::NEG_INFINITY, f64::max);
        *pool.iter().find(|&&b| mean(b) == best).unwrap()
    }

    proptest! {
        #[test]
        fn oracle_matches_enumeration(n_sbs in 1usize..=4, n_pred in 1usize..=5,
                                      raw in prop::collection::vec(15i32..30, 24)) {
            let frames = n_pred + 1;
            let rows: Vec<Vec<f64>> = (0..frames).map(|f| (0..n_sbs).map(|b| raw[(f * n_sbs + b) % raw.len()] as f64).collect()).collect();
            let t = trace(rows);
            let cfg = WindowConfig { n_obs: 1, n_pred };
            prop_assert_eq!(oracle_next_sbs(&t, 0, &cfg, 22.0).unwrap(), brute_oracle(&t, 0, n_pred, 22.0));
        }

        #[test]
        fn oracle_shift_invariant(raw in prop::collection::vec(10i32..35, 24), shift in -20i32..20) {
            let rows: Vec<Vec<f64>> = (0..6).map(|f| (0..4).map(|b| raw[f * 4 + b] as f64).collect()).collect();
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift as f64).collect()).collect();
            let cfg = WindowConfig { n_obs: 1, n_pred: 5 };
            prop_assert_eq!(
                oracle_next_sbs(&trace(rows), 0, &cfg, 22.0).unwrap(),
                oracle_next_sbs(&trace(shifted), 0, &cfg, 22.0 + shift as f64).unwrap()
            );
        }

        #[test]
        fn samples_copy_trace_and_respect_freeze(raw in prop::collection::vec(14.0..30.0f64, 3 * 60)) {
            let rows: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.to_vec()).collect();
            let t = trace(rows);
            let cfg = WindowConfig::default();
            let samples = extract_indexed(&t, &cfg, 22.0).unwrap();
            for w in samples.windows(2) {
                prop_assert!(w[1].0 - w[0].0 > cfg.n_pred);
            }
            for (f, s) in &samples {
                prop_assert!(s.label < 3);
                for b in 0..3 {
                    for k in 0..cfg.n_obs {
                        prop_assert_eq!(s.x[b * cfg.n_obs + k], t.get(f + 1 - cfg.n_obs + k, b));
                    }
                }
            }
        }
    }

    #[test]
    fn never_below_threshold_gives_no_samples() {
        let t = trace(vec![vec![25.0, 10.0, 30.0]; 50]);
        assert!(extract_samples(&t, &WindowConfig::default(), 22.0).unwrap().is_empty());
    }

    #[test]
    fn short_trace_rejected() {
        let t = trace(vec![vec![25.0]; 7]);
        assert!(matches!(extract_samples(&t, &WindowConfig::default(), 22.0), Err(Error::TraceTooShort { needed: 8, have: 7 })));
    }

    #[test]
    fn observation_layout() {
        let t = trace((0..5).map(|f| vec![f as f64, 10.0 + f as f64]).collect());
        assert_eq!(observation(&t, 3, 3), vec![1.0, 2.0, 3.0, 11.0, 12.0, 13.0]);
    }

    fn default_scenario() -> Scenario {
        Scenario::new(
            build_region(&TopologyConfig::default(), 42).unwrap(),
            ChannelParams::default(),
            MobilityConfig::default(),
            WindowConfig::default(),
            42,
        )
        .unwrap()
    }

    #[test]
    fn region_field_is_shared_by_vehicles_on_a_road() {
        let s = default_scenario();
        let field = s.shadow_field.as_ref().unwrap();
        let road = s.topology.roads[0];
        let at = |x: f64| Trajectory { positions: vec![road.point_at(x); 4], road_id: 0, entry_time_s: 0.0 };
        let a = trace_in_field(&s.topology, &s.channel, field, &at(300.0)).unwrap();
        let b = trace_in_field(&s.topology, &s.channel, field, &at(300.0)).unwrap();
        assert_eq!(a, b);
        let c = trace_in_field(&s.topology, &s.channel, field, &at(500.0)).unwrap();
        assert_ne!(a.frame(0), c.frame(0));
        // Different traversals differ only through their speed profiles.
        let t1 = s.traversal(0, 1).unwrap();
        let t2 = s.traversal(0, 2).unwrap();
        assert_eq!(t1.trace.frame(0), t2.trace.frame(0));
        let per_trip = Scenario::new(
            s.topology.clone(),
            ChannelParams { shadowing_scope: ShadowingScope::Trajectory, ..Default::default() },
            MobilityConfig::default(),
            WindowConfig::default(),
            42,
        )
        .unwrap();
        assert!(per_trip.shadow_field.is_none());
        assert_ne!(per_trip.traversal(0, 1).unwrap().trace.frame(0), per_trip.traversal(0, 2).unwrap().trace.frame(0));
    }

    #[test]
    fn region_field_follows_shadowing_law() {
        let mut topo = build_region(&TopologyConfig::default(), 3).unwrap();
        topo.obstacles.clear();
        let field = ShadowField::build(&topo, &ChannelParams::default(), 0.1, 9).unwrap();
        let values: Vec<f64> = (0..2).flat_map(|r| (0..8).map(move |b| (r, b))).flat_map(|(r, b)| {
            let f = &field;
            (0..=800).map(move |i| f.at(r, b, i as f64))
        }).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        // 16 columns of 80 correlation lengths each.
        assert!(mean.abs() < 1.0, "mean {mean}");
        assert!((std - 5.8).abs() < 0.6, "std {std}");
    }

    #[test]
    fn static_user_without_randomness_has_constant_rows() {
        let mut s = default_scenario();
        s.topology.obstacles.clear();
        let params = ChannelParams { shadow_std_los_db: 0.0, shadow_std_nlos_db: 0.0, ..Default::default() };
        let traj = Trajectory { positions: vec![Point::new(123.0, 0.0); 20], road_id: 0, entry_time_s: 0.0 };
        let t = trace_from_trajectory(&s.topology, &params, &traj, &mut rng::stream(1)).unwrap();
        assert_eq!((t.num_frames(), t.num_sbs()), (20, 8));
        for f in 1..20 {
            assert_eq!(t.frame(f), t.frame(0));
        }
    }

    #[test]
    fn approaching_user_sees_non_decreasing_snr() {
        let mut s = default_scenario();
        s.topology.obstacles.clear();
        let params = ChannelParams { shadow_std_los_db: 0.0, shadow_std_nlos_db: 0.0, ..Default::default() };
        let target = s.topology.sbs_positions[1];
        let positions: Vec<Point> = (0..200).map(|i| Point::new(target.x - 300.0 + i as f64 * 1.5, 0.0)).collect();
        let traj = Trajectory { positions, road_id: 0, entry_time_s: 0.0 };
        let t = trace_from_trajectory(&s.topology, &params, &traj, &mut rng::stream(1)).unwrap();
        let col: Vec<f64> = t.column(1).collect();
        assert!(col.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn trace_shape_and_group() {
        let s = default_scenario();
        let t = s.traversal(1, 5).unwrap();
        assert_eq!(t.trace.num_frames(), t.trajectory.num_frames());
        assert_eq!(t.trace.num_sbs(), 8);
        assert_eq!(t.trace.group_id, 2);
        assert!(t.samples.iter().all(|(_, x)| x.label < 8 && x.x.len() == 24 && x.group_id == 2));
    }

    #[test]
    fn balanced_sets_are_deterministic() {
        let s = default_scenario();
        let a = s.balanced_set(200, "test", 3, Split::Test).unwrap();
        let b = s.balanced_set(200, "test", 3, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.group_count(1), 100);
        assert_eq!(a.group_count(2), 100);
        assert!(s.balanced_set(201, "test", 3, Split::Test).is_err());
    }

    #[test]
    fn iid_users_hold_both_groups() {
        let s = default_scenario();
        let spec = DatasetSpec { test_size: 20, train_size: 20, num_users: 4, trajectories_per_user: 2, group_mix: GroupMix::Iid };
        let d = build_datasets(&s, &spec, 1).unwrap();
        for u in &d.users {
            assert!(u.group_count(1) > 0 && u.group_count(2) > 0);
        }
        let spec = DatasetSpec { group_mix: GroupMix::NonIid, ..spec };
        let d = build_datasets(&s, &spec, 1).unwrap();
        for (i, u) in d.users.iter().enumerate() {
            assert_eq!(u.group_count(1 + (i % 2) as u8), u.len());
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let d = Dataset::new(
            vec![
                Sample { x: vec![1.5, -2.25, 1.0 / 3.0], label: 2, group_id: 1 },
                Sample { x: vec![0.0, 7.0, 1e-7], label: 0, group_id: 2 },
            ],
            Split::Test,
        );
        let csv = d.to_csv();
        assert!(csv.starts_with("group_id,x_0,x_1,x_2,label\n"));
        assert_eq!(Dataset::from_csv(&csv, Split::Test).unwrap(), d);
        assert!(Dataset::from_csv("group_id,x_0,label\n1,2\n", Split::Test).is_err());
        assert!(Dataset::from_csv("foo,x_0,label\n1,2,3\n", Split::Test).is_err());
    }
}
