//! Federated training over a stream of passing vehicles.
//!
//! Time is split into communication rounds of `round_duration_s`. A vehicle
//! that is willing to participate starts its local update once its stored
//! data is ready (on entry for traditional storage, after covering the
//! configured fraction of its route for streaming storage), trains for
//! `local_epochs` from the round's global model and uploads after
//! `compute_time_s`. The upload is dropped if the vehicle has left the
//! region or the round has ended by then. Receipts are folded into the
//! global model either all at once (size-weighted mean) or one by one with
//! running weights; both give the same model.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{history_road, Sample, Scenario, Traversal};
use crate::error::{invalid, Error, Result};
use crate::mobility::generate_arrivals;
use crate::neural::{self, accuracy, MlpParams, Standardizer, TrainConfig};
use crate::rng;

pub use crate::dataset::GroupMix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoragePolicy {
    /// Keep every sample of the most recent `trajectories` traversals.
    Traditional { trajectories: usize },
    /// Keep only the samples from a window covering `fraction` of the
    /// current traversal; they are dropped once used or when the region
    /// changes.
    Streaming { fraction: f64 },
}

impl StoragePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Traditional { trajectories: 0 } => {
                Err(invalid("traditional storage needs at least one trajectory"))
            }
            Self::Streaming { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(invalid(format!("streaming fraction must lie in (0, 1], got {fraction}")))
            }
            _ => Ok(()),
        }
    }

    /// Stored trajectories' worth of data for one region.
    pub fn trajectories_per_region(&self) -> f64 {
        match *self {
            Self::Traditional { trajectories } => trajectories as f64,
            Self::Streaming { fraction } => fraction,
        }
    }
}

/// Storage needed by traditional FL after visiting `regions` regions,
/// relative to streaming FL (which only ever holds one partial traversal).
pub fn storage_ratio(regions: usize, traditional: StoragePolicy, streaming: StoragePolicy) -> f64 {
    regions as f64 * traditional.trajectories_per_region() / streaming.trajectories_per_region()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Batch,
    StreamingAsync,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: usize,
    pub round_duration_s: f64,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability that a passing vehicle is willing to participate.
    pub participation: f64,
    pub storage: StoragePolicy,
    pub aggregation: AggregationMode,
    pub group_mix: GroupMix,
    /// Simulated duration of one local update.
    pub compute_time_s: f64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            round_duration_s: 60.0,
            local_epochs: 10,
            learning_rate: 0.05,
            batch_size: 1,
            participation: 0.10,
            storage: StoragePolicy::Streaming { fraction: 0.5 },
            aggregation: AggregationMode::StreamingAsync,
            group_mix: GroupMix::NonIid,
            compute_time_s: 5.0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        self.storage.validate()?;
        if !(self.round_duration_s > 0.0) {
            return Err(invalid("round duration must be positive"));
        }
        if !(0.0..=1.0).contains(&self.participation) {
            return Err(invalid(format!("participation must lie in [0, 1], got {}", self.participation)));
        }
        if !(self.compute_time_s >= 0.0) {
            return Err(invalid("compute time must be non-negative"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(invalid("learning rate and batch size must be positive"));
        }
        Ok(())
    }
}

/// Size-weighted mean `Σ ω_k w_k` with `ω_k = n_k / Σ n_m`.
pub fn aggregate_batch(models: &[MlpParams], sizes: &[usize]) -> Result<MlpParams> {
    let first = models.first().ok_or(Error::Empty("no models to aggregate"))?;
    if models.len() != sizes.len() {
        return Err(Error::DimensionMismatch { expected: models.len(), got: sizes.len() });
    }
    if sizes.contains(&0) {
        return Err(invalid("aggregation sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    let mut out = MlpParams::zeros(first.dims())?;
    for (m, &n) in models.iter().zip(sizes) {
        if !m.same_shape(first) {
            return Err(Error::DimensionMismatch { expected: first.len(), got: m.len() });
        }
        let w = n as f64 / total as f64;
        for (o, v) in out.values_mut().iter_mut().zip(m.values()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Running aggregate folded one receipt at a time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AsyncAggState {
    pub model: Option<MlpParams>,
    pub cumulative: usize,
    pub received: usize,
}

impl AsyncAggState {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first receipt becomes the model; receipt `k` is mixed in with
    /// `β_k = n_k / Σ_{m≤k} n_m`.
    pub fn receive(&mut self, incoming: &MlpParams, size: usize) -> Result<()> {
        if size == 0 {
            return Err(invalid("receipt size must be positive"));
        }
        match &mut self.model {
            None => self.model = Some(incoming.clone()),
            Some(model) => {
                if !model.same_shape(incoming) {
                    return Err(Error::DimensionMismatch { expected: model.len(), got: incoming.len() });
                }
                let beta = size as f64 / (self.cumulative + size) as f64;
                for (m, v) in model.values_mut().iter_mut().zip(incoming.values()) {
                    *m = beta * v + (1.0 - beta) * *m;
                }
            }
        }
        self.cumulative += size;
        self.received += 1;
        Ok(())
    }
}

pub fn aggregate_stream_step(mut state: AsyncAggState, incoming: &MlpParams, size: usize) -> Result<AsyncAggState> {
    state.receive(incoming, size)?;
    Ok(state)
}

/// Local update: start from the global model and run `epochs` of SGD.
pub fn local_update(global: &MlpParams, data: &[Sample], epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<MlpParams> {
    if data.is_empty() {
        return Err(Error::Empty("local training set"));
    }
    neural::sgd_train(global, data, &TrainConfig { learning_rate: lr, epochs, batch_size, shuffle_seed: seed })
}

/// What a single vehicle keeps on board for training.
#[derive(Clone, Debug)]
pub struct LocalStore {
    policy: StoragePolicy,
    n_pred: usize,
    retained: VecDeque<Vec<Sample>>,
    streaming: Vec<Sample>,
}

impl LocalStore {
    pub fn new(policy: StoragePolicy, n_pred: usize) -> Result<Self> {
        policy.validate()?;
        Ok(Self { policy, n_pred, retained: VecDeque::new(), streaming: Vec::new() })
    }

    /// A finished traversal; traditional storage keeps the newest ones.
    pub fn record_full(&mut self, samples: Vec<Sample>) {
        if let StoragePolicy::Traditional { trajectories } = self.policy {
            self.retained.push_front(samples);
            self.retained.truncate(trajectories);
        }
    }

    /// Enters a new region on `current`. Streaming storage discards the
    /// previous region's samples and buffers those labelled inside the
    /// window placed at `position` (see [`streaming_window`]). Returns the
    /// frame at which the buffer is complete.
    pub fn enter_region(&mut self, current: &Traversal, position: f64) -> usize {
        match self.policy {
            StoragePolicy::Traditional { .. } => 0,
            StoragePolicy::Streaming { fraction } => {
                let (start, end) = streaming_window(current.trajectory.num_frames(), fraction, position);
                self.streaming = current
                    .samples
                    .iter()
                    .filter(|(f, _)| *f >= start && f + self.n_pred < end)
                    .map(|(_, s)| s.clone())
                    .collect();
                end
            }
        }
    }

    /// Samples for this round's local update. Streaming samples are consumed.
    pub fn training_set(&mut self) -> Result<Vec<Sample>> {
        match self.policy {
            StoragePolicy::Traditional { .. } => {
                if self.retained.is_empty() {
                    return Err(Error::Empty("user has no stored trajectories"));
                }
                Ok(self.retained.iter().flatten().cloned().collect())
            }
            StoragePolicy::Streaming { .. } => Ok(std::mem::take(&mut self.streaming)),
        }
    }

    pub fn stored_samples(&self) -> usize {
        self.retained.iter().map(Vec::len).sum::<usize>() + self.streaming.len()
    }
}

/// Frames `[start, end)` of a `frames`-long traversal kept by streaming
/// storage: `floor(fraction · frames)` frames, starting `position` of the way
/// through the slack (0 keeps the first frames, 1 the last).
pub fn streaming_window(frames: usize, fraction: f64, position: f64) -> (usize, usize) {
    let len = (fraction * frames as f64).floor() as usize;
    let start = (position.clamp(0.0, 1.0) * (frames - len) as f64).floor() as usize;
    (start, start + len)
}

/// Bundles a stored history and storage policy into one local set.
/// `position` places the streaming window within the current traversal.
pub fn assemble_local_set(
    history: &[Vec<Sample>],
    current: Option<&Traversal>,
    policy: StoragePolicy,
    n_pred: usize,
    position: f64,
) -> Result<Vec<Sample>> {
    let mut store = LocalStore::new(policy, n_pred)?;
    for h in history.iter().rev() {
        store.record_full(h.clone());
    }
    if let Some(c) = current {
        store.enter_region(c, position);
    } else if matches!(policy, StoragePolicy::Streaming { .. }) {
        return Err(Error::Empty("streaming storage needs a current traversal"));
    }
    store.training_set()
}

/// A vehicle entering the region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Passer {
    /// `(arrival bucket, index in bucket)`.
    pub id: (u64, u32),
    pub seed: u64,
    pub entry_time_s: f64,
    pub road_id: usize,
    /// Uniform draw compared against the participation probability.
    pub willingness: f64,
    /// Where along its route a streaming user keeps samples, in `[0, 1)`.
    pub window_position: f64,
}

/// A passer that will train this round.
#[derive(Clone, Debug)]
pub struct Participant {
    pub passer: Passer,
    pub start_s: f64,
    pub upload_s: f64,
    pub departure_s: f64,
    /// Standardized local set.
    pub samples: Vec<Sample>,
}

/// The simulated region: physics, traffic, and the input scaling every
/// model in this world uses. All randomness derives from `seed`; arrivals
/// are generated per fixed bucket of simulated time so that the same
/// vehicles appear whatever the round length.
#[derive(Clone, Debug)]
pub struct World {
    pub scenario: Scenario,
    pub seed: u64,
    pub scaler: Standardizer,
}

const BUCKET_S: f64 = 10.0;

impl World {
    pub fn new(scenario: Scenario, seed: u64, scaler: Standardizer) -> Result<Self> {
        if scaler.dim() != scenario.input_dim() {
            return Err(Error::DimensionMismatch { expected: scenario.input_dim(), got: scaler.dim() });
        }
        Ok(Self { scenario, seed, scaler })
    }

    fn bucket(&self, j: u64) -> Result<Vec<Passer>> {
        let roads = self.scenario.topology.roads.len();
        let schedule = generate_arrivals(
            self.scenario.mobility.arrival_rate_per_min,
            roads,
            BUCKET_S,
            &mut rng::derive_stream(self.seed, "arrivals", j),
        )?;
        Ok(schedule
            .arrivals
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let seed = rng::derive_seed(rng::derive_seed(self.seed, "passer-bucket", j), "passer", i as u64);
                Passer {
                    id: (j, i as u32),
                    seed,
                    entry_time_s: j as f64 * BUCKET_S + a.entry_time_s,
                    road_id: a.road_id,
                    willingness: rng::derive_stream(seed, "willing", 0).gen::<f64>(),
                    window_position: rng::derive_stream(seed, "window", 0).gen::<f64>(),
                }
            })
            .collect())
    }

    /// Vehicles entering during `[t0, t1)`, in entry order.
    pub fn passers_between(&self, t0: f64, t1: f64) -> Result<Vec<Passer>> {
        let first = (t0.max(0.0) / BUCKET_S).floor() as u64;
        let last = (t1 / BUCKET_S).ceil() as u64;
        let mut out = Vec::new();
        for j in first..last {
            out.extend(self.bucket(j)?.into_iter().filter(|p| p.entry_time_s >= t0 && p.entry_time_s < t1));
        }
        Ok(out)
    }

    /// Longest possible stay in the region.
    fn max_sojourn_s(&self) -> f64 {
        let longest = self.scenario.topology.roads.iter().map(|r| r.length()).fold(0.0, f64::max);
        longest / self.scenario.mobility.speed_floor_mps + self.scenario.channel.frame_duration_s
    }

    pub fn current_traversal(&self, p: &Passer) -> Result<Traversal> {
        self.scenario.traversal(p.road_id, rng::derive_seed(p.seed, "current", 0))
    }

    /// Earlier traversals, most recent first, drawn per the group mix.
    pub fn history(&self, p: &Passer, count: usize, mix: GroupMix) -> Result<Vec<Vec<Sample>>> {
        (0..count)
            .map(|k| {
                let road = history_road(p.road_id, k, mix);
                Ok(self.scenario.traversal(road, rng::derive_seed(p.seed, "history", k as u64))?.sample_vec())
            })
            .collect()
    }

    /// Participants whose local update starts in `[t0, t1)`, each with its
    /// timing and standardized local set, plus how many passers were cut
    /// off by departure or by the deadline.
    pub fn participants(&self, cfg: &FlConfig, t0: f64, t1: f64) -> Result<(Vec<Participant>, DropCounts)> {
        let lookback = match cfg.storage {
            StoragePolicy::Traditional { .. } => 0.0,
            StoragePolicy::Streaming { .. } => self.max_sojourn_s(),
        };
        let frame_s = self.scenario.channel.frame_duration_s;
        let willing: Vec<Passer> =
            self.passers_between(t0 - lookback, t1)?.into_iter().filter(|p| p.willingness < cfg.participation).collect();
        let prepared = willing
            .into_par_iter()
            .map(|p| -> Result<Option<(Participant, Drop)>> {
                let (start_s, departure_s, samples) = match cfg.storage {
                    StoragePolicy::Traditional { trajectories } => {
                        if p.entry_time_s < t0 {
                            return Ok(None);
                        }
                        let traj = self.scenario.trajectory(p.road_id, rng::derive_seed(p.seed, "current", 0))?;
                        let departure = p.entry_time_s + traj.num_frames() as f64 * frame_s;
                        let history = self.history(&p, trajectories, cfg.group_mix)?;
                        (p.entry_time_s, departure, assemble_local_set(&history, None, cfg.storage, self.scenario.window.n_pred, 0.0)?)
                    }
                    StoragePolicy::Streaming { .. } => {
                        let StoragePolicy::Streaming { fraction } = cfg.storage else { unreachable!() };
                        let traj = self.scenario.trajectory(p.road_id, rng::derive_seed(p.seed, "current", 0))?;
                        let (_, end) = streaming_window(traj.num_frames(), fraction, p.window_position);
                        let start = p.entry_time_s + end as f64 * frame_s;
                        if start < t0 || start >= t1 {
                            return Ok(None);
                        }
                        let current = self.current_traversal(&p)?;
                        let departure = p.entry_time_s + current.duration_s();
                        let samples = assemble_local_set(&[], Some(&current), cfg.storage, self.scenario.window.n_pred, p.window_position)?;
                        (start, departure, samples)
                    }
                };
                if start_s >= t1 {
                    return Ok(None);
                }
                let upload_s = start_s + cfg.compute_time_s;
                let drop = if samples.is_empty() {
                    Drop::NoData
                } else if upload_s >= departure_s {
                    Drop::Departed
                } else if upload_s >= t1 {
                    Drop::Deadline
                } else {
                    Drop::Kept
                };
                let samples = self.scaler.apply_all(&samples);
                Ok(Some((Participant { passer: p, start_s, upload_s, departure_s, samples }, drop)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut counts = DropCounts::default();
        let mut kept = Vec::new();
        for (participant, drop) in prepared.into_iter().flatten() {
            match drop {
                Drop::Kept => kept.push(participant),
                Drop::NoData => counts.no_data += 1,
                Drop::Departed => counts.departed += 1,
                Drop::Deadline => counts.deadline += 1,
            }
        }
        kept.sort_by(|a, b| a.upload_s.total_cmp(&b.upload_s).then(a.passer.id.cmp(&b.passer.id)));
        Ok((kept, counts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Drop {
    Kept,
    NoData,
    Departed,
    Deadline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub no_data: usize,
    pub departed: usize,
    pub deadline: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Vehicles entering the region during the round.
    pub passing_users: usize,
    pub participants: usize,
    pub sample_counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub dropped: DropCounts,
    /// Test accuracy of the aggregated model; NaN when no test set is given.
    pub test_accuracy: f64,
    /// Simulated time at the end of the round.
    pub sim_time_s: f64,
}

impl RoundLog {
    pub fn total_samples(&self) -> usize {
        self.sample_counts.iter().sum()
    }
}

/// One communication round starting at `round_index · round_duration_s`
/// (plus `time_offset_s`). An empty round carries the global model over.
pub fn run_round(
    world: &World,
    global: &MlpParams,
    round_index: usize,
    cfg: &FlConfig,
    test: Option<&[Sample]>,
) -> Result<(MlpParams, RoundLog)> {
    cfg.validate()?;
    let t0 = round_index as f64 * cfg.round_duration_s;
    let t1 = t0 + cfg.round_duration_s;
    let passing_users = world.passers_between(t0, t1)?.len();
    let (participants, dropped) = world.participants(cfg, t0, t1)?;

    let locals = participants
        .par_iter()
        .map(|p| {
            local_update(global, &p.samples, cfg.local_epochs, cfg.learning_rate, cfg.batch_size, rng::derive_seed(p.passer.seed, "sgd", 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = participants.iter().map(|p| p.samples.len()).collect();
    let total: usize = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();

    let next = if locals.is_empty() {
        global.clone()
    } else {
        match cfg.aggregation {
            AggregationMode::Batch => aggregate_batch(&locals, &sizes)?,
            AggregationMode::StreamingAsync => {
                let mut state = AsyncAggState::new();
                for (m, &n) in locals.iter().zip(&sizes) {
                    state.receive(m, n)?;
                }
                state.model.expect("at least one receipt")
            }
        }
    };
    if !next.is_finite() {
        return Err(Error::Numerical(format!("global model diverged in round {round_index}")));
    }
    let test_accuracy = match test {
        Some(t) => accuracy(&next, t)?,
        None => f64::NAN,
    };
    let log = RoundLog {
        round: round_index,
        passing_users,
        participants: locals.len(),
        sample_counts: sizes,
        weights,
        dropped,
        test_accuracy,
        sim_time_s: t1,
    };
    Ok((next, log))
}

/// Runs rounds `0..cfg.rounds`, stopping early when `stop` returns true
/// after a round.
pub fn run_offline_until<F>(world: &World, cfg: &FlConfig, init: &MlpParams, test: &[Sample], mut stop: F) -> Result<(MlpParams, Vec<RoundLog>)>
where
    F: FnMut(&RoundLog) -> bool,
{
    let mut global = init.clone();
    let mut curve = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let (next, log) = run_round(world, &global, t, cfg, Some(test))?;
        global = next;
        let done = stop(&log);
        curve.push(log);
        if done {
            break;
        }
    }
    Ok((global, curve))
}

/// `cfg.rounds` rounds, evaluating on `test` (standardized) after each.
pub fn run_offline(world: &World, cfg: &FlConfig, init: &MlpParams, test: &[Sample]) -> Result<(MlpParams, Vec<RoundLog>)> {
    run_offline_until(world, cfg, init, test, |_| false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    /// Accuracy of the starting model on the new test set.
    pub initial_accuracy: f64,
    pub curve: Vec<RoundLog>,
    /// Accuracy of the model in service during each round: the starting
    /// model in round 0, the previous round's aggregate afterwards.
    pub in_service_accuracy: Vec<f64>,
    /// Time average of `in_service_accuracy` over the simulated period
    /// (the initial accuracy when no rounds run).
    pub average_accuracy: f64,
    pub final_model: MlpParams,
}

/// Online refinement after a mobility change: streaming FL on `world`
/// (which already carries the new mobility) starting from `init`, usually
/// the offline model.
pub fn run_online(world: &World, init: &MlpParams, cfg: &FlConfig, test: &[Sample]) -> Result<OnlineReport> {
    let initial_accuracy = accuracy(init, test)?;
    let (final_model, curve) = run_offline(world, cfg, init, test)?;
    let in_service_accuracy: Vec<f64> =
        std::iter::once(initial_accuracy).chain(curve.iter().map(|l| l.test_accuracy)).take(curve.len()).collect();
    let average_accuracy = if in_service_accuracy.is_empty() {
        initial_accuracy
    } else {
        in_service_accuracy.iter().sum::<f64>() / in_service_accuracy.len() as f64
    };
    Ok(OnlineReport { initial_accuracy, curve, in_service_accuracy, average_accuracy, final_model })
}

/// Learning curve as `round,participants,total_samples,test_accuracy`.
pub fn curve_to_csv(curve: &[RoundLog]) -> String {
    let mut out = String::from("round,participants,total_samples,test_accuracy\n");
    for l in curve {
        let _ = writeln!(out, "{},{},{},{:.6}", l.round, l.participants, l.total_samples(), l.test_accuracy);
    }
    out
}

/// First round (1-based count) whose accuracy reaches `threshold`.
pub fn rounds_to_reach(curve: &[RoundLog], threshold: f64) -> Option<usize> {
    curve.iter().position(|l| l.test_accuracy >= threshold).map(|i| i + 1)
}
