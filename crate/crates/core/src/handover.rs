//! Handover policy replay over SNR traces and uplink cost figures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::SnrTrace;
use crate::dataset::{observation, oracle_next_sbs, replay_proactive, WindowConfig};
use crate::error::{invalid, Error, Result};
use crate::neural::Classifier;

#[derive(Clone, Copy, Debug)]
pub enum PolicyKind<'a> {
    /// Switch to the strongest SBS as soon as the serving SNR drops below threshold.
    ReactiveNoTtt,
    /// Switch only after the trigger has held for `ttt_s` seconds.
    ReactiveTtt { ttt_s: f64 },
    /// Ask the classifier for the next SBS and hold it for the prediction window.
    ProactiveModel(&'a Classifier),
    /// Same as the model policy but with perfect knowledge of future SNR.
    ProactivePerfect,
}

impl PolicyKind<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ReactiveNoTtt => "reactive_no_ttt",
            Self::ReactiveTtt { .. } => "reactive_ttt",
            Self::ProactiveModel(_) => "proactive_model",
            Self::ProactivePerfect => "proactive_perfect",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PolicySpec<'a> {
    pub kind: PolicyKind<'a>,
    pub gamma_th: f64,
    pub windows: WindowConfig,
}

impl<'a> PolicySpec<'a> {
    pub fn new(kind: PolicyKind<'a>, gamma_th: f64, windows: WindowConfig) -> Self {
        Self { kind, gamma_th, windows }
    }
}

/// Default time-to-trigger, equal to the prediction horizon at 0.1 s frames.
pub const DEFAULT_TTT_S: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandoverMetrics {
    pub handover_count: usize,
    /// Mean serving SNR over every frame of the trace.
    pub avg_snr_db: f64,
    pub trigger_count: usize,
}

/// Serving SBS in each frame plus the number of triggers that fired.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayLog {
    pub serving: Vec<usize>,
    pub triggers: usize,
}

impl ReplayLog {
    pub fn metrics(&self, trace: &SnrTrace) -> HandoverMetrics {
        let handover_count = self.serving.windows(2).filter(|w| w[0] != w[1]).count();
        let sum: f64 = self.serving.iter().enumerate().map(|(f, &b)| trace.get(f, b)).sum();
        HandoverMetrics { handover_count, avg_snr_db: sum / self.serving.len() as f64, trigger_count: self.triggers }
    }
}

fn ttt_frames(ttt_s: f64, frame_s: f64) -> Result<usize> {
    if !(ttt_s > 0.0 && frame_s > 0.0) {
        return Err(invalid(format!("time-to-trigger must be positive, got {ttt_s}")));
    }
    Ok(((ttt_s / frame_s).round() as usize).max(1))
}

/// Frame-by-frame replay. Reactive switches apply within the frame whose
/// measurement completes the trigger; proactive decisions taken at frame
/// `f` apply from frame `f + 1`.
pub fn replay(trace: &SnrTrace, policy: &PolicySpec) -> Result<ReplayLog> {
    let len = trace.num_frames();
    if len == 0 {
        return Err(Error::Empty("trace has no frames"));
    }
    let gamma = policy.gamma_th;
    match policy.kind {
        PolicyKind::ReactiveNoTtt | PolicyKind::ReactiveTtt { .. } => {
            let hold = match policy.kind {
                PolicyKind::ReactiveTtt { ttt_s } => ttt_frames(ttt_s, trace.frame_duration_s)?,
                _ => 1,
            };
            let mut log = ReplayLog { serving: Vec::with_capacity(len), triggers: 0 };
            let mut current = trace.strongest(0);
            let mut run = 0;
            for f in 0..len {
                if trace.get(f, current) < gamma {
                    log.triggers += 1;
                    run += 1;
                    if run >= hold {
                        current = trace.strongest(f);
                        run = 0;
                    }
                } else {
                    run = 0;
                }
                log.serving.push(current);
            }
            Ok(log)
        }
        PolicyKind::ProactiveModel(model) => {
            let w = &policy.windows;
            let needed = trace.num_sbs() * w.n_obs;
            if model.params.input_dim() != needed {
                return Err(Error::DimensionMismatch { expected: needed, got: model.params.input_dim() });
            }
            if model.params.num_classes() != trace.num_sbs() {
                return Err(Error::DimensionMismatch { expected: trace.num_sbs(), got: model.params.num_classes() });
            }
            check_len(trace, w)?;
            let r = replay_proactive(trace, w, gamma, |f| model.predict(&observation(trace, f, w.n_obs)))?;
            Ok(ReplayLog { serving: r.serving, triggers: r.decisions.len() })
        }
        PolicyKind::ProactivePerfect => {
            let w = &policy.windows;
            check_len(trace, w)?;
            let r = replay_proactive(trace, w, gamma, |f| oracle_next_sbs(trace, f, w, gamma))?;
            Ok(ReplayLog { serving: r.serving, triggers: r.decisions.len() })
        }
    }
}

fn check_len(trace: &SnrTrace, w: &WindowConfig) -> Result<()> {
    w.validate()?;
    if trace.num_frames() < w.min_trace_len() {
        return Err(Error::TraceTooShort { needed: w.min_trace_len(), have: trace.num_frames() });
    }
    Ok(())
}

pub fn evaluate_policy(trace: &SnrTrace, policy: &PolicySpec) -> Result<HandoverMetrics> {
    Ok(replay(trace, policy)?.metrics(trace))
}

/// Metrics for every trace, in order.
pub fn evaluate_many(traces: &[SnrTrace], policy: &PolicySpec) -> Result<Vec<HandoverMetrics>> {
    traces.par_iter().map(|t| evaluate_policy(t, policy)).collect()
}

/// Population means of handover count and average SNR.
pub fn mean_metrics(metrics: &[HandoverMetrics]) -> Result<(f64, f64)> {
    if metrics.is_empty() {
        return Err(Error::Empty("no metrics to average"));
    }
    let n = metrics.len() as f64;
    Ok((
        metrics.iter().map(|m| m.handover_count as f64).sum::<f64>() / n,
        metrics.iter().map(|m| m.avg_snr_db).sum::<f64>() / n,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Raw SNR measurements are uploaded for training.
    Centralized,
    /// Only the model parameters are uploaded.
    Federated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub total_kbits: f64,
    pub rate_kbps: f64,
}

/// Uplink volume per vehicle and the average rate over its stay.
pub fn comm_cost(scheme: Scheme, num_sbs: usize, sojourn_s: f64, frame_s: f64, num_params: usize, bits: u32) -> Result<CommCost> {
    if !(sojourn_s > 0.0) {
        return Err(invalid(format!("sojourn time must be positive, got {sojourn_s}")));
    }
    let total_bits = match scheme {
        Scheme::Centralized => {
            if !(frame_s > 0.0) {
                return Err(invalid("frame duration must be positive"));
            }
            num_sbs as f64 * (sojourn_s / frame_s) * bits as f64
        }
        Scheme::Federated => num_params as f64 * bits as f64,
    };
    let total_kbits = total_bits / 1000.0;
    Ok(CommCost { total_kbits, rate_kbps: total_kbits / sojourn_s })
}
