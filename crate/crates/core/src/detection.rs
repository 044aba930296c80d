//! History-aware detection of sign-flip attackers, additive-noise
//! attackers, and unreliable clients.
//!
//! The server keeps, per client, a running local average of that client's
//! updates and a bounded window of its recent local averages; the unweighted
//! mean of all local averages is the global reference each round. The three
//! detectors are pure reads of that state:
//!
//! * sign flip: cosine of (local average, global average) is negative;
//! * additive noise: window variance above `median + 2*std`, or local-average
//!   magnitude above `median + 2*std`, across the roster;
//! * unreliable: distance to the global average above `mean + std`.
//!
//! All threshold comparisons are strict. Statistics use population variance
//! and standard deviation throughout.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::vectors::{
    self, cosine_similarity, euclidean_distance, mean_coordinate_variance, norm, ParameterVector,
};

/// Rounds of local averages retained per client for variance analysis.
pub const DEFAULT_HISTORY_WINDOW: usize = 5;

/// Running averaging of one client's updates: absent history initializes to
/// the update itself, afterwards the coordinate-wise mean of the previous
/// average and the new update.
pub fn update_local_average(
    prev: Option<&ParameterVector>,
    update: &ParameterVector,
) -> Result<ParameterVector> {
    match prev {
        None => Ok(update.clone()),
        Some(prev) => {
            if prev.len() != update.len() {
                return Err(Error::DimensionMismatch {
                    expected: prev.len(),
                    got: update.len(),
                });
            }
            let values = prev
                .as_slice()
                .iter()
                .zip(update.as_slice())
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            Ok(ParameterVector::new(values))
        }
    }
}

/// Unweighted coordinate-wise mean of all clients' local averages,
/// attackers included; exclusion never feeds back into the reference
/// unless explicitly requested downstream.
pub fn global_average(locals: &[ParameterVector]) -> Result<ParameterVector> {
    let Some(first) = locals.first() else {
        return Err(Error::EmptyRoster);
    };
    let p = first.len();
    let mut acc = vec![0.0; p];
    for local in locals {
        if local.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: local.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(local.as_slice()) {
            *a += x;
        }
    }
    let inv = 1.0 / locals.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(ParameterVector::new(acc))
}

struct ClientHistory {
    local_average: Option<ParameterVector>,
    window: VecDeque<ParameterVector>,
}

/// Per-client running averages, bounded history windows, and the current
/// global average. Mutated once per round by the orchestrator; all
/// detector reads are pure.
pub struct HistoryState {
    clients: Vec<ClientHistory>,
    global: Option<ParameterVector>,
    window_cap: usize,
    rounds_recorded: u32,
}

impl HistoryState {
    pub fn new(n_clients: usize, window_cap: usize) -> Self {
        assert!(window_cap >= 1, "window must hold at least one entry");
        let clients = (0..n_clients)
            .map(|_| ClientHistory {
                local_average: None,
                window: VecDeque::with_capacity(window_cap),
            })
            .collect();
        Self {
            clients,
            global: None,
            window_cap,
            rounds_recorded: 0,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn window_cap(&self) -> usize {
        self.window_cap
    }

    pub fn rounds_recorded(&self) -> u32 {
        self.rounds_recorded
    }

    pub fn local_average(&self, client: usize) -> Option<&ParameterVector> {
        self.clients[client].local_average.as_ref()
    }

    pub fn window(&self, client: usize) -> &VecDeque<ParameterVector> {
        &self.clients[client].window
    }

    pub fn global(&self) -> Option<&ParameterVector> {
        self.global.as_ref()
    }

    /// Folds one round of updates (indexed by client) into the state:
    /// local-average recursion, window push, fresh global average. Every
    /// client advances every round, flagged or not, so a client that turns
    /// honest later is judged on what it actually sent since.
    pub fn record_round(&mut self, updates: &[ParameterVector]) -> Result<()> {
        if updates.len() != self.clients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clients.len(),
                got: updates.len(),
            });
        }
        if self.clients.is_empty() {
            return Err(Error::EmptyRoster);
        }
        let cap = self.window_cap;
        self.clients
            .par_iter_mut()
            .zip(updates.par_iter())
            .try_for_each(|(client, update)| -> Result<()> {
                let next = update_local_average(client.local_average.as_ref(), update)?;
                if client.window.len() == cap {
                    client.window.pop_front();
                }
                client.window.push_back(next.clone());
                client.local_average = Some(next);
                Ok(())
            })?;
        let locals: Vec<ParameterVector> = self
            .clients
            .iter()
            .map(|c| c.local_average.clone().expect("just recorded"))
            .collect();
        self.global = Some(global_average(&locals)?);
        self.rounds_recorded += 1;
        Ok(())
    }

    fn require_ready(&self) -> Result<(&[ClientHistory], &ParameterVector)> {
        if self.clients.is_empty() {
            return Err(Error::EmptyRoster);
        }
        match &self.global {
            Some(g) => Ok((&self.clients, g)),
            None => Err(Error::InsufficientHistory { got: 0 }),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SignFlipDetection {
    pub flagged: BTreeSet<usize>,
    /// Cosine of each client's local average against the global average.
    pub cosine: Vec<f64>,
}

/// Flags every client whose local average points away from the global
/// average (cosine strictly below zero). Zero-norm local averages read as
/// cosine 0 and are never flagged.
pub fn detect_sign_flip(state: &HistoryState) -> Result<SignFlipDetection> {
    let (clients, global) = state.require_ready()?;
    let cosine: Vec<f64> = clients
        .par_iter()
        .map(|c| {
            let local = c.local_average.as_ref().expect("state is ready");
            cosine_similarity(local, global)
        })
        .collect::<Result<_>>()?;
    let flagged = cosine
        .iter()
        .enumerate()
        .filter(|(_, &d)| d < 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(SignFlipDetection { flagged, cosine })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdditiveNoiseDetection {
    pub flagged: BTreeSet<usize>,
    /// Variance threshold; absent until two rounds of history exist.
    pub variance_threshold: Option<f64>,
    pub magnitude_threshold: f64,
    /// Mean per-coordinate variance of each client's window.
    pub variance: Vec<Option<f64>>,
    /// Norm of each client's local average.
    pub magnitude: Vec<f64>,
}

/// Two-pronged additive-noise test: window variance against
/// `median + 2*std`, and local-average magnitude against `median + 2*std`.
/// The variance prong stays silent until windows hold two entries; shorter
/// histories than the full window are used as-is rather than waiting.
pub fn detect_additive_noise(state: &HistoryState) -> Result<AdditiveNoiseDetection> {
    let (clients, _) = state.require_ready()?;

    let per_client: Vec<(Option<f64>, f64)> = clients
        .par_iter()
        .map(|c| {
            let local = c.local_average.as_ref().expect("state is ready");
            let variance = if c.window.len() >= 2 {
                Some(mean_coordinate_variance(c.window.iter())?)
            } else {
                None
            };
            Ok((variance, norm(local)))
        })
        .collect::<Result<_>>()?;
    let variance: Vec<Option<f64>> = per_client.iter().map(|(v, _)| *v).collect();
    let magnitude: Vec<f64> = per_client.iter().map(|(_, z)| *z).collect();

    let variance_values: Vec<f64> = variance.iter().flatten().copied().collect();
    let variance_threshold = if variance_values.len() == clients.len() {
        Some(vectors::median(&variance_values) + 2.0 * vectors::population_std(&variance_values))
    } else {
        None
    };
    let magnitude_threshold =
        vectors::median(&magnitude) + 2.0 * vectors::population_std(&magnitude);

    let mut flagged = BTreeSet::new();
    for i in 0..clients.len() {
        let over_variance = match (variance_threshold, variance[i]) {
            (Some(t), Some(v)) => v > t,
            _ => false,
        };
        if over_variance || magnitude[i] > magnitude_threshold {
            flagged.insert(i);
        }
    }
    Ok(AdditiveNoiseDetection {
        flagged,
        variance_threshold,
        magnitude_threshold,
        variance,
        magnitude,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct UnreliableDetection {
    pub flagged: BTreeSet<usize>,
    pub distance_threshold: f64,
    /// Euclidean distance of each client's local average to the reference.
    pub distance: Vec<f64>,
}

/// Flags clients whose local average strays from the reference point by
/// more than `mean + std` of all deviations.
pub fn detect_unreliable(state: &HistoryState) -> Result<UnreliableDetection> {
    let (_, global) = state.require_ready()?;
    detect_unreliable_against(state, global)
}

/// Same test against an explicit reference; lets the caller recompute the
/// global average over a reduced roster first.
pub fn detect_unreliable_against(
    state: &HistoryState,
    reference: &ParameterVector,
) -> Result<UnreliableDetection> {
    let (clients, _) = state.require_ready()?;
    let distance: Vec<f64> = clients
        .par_iter()
        .map(|c| {
            let local = c.local_average.as_ref().expect("state is ready");
            euclidean_distance(local, reference)
        })
        .collect::<Result<_>>()?;
    let distance_threshold = vectors::mean(&distance) + vectors::population_std(&distance);
    let flagged = distance
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > distance_threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(UnreliableDetection {
        flagged,
        distance_threshold,
        distance,
    })
}

/// Per-client detection statistics for one round.
#[derive(Debug, Clone, Serialize)]
pub struct ClientDiagnostics {
    /// Cosine of the local average against the global average.
    pub cosine_to_global: f64,
    /// Mean per-coordinate variance of the history window, if available.
    pub window_variance: Option<f64>,
    /// Norm of the local average.
    pub magnitude: f64,
    /// Distance of the local average to the global average.
    pub distance_to_global: f64,
}

/// Joint output of the three detectors after precedence resolution: a
/// client excluded as an attacker is dropped from the unreliable set, since
/// exclusion dominates down-weighting.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionReport {
    pub sign_flip_set: BTreeSet<usize>,
    pub additive_noise_set: BTreeSet<usize>,
    pub unreliable_set: BTreeSet<usize>,
    pub variance_threshold: Option<f64>,
    pub magnitude_threshold: f64,
    pub distance_threshold: f64,
    pub diagnostics: Vec<ClientDiagnostics>,
}

impl DetectionReport {
    /// Clients barred from aggregation this round.
    pub fn excluded(&self) -> BTreeSet<usize> {
        self.sign_flip_set
            .union(&self.additive_noise_set)
            .copied()
            .collect()
    }

    /// An empty report (nothing flagged) for defenses that skip detection.
    pub fn empty(n_clients: usize) -> Self {
        Self {
            sign_flip_set: BTreeSet::new(),
            additive_noise_set: BTreeSet::new(),
            unreliable_set: BTreeSet::new(),
            variance_threshold: None,
            magnitude_threshold: 0.0,
            distance_threshold: 0.0,
            diagnostics: vec![
                ClientDiagnostics {
                    cosine_to_global: 0.0,
                    window_variance: None,
                    magnitude: 0.0,
                    distance_to_global: 0.0,
                };
                n_clients
            ],
        }
    }
}

/// Runs all three detectors against the current state and resolves
/// precedence. With `recompute_reference_after_exclusion`, the unreliable
/// test measures deviations against a global average recomputed over the
/// non-excluded clients.
pub fn detect_all(
    state: &HistoryState,
    recompute_reference_after_exclusion: bool,
) -> Result<DetectionReport> {
    let sign = detect_sign_flip(state)?;
    let noise = detect_additive_noise(state)?;
    let excluded: BTreeSet<usize> = sign.flagged.union(&noise.flagged).copied().collect();

    let unreliable = if recompute_reference_after_exclusion && !excluded.is_empty() {
        let kept: Vec<ParameterVector> = (0..state.n_clients())
            .filter(|i| !excluded.contains(i))
            .map(|i| state.local_average(i).expect("state is ready").clone())
            .collect();
        if kept.is_empty() {
            detect_unreliable(state)?
        } else {
            detect_unreliable_against(state, &global_average(&kept)?)?
        }
    } else {
        detect_unreliable(state)?
    };

    let unreliable_set: BTreeSet<usize> = unreliable
        .flagged
        .difference(&excluded)
        .copied()
        .collect();

    let diagnostics = (0..state.n_clients())
        .map(|i| ClientDiagnostics {
            cosine_to_global: sign.cosine[i],
            window_variance: noise.variance[i],
            magnitude: noise.magnitude[i],
            distance_to_global: unreliable.distance[i],
        })
        .collect();

    Ok(DetectionReport {
        sign_flip_set: sign.flagged,
        additive_noise_set: noise.flagged,
        unreliable_set,
        variance_threshold: noise.variance_threshold,
        magnitude_threshold: noise.magnitude_threshold,
        distance_threshold: unreliable.distance_threshold,
        diagnostics,
    })
}
