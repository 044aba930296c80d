//! Untargeted attacks injected into otherwise honest gradient updates, and
//! the client roles that drive them.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientUpdate;
use crate::seed;
use crate::vectors::ParameterVector;

/// What a client does with its locally computed update each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    /// Trains honestly and sends the update unchanged.
    Benign,
    /// Negates every coordinate of the update.
    SignFlip,
    /// Adds i.i.d. Gaussian noise to every coordinate.
    AdditiveNoise,
    /// Honest, but trains on a degraded copy of its data.
    Unreliable,
}

impl ClientRole {
    pub fn is_compromised(self) -> bool {
        matches!(self, ClientRole::SignFlip | ClientRole::AdditiveNoise)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClientRole::Benign => "benign",
            ClientRole::SignFlip => "sign_flip",
            ClientRole::AdditiveNoise => "additive_noise",
            ClientRole::Unreliable => "unreliable",
        }
    }
}

/// Compromised clients must not outnumber the honest ones
/// (benign + unreliable), or the honest majority every detector leans on
/// is gone.
pub fn validate_roster(roles: &[ClientRole]) -> Result<()> {
    if roles.is_empty() {
        return Err(Error::EmptyRoster);
    }
    let compromised = roles.iter().filter(|r| r.is_compromised()).count();
    let honest = roles.len() - compromised;
    if compromised > honest {
        return Err(Error::config(
            "roster",
            format!("{compromised} compromised clients exceed {honest} benign + unreliable"),
        ));
    }
    Ok(())
}

/// Sign-flipping attack: every coordinate negated, magnitude preserved
/// exactly. Client id and round pass through untouched.
pub fn sign_flip(update: GradientUpdate) -> GradientUpdate {
    let mut delta = update.delta;
    for v in delta.as_mut_slice() {
        *v = -*v;
    }
    GradientUpdate {
        client_id: update.client_id,
        round: update.round,
        delta,
    }
}

/// Additive-noise attack: i.i.d. `N(0, sigma^2)` added to every coordinate,
/// reproducible per seed. `sigma = 0` returns the update unchanged.
pub fn additive_noise(update: GradientUpdate, sigma: f64, seed_value: u64) -> GradientUpdate {
    assert!(sigma >= 0.0, "noise level must be non-negative");
    if sigma == 0.0 {
        return update;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let mut delta = update.delta;
    for v in delta.as_mut_slice() {
        *v += noise.sample(&mut rng);
    }
    GradientUpdate {
        client_id: update.client_id,
        round: update.round,
        delta,
    }
}

/// Median of the honest-role clients' update norms, doubled; the default
/// noise level when the config leaves it unset. Falls back to the whole
/// roster when no client is benign.
pub fn auto_attack_sigma(roles: &[ClientRole], honest_updates: &[GradientUpdate]) -> f64 {
    let benign_norms: Vec<f64> = honest_updates
        .iter()
        .filter(|u| roles[u.client_id] == ClientRole::Benign)
        .map(|u| crate::vectors::norm(&u.delta))
        .collect();
    let norms = if benign_norms.is_empty() {
        honest_updates
            .iter()
            .map(|u| crate::vectors::norm(&u.delta))
            .collect()
    } else {
        benign_norms
    };
    2.0 * crate::vectors::median(&norms)
}

/// Applies the client's role to its honestly computed update.
pub fn apply_role(
    role: ClientRole,
    update: GradientUpdate,
    attack_sigma: f64,
    master_seed: u64,
    attack_active: bool,
) -> GradientUpdate {
    if !attack_active {
        return update;
    }
    match role {
        ClientRole::Benign | ClientRole::Unreliable => update,
        ClientRole::SignFlip => sign_flip(update),
        ClientRole::AdditiveNoise => {
            let s = seed::derive_seed(
                master_seed,
                seed::stream::ATTACK,
                update.client_id as u64,
                update.round as u64,
            );
            additive_noise(update, attack_sigma, s)
        }
    }
}
