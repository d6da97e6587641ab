//! Cluster-based secret sharing of model weights.
//!
//! Within a cluster `n_c` of `N` hospitals, hospital `k` draws coefficients
//! `beta_{k,j}` (one per member `j`, summing to one), keeps
//! `beta_{k,k} * w_k` and sends `beta_{k,j} * w_k` to every neighbour `j`.
//! Each hospital then holds the masked sum
//!
//! ```text
//! R_k = sum_{i in n_c} beta_{i,k} * w_i
//! ```
//!
//! and because every hospital's coefficients sum to one, the server's mean
//! of all `R_k` equals the mean of the raw `w_i`.
//!
//! Each share is a scalar multiple of its sender's weights, so the receiving
//! neighbour learns the direction of `w_i` though not its scale. The
//! per-coordinate coefficient variant that would hide it is not implemented.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ProtocolError, Result};
use crate::params::{scale, vec_sum, WeightVector};
use crate::rng::Stream;

/// Produces `n` positive reals that sum to one.
pub trait CoefficientSampler: Send + Sync {
    fn sample(&self, n: usize, rng: &mut Stream) -> Result<Vec<f64>>;
}

/// Uniform on the simplex: independent unit-exponential draws, normalised.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialSimplex;

impl CoefficientSampler for ExponentialSimplex {
    fn sample(&self, n: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::usage("cluster size must be at least 1"));
        }
        if n == 1 {
            return Ok(vec![1.0]);
        }
        loop {
            let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let betas: Vec<f64> = draws.iter().map(|d| d / total).collect();
            // A zero draw (or one swamping the rest) would leave an entry on the
            // boundary of (0, 1). Vanishingly rare; redraw.
            if betas.iter().all(|&b| b > 0.0 && b < 1.0) {
                return Ok(betas);
            }
        }
    }
}

/// [`ExponentialSimplex`] draw of `n` coefficients.
pub fn sample_coefficients(n: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    ExponentialSimplex.sample(n, rng)
}

/// Hospital `owner`'s split of its weights across its cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub owner: usize,
    pub cluster: usize,
    /// Recipient hospital -> coefficient.
    pub betas: BTreeMap<usize, f64>,
}

impl CoefficientVector {
    /// Draws coefficients for `owner` over the (sorted) `members` of its cluster.
    pub fn draw(
        owner: usize,
        cluster: usize,
        members: &[usize],
        sampler: &dyn CoefficientSampler,
        rng: &mut Stream,
    ) -> Result<Self> {
        if !members.contains(&owner) {
            return Err(Error::usage(format!(
                "hospital {owner} is not a member of cluster {cluster}"
            )));
        }
        let values = sampler.sample(members.len(), rng)?;
        if values.len() != members.len() {
            return Err(Error::Shape {
                expected: members.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            owner,
            cluster,
            betas: members.iter().copied().zip(values).collect(),
        })
    }

    /// Checks the simplex constraint: entries in (0, 1) (or exactly 1 for a
    /// singleton) summing to one within `1e-12`.
    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() {
            return Err(Error::usage("coefficient vector is empty"));
        }
        let sum: f64 = self.betas.values().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::usage(format!("coefficients sum to {sum}, not 1")));
        }
        if self.betas.len() >= 2 && self.betas.values().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::usage("coefficients must lie strictly inside (0, 1)"));
        }
        Ok(())
    }
}

/// `beta * w_source`, addressed to `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub source: usize,
    pub target: usize,
    pub round: usize,
    pub payload: WeightVector,
}

/// The sum of the shares a hospital holds after the exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSum {
    pub holder: usize,
    pub cluster: usize,
    pub round: usize,
    pub payload: WeightVector,
}

/// One share per cluster member, including the self-share `target == owner`.
pub fn make_shares(w: &WeightVector, coeffs: &CoefficientVector, round: usize) -> Result<Vec<Share>> {
    coeffs.validate()?;
    coeffs
        .betas
        .iter()
        .map(|(&target, &beta)| {
            Ok(Share {
                source: coeffs.owner,
                target,
                round,
                payload: scale(w, beta)?,
            })
        })
        .collect()
}

/// Adds up the shares held by `holder`, in ascending source order.
///
/// `members` is the holder's cluster. Exactly one share per member is
/// required, all addressed to `holder` and all from `round`.
pub fn accumulate_shares(
    holder: usize,
    cluster: usize,
    members: &[usize],
    round: usize,
    shares: &[Share],
) -> Result<MaskedSum> {
    let mut by_source: BTreeMap<usize, &Share> = BTreeMap::new();
    for s in shares {
        if s.target != holder {
            return Err(Error::usage(format!(
                "share from h{} is addressed to h{}, not h{holder}",
                s.source, s.target
            )));
        }
        if !members.contains(&s.source) {
            return Err(ProtocolError::ForeignShare {
                holder,
                source_id: s.source,
            }
            .into());
        }
        if s.round != round {
            return Err(ProtocolError::RoundMismatch {
                source_id: s.source,
                expected: round,
                found: s.round,
            }
            .into());
        }
        if by_source.insert(s.source, s).is_some() {
            return Err(ProtocolError::DuplicateShare {
                holder,
                source_id: s.source,
            }
            .into());
        }
    }
    if let Some(&missing) = members.iter().find(|m| !by_source.contains_key(m)) {
        return Err(ProtocolError::MissingShare {
            holder,
            source_id: missing,
        }
        .into());
    }
    let payloads: Vec<WeightVector> = by_source.values().map(|s| s.payload.clone()).collect();
    Ok(MaskedSum {
        holder,
        cluster,
        round,
        payload: vec_sum(&payloads)?,
    })
}

/// Server-side mean of all `k` masked sums, summed in ascending holder order.
pub fn reconstruct_mean(sums: &[MaskedSum], k: usize) -> Result<WeightVector> {
    if sums.len() != k {
        return Err(ProtocolError::SumCount {
            expected: k,
            found: sums.len(),
        }
        .into());
    }
    let mut ordered: Vec<&MaskedSum> = sums.iter().collect();
    ordered.sort_by_key(|s| s.holder);
    for pair in ordered.windows(2) {
        if pair[0].holder == pair[1].holder {
            return Err(ProtocolError::DuplicateSum {
                holder: pair[0].holder,
            }
            .into());
        }
    }
    if let Some(first) = ordered.first() {
        if let Some(bad) = ordered.iter().find(|s| s.round != first.round) {
            return Err(ProtocolError::RoundMismatch {
                source_id: bad.holder,
                expected: first.round,
                found: bad.round,
            }
            .into());
        }
    }
    let payloads: Vec<WeightVector> = ordered.iter().map(|s| s.payload.clone()).collect();
    let total = vec_sum(&payloads)?;
    scale(&total, 1.0 / k as f64)
}
