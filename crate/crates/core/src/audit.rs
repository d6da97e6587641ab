//! Overhead accounting and disclosure checks over a [`MessageLog`].
//!
//! The disclosure check is structural: a received payload counts as a
//! disclosure of hospital `i` when it matches `i`'s true post-training
//! weights for that round within `tol * max|w_i|` in the L-infinity norm.
//! Only payloads sent by hospitals are examined; broadcasts carry the
//! server's own global model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{linf_dist, WeightVector};
use crate::protocol::{Endpoint, MessageKind, MessageLog};

/// Post-training weights `w_k` for every (round, hospital) of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrueWeights {
    map: BTreeMap<(usize, usize), WeightVector>,
}

impl TrueWeights {
    pub fn insert(&mut self, round: usize, hospital: usize, w: WeightVector) {
        self.map.insert((round, hospital), w);
    }

    pub fn get(&self, round: usize, hospital: usize) -> Option<&WeightVector> {
        self.map.get(&(round, hospital))
    }

    pub fn rounds(&self) -> BTreeSet<usize> {
        self.map.keys().map(|&(r, _)| r).collect()
    }

    /// `(hospital, weights)` for one round, ascending by hospital.
    pub fn round(&self, round: usize) -> impl Iterator<Item = (usize, &WeightVector)> {
        self.map
            .range((round, 0)..(round + 1, 0))
            .map(|(&(_, k), w)| (k, w))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub messages: u64,
    pub bytes: u64,
}

impl Tally {
    fn add(&mut self, bytes: u64) {
        self.messages += 1;
        self.bytes += bytes;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub total: Tally,
    pub by_kind: BTreeMap<String, Tally>,
}

/// Message and byte counts.
///
/// JSON fields: `total` and `per_round[].total` are `{messages, bytes}`;
/// `by_kind` is keyed by message kind (all four kinds always present);
/// `by_link` has keys `server_hospital` and `hospital_hospital`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageStats {
    pub total: Tally,
    pub by_kind: BTreeMap<String, Tally>,
    pub by_link: BTreeMap<String, Tally>,
    pub per_round: Vec<RoundStats>,
}

pub const LINK_SERVER_HOSPITAL: &str = "server_hospital";
pub const LINK_HOSPITAL_HOSPITAL: &str = "hospital_hospital";

fn empty_kinds() -> BTreeMap<String, Tally> {
    MessageKind::ALL
        .iter()
        .map(|k| (k.to_string(), Tally::default()))
        .collect()
}

impl MessageStats {
    pub fn kind(&self, kind: MessageKind) -> Tally {
        self.by_kind.get(kind.as_str()).copied().unwrap_or_default()
    }
}

pub fn count_messages(log: &MessageLog) -> MessageStats {
    let mut stats = MessageStats {
        by_kind: empty_kinds(),
        by_link: [LINK_SERVER_HOSPITAL, LINK_HOSPITAL_HOSPITAL]
            .into_iter()
            .map(|l| (l.to_string(), Tally::default()))
            .collect(),
        ..MessageStats::default()
    };
    let mut per_round: BTreeMap<usize, RoundStats> = BTreeMap::new();
    for r in &log.records {
        let kind = r.kind.to_string();
        stats.total.add(r.byte_size);
        stats.by_kind.get_mut(&kind).expect("all kinds seeded").add(r.byte_size);
        let link = if r.sender.is_server() || r.receiver.is_server() {
            LINK_SERVER_HOSPITAL
        } else {
            LINK_HOSPITAL_HOSPITAL
        };
        stats.by_link.get_mut(link).expect("both links seeded").add(r.byte_size);
        let rs = per_round.entry(r.round).or_insert_with(|| RoundStats {
            round: r.round,
            by_kind: empty_kinds(),
            ..RoundStats::default()
        });
        rs.total.add(r.byte_size);
        rs.by_kind.get_mut(&kind).expect("all kinds seeded").add(r.byte_size);
    }
    stats.per_round = per_round.into_values().collect();
    stats
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerDisclosure {
    pub round: usize,
    pub hospital: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeerDisclosure {
    pub round: usize,
    pub receiver: usize,
    pub hospital: usize,
}

/// Result of [`check_disclosure`].
///
/// `peer_directional_matches` counts hospital-to-hospital payloads that are
/// a positive multiple of another hospital's weights (every smc share is).
/// It is informational and does not fail an audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub strategy: String,
    pub rounds_audited: usize,
    pub tolerance: f64,
    pub payloads_checked: usize,
    pub server_disclosures: Vec<ServerDisclosure>,
    pub peer_exact_disclosures: Vec<PeerDisclosure>,
    pub peer_directional_matches: usize,
}

impl AuditReport {
    pub fn with_strategy(mut self, strategy: impl Into<String>) -> Self {
        self.strategy = strategy.into();
        self
    }

    /// No server or exact peer disclosure was found.
    pub fn passed(&self) -> bool {
        self.server_disclosures.is_empty() && self.peer_exact_disclosures.is_empty()
    }
}

fn matches(p: &WeightVector, w: &WeightVector, tol: f64) -> Result<bool> {
    Ok(linf_dist(p, w)? <= tol * w.max_abs())
}

fn same_direction(p: &WeightVector, w: &WeightVector) -> bool {
    let (a, b) = (p.as_slice(), w.as_slice());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    na > 0.0 && nb > 0.0 && dot / (na * nb) >= 1.0 - 1e-9
}

/// Checks every hospital-sent payload in `log` against `truth`.
///
/// The log must carry payloads and cover exactly the rounds in `truth`.
pub fn check_disclosure(log: &MessageLog, truth: &TrueWeights, tol: f64) -> Result<AuditReport> {
    if !tol.is_finite() || tol < 0.0 {
        return Err(Error::usage("tolerance must be finite and >= 0"));
    }
    let log_rounds: BTreeSet<usize> = log.records.iter().map(|r| r.round).collect();
    let truth_rounds = truth.rounds();
    if log_rounds != truth_rounds {
        return Err(Error::usage(format!(
            "log covers {} rounds but true weights cover {}",
            log_rounds.len(),
            truth_rounds.len()
        )));
    }

    let mut server = BTreeSet::new();
    let mut peer = BTreeSet::new();
    let mut directional = 0;
    let mut checked = 0;
    for r in &log.records {
        if r.sender.is_server() {
            continue;
        }
        let payload = r.payload.as_ref().ok_or_else(|| {
            Error::usage("log records carry no payloads; rerun with payload retention")
        })?;
        checked += 1;
        match r.receiver {
            Endpoint::Server => {
                for (i, w) in truth.round(r.round) {
                    if matches(payload, w, tol)? {
                        server.insert(ServerDisclosure {
                            round: r.round,
                            hospital: i,
                        });
                    }
                }
            }
            Endpoint::Hospital(receiver) => {
                let mut aligned = false;
                for (i, w) in truth.round(r.round).filter(|&(i, _)| i != receiver) {
                    if matches(payload, w, tol)? {
                        peer.insert(PeerDisclosure {
                            round: r.round,
                            receiver,
                            hospital: i,
                        });
                    }
                    aligned |= same_direction(payload, w);
                }
                directional += usize::from(aligned);
            }
        }
    }
    Ok(AuditReport {
        strategy: String::from("unknown"),
        rounds_audited: log_rounds.len(),
        tolerance: tol,
        payloads_checked: checked,
        server_disclosures: server.into_iter().collect(),
        peer_exact_disclosures: peer.into_iter().collect(),
        peer_directional_matches: directional,
    })
}
