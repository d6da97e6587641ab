//! Round orchestration for the three aggregation strategies.
//!
//! A round is: server broadcast, local training at every hospital, a
//! strategy-specific upload, then server aggregation. All traffic goes
//! through a [`Network`] so it can be counted and audited.
//!
//! Randomness comes from [`crate::rng::substream`]: the cluster assignment
//! and initial weights from run-wide streams, local shuffles, coefficients
//! and DP noise from per-(hospital, round) streams. Local training runs in
//! parallel across hospitals; the result does not depend on scheduling.

mod config;
mod message;

pub use config::{RunConfig, StrategyKind};
pub use message::{
    payload_digest, DropRule, Endpoint, LogRecord, Message, MessageKind, MessageLog, Network,
    HEADER_BYTES, LOG_HEADER,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::TrueWeights;
use crate::data::{generate_clients, ClientDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_clients, CurvePoint, EvalReport};
use crate::model::{init_weights, local_training, OptimizerState, TrainingPlan};
use crate::params::{vec_mean, WeightVector};
use crate::rng::{substream, Purpose, Stream};
use crate::sharing::{
    accumulate_shares, make_shares, reconstruct_mean, CoefficientSampler, CoefficientVector,
    ExponentialSimplex, MaskedSum, Share,
};

/// Partition of hospitals `1..=K` into `M` equal clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Sorted member lists; cluster `c` (1-based) is `members[c - 1]`.
    pub members: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_size(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }

    /// 1-based cluster index of hospital `k`.
    pub fn cluster_of(&self, k: usize) -> Option<usize> {
        self.members.iter().position(|m| m.contains(&k)).map(|c| c + 1)
    }

    pub fn same_cluster(&self, a: usize, b: usize) -> bool {
        matches!((self.cluster_of(a), self.cluster_of(b)), (Some(x), Some(y)) if x == y)
    }
}

/// Random equal-size clusters: shuffle `1..=k`, cut into `m` consecutive groups.
pub fn assign_clusters(k: usize, m: usize, rng: &mut Stream) -> Result<ClusterAssignment> {
    if m == 0 || k == 0 {
        return Err(Error::config("clusters", "clients and clusters must be at least 1"));
    }
    if !k.is_multiple_of(m) {
        return Err(Error::config(
            "clusters",
            format!("clients ({k}) must be divisible by clusters ({m}) so every cluster has the same size"),
        ));
    }
    let mut order: Vec<usize> = (1..=k).collect();
    order.shuffle(rng);
    let members = order
        .chunks(k / m)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect();
    Ok(ClusterAssignment { members })
}

/// `w + N(0, sigma^2 I)`.
pub fn dp_perturb(w: &WeightVector, sigma: f64, rng: &mut Stream) -> Result<WeightVector> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::usage(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let noisy = w
        .as_slice()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    WeightVector::from_computed(noisy, "dp_perturb")
}

/// Everything fixed for the duration of a run.
pub struct Federation<'a> {
    pub cfg: &'a RunConfig,
    pub clients: &'a [ClientDataset],
    pub clusters: ClusterAssignment,
    pub plan: TrainingPlan,
    pub sampler: Box<dyn CoefficientSampler>,
}

impl<'a> Federation<'a> {
    pub fn new(cfg: &'a RunConfig, clients: &'a [ClientDataset]) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.clients {
            return Err(Error::config(
                "clients",
                format!("{} datasets supplied for {} clients", clients.len(), cfg.clients),
            ));
        }
        if let Some(c) = clients.iter().find(|c| c.train.is_empty() || c.test.is_empty()) {
            return Err(Error::usage(format!(
                "client {} needs nonempty train and test splits",
                c.client_id
            )));
        }
        let clusters = assign_clusters(
            cfg.clients,
            cfg.clusters,
            &mut substream(cfg.master_seed, Purpose::ClusterAssignment, 0, 0),
        )?;
        Ok(Self {
            cfg,
            clients,
            clusters,
            plan: TrainingPlan {
                spec: cfg.model,
                opt: cfg.optimizer,
                epochs: cfg.local_epochs,
                batch_size: cfg.batch_size,
            },
            sampler: Box::new(ExponentialSimplex),
        })
    }

    pub fn with_sampler(mut self, sampler: Box<dyn CoefficientSampler>) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let global = init_weights(
            &self.plan.spec,
            &mut substream(self.cfg.master_seed, Purpose::InitWeights, 0, 0),
        )?;
        let dim = global.dim();
        Ok(RunState {
            round: 0,
            global,
            optimizers: (0..self.cfg.clients)
                .map(|_| OptimizerState::new(&self.plan.opt, dim))
                .collect(),
        })
    }

    fn stream(&self, purpose: Purpose, hospital: usize, round: usize) -> Stream {
        substream(self.cfg.master_seed, purpose, hospital as u64, round as u64)
    }
}

/// Mutable state carried between rounds.
#[derive(Debug, Clone)]
pub struct RunState {
    /// Rounds completed so far.
    pub round: usize,
    pub global: WeightVector,
    /// Indexed by hospital - 1.
    pub optimizers: Vec<OptimizerState>,
}

/// What a round produced besides the new global weights.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Post-training weights `w_k`, indexed by hospital - 1.
    pub local_weights: Vec<WeightVector>,
    /// Mean over hospitals of the mean batch loss seen during local training.
    pub avg_train_loss: f64,
}

/// Executes one round and advances `state`.
pub fn run_round(fed: &Federation<'_>, state: &mut RunState, net: &mut Network) -> Result<RoundOutcome> {
    let cfg = fed.cfg;
    let t = state.round;
    if t >= cfg.rounds {
        return Err(Error::usage(format!("round {t} is past the configured {} rounds", cfg.rounds)));
    }
    let k_total = cfg.clients;
    let hospitals = 1..=k_total;

    for k in hospitals.clone() {
        net.send(Message {
            round: t,
            sender: Endpoint::Server,
            receiver: Endpoint::Hospital(k),
            kind: MessageKind::BroadcastWeights,
            payload: state.global.clone(),
        });
    }
    let starts: Vec<WeightVector> = hospitals
        .clone()
        .map(|k| {
            net.receive(Endpoint::Hospital(k), Endpoint::Server, MessageKind::BroadcastWeights, t)
                .map(|m| m.payload)
        })
        .collect::<Result<_>>()?;

    let outcomes = fed
        .clients
        .par_iter()
        .zip(state.optimizers.par_iter_mut())
        .zip(starts.par_iter())
        .map(|((client, opt_state), w_t)| {
            let mut rng = fed.stream(Purpose::LocalShuffle, client.client_id, t);
            local_training(&fed.plan, &client.train, w_t, opt_state, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let avg_train_loss =
        outcomes.iter().map(|o| o.mean_batch_loss).sum::<f64>() / k_total as f64;
    let local_weights: Vec<WeightVector> = outcomes.into_iter().map(|o| o.weights).collect();

    let upload_kind = match cfg.strategy {
        StrategyKind::Fedavg | StrategyKind::Dp => MessageKind::ClientWeights,
        StrategyKind::Smc => MessageKind::MaskedSum,
    };
    match cfg.strategy {
        StrategyKind::Fedavg => {
            for (k, w) in hospitals.clone().zip(&local_weights) {
                net.send(upload(t, k, MessageKind::ClientWeights, w.clone()));
            }
        }
        StrategyKind::Dp => {
            for (k, w) in hospitals.clone().zip(&local_weights) {
                let mut rng = fed.stream(Purpose::DpNoise, k, t);
                let noisy = dp_perturb(w, cfg.dp_sigma, &mut rng)?;
                net.send(upload(t, k, MessageKind::ClientWeights, noisy));
            }
        }
        StrategyKind::Smc => {
            for sum in smc_exchange(fed, t, &local_weights, net)? {
                net.send(upload(t, sum.holder, MessageKind::MaskedSum, sum.payload));
            }
        }
    }

    let mut received = Vec::with_capacity(k_total);
    for k in hospitals {
        received.push(
            net.receive(Endpoint::Server, Endpoint::Hospital(k), upload_kind, t)?
                .payload,
        );
    }
    state.global = match cfg.strategy {
        StrategyKind::Fedavg | StrategyKind::Dp => vec_mean(&received)?,
        StrategyKind::Smc => {
            let sums: Vec<MaskedSum> = received
                .into_iter()
                .enumerate()
                .map(|(i, payload)| MaskedSum {
                    holder: i + 1,
                    cluster: fed.clusters.cluster_of(i + 1).unwrap_or(0),
                    round: t,
                    payload,
                })
                .collect();
            reconstruct_mean(&sums, k_total)?
        }
    };
    state.round += 1;
    Ok(RoundOutcome {
        local_weights,
        avg_train_loss,
    })
}

fn upload(round: usize, k: usize, kind: MessageKind, payload: WeightVector) -> Message {
    Message {
        round,
        sender: Endpoint::Hospital(k),
        receiver: Endpoint::Server,
        kind,
        payload,
    }
}

/// Share exchange inside every cluster; returns each hospital's masked sum in
/// ascending hospital order. Self-shares stay local and are never sent.
fn smc_exchange(
    fed: &Federation<'_>,
    t: usize,
    local_weights: &[WeightVector],
    net: &mut Network,
) -> Result<Vec<MaskedSum>> {
    let mut kept: Vec<Option<Share>> = vec![None; fed.cfg.clients];
    for (c, members) in fed.clusters.members.iter().enumerate() {
        for &k in members {
            let mut rng = fed.stream(Purpose::Coefficients, k, t);
            let coeffs = CoefficientVector::draw(k, c + 1, members, fed.sampler.as_ref(), &mut rng)?;
            for share in make_shares(&local_weights[k - 1], &coeffs, t)? {
                if share.target == k {
                    kept[k - 1] = Some(share);
                } else {
                    net.send(Message {
                        round: t,
                        sender: Endpoint::Hospital(k),
                        receiver: Endpoint::Hospital(share.target),
                        kind: MessageKind::Share,
                        payload: share.payload,
                    });
                }
            }
        }
    }

    let mut sums = Vec::with_capacity(fed.cfg.clients);
    for k in 1..=fed.cfg.clients {
        let c = fed.clusters.cluster_of(k).expect("every hospital is assigned");
        let members = &fed.clusters.members[c - 1];
        let mut held = Vec::with_capacity(members.len());
        for &j in members {
            if j == k {
                held.extend(kept[k - 1].take());
            } else {
                let msg = net.receive(Endpoint::Hospital(k), Endpoint::Hospital(j), MessageKind::Share, t)?;
                held.push(Share {
                    source: j,
                    target: k,
                    round: msg.round,
                    payload: msg.payload,
                });
            }
        }
        sums.push(accumulate_shares(k, c, members, t, &held)?);
    }
    Ok(sums)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep message payloads and true local weights for a disclosure audit.
    pub keep_payloads: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub clusters: ClusterAssignment,
    pub initial_weights: WeightVector,
    pub final_weights: WeightVector,
    /// Final per-client scores plus per-round curves.
    pub report: EvalReport,
    pub log: MessageLog,
    /// Post-training weights per (round, hospital); only with `keep_payloads`.
    pub true_weights: Option<TrueWeights>,
}

/// Generates the configured data and runs every round.
pub fn run_training(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let clients = generate_clients(&cfg.data)?;
    run_training_on(cfg, &clients, opts)
}

/// Runs every round on pre-generated client data.
pub fn run_training_on(cfg: &RunConfig, clients: &[ClientDataset], opts: RunOptions) -> Result<RunOutcome> {
    let fed = Federation::new(cfg, clients)?;
    let mut state = fed.initial_state()?;
    let initial_weights = state.global.clone();
    let mut net = Network::new(opts.keep_payloads);
    let mut curves = Vec::with_capacity(cfg.rounds);
    let mut true_weights = opts.keep_payloads.then(TrueWeights::default);

    for t in 0..cfg.rounds {
        let outcome = run_round(&fed, &mut state, &mut net)?;
        let scores = evaluate_clients(&cfg.model, &state.global, clients)?;
        curves.push(CurvePoint {
            round: t + 1,
            avg_test_acc: scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len() as f64,
            avg_train_loss: outcome.avg_train_loss,
        });
        if let Some(tw) = true_weights.as_mut() {
            for (i, w) in outcome.local_weights.into_iter().enumerate() {
                tw.insert(t, i + 1, w);
            }
        }
    }

    let per_client = evaluate_clients(&cfg.model, &state.global, clients)?;
    Ok(RunOutcome {
        clusters: fed.clusters,
        initial_weights,
        final_weights: state.global,
        report: EvalReport::new(cfg.strategy.as_str(), per_client, curves),
        log: net.into_log(),
        true_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::model::{ModelSpec, OptimizerSpec};
    use crate::params::linf_dist;
    use rand::SeedableRng;

    fn small_cfg(strategy: StrategyKind) -> RunConfig {
        let data = DataConfig {
            sizes: vec![40, 30, 35, 25, 45, 20],
            input_dim: 4,
            ..DataConfig::with_clients(6)
        };
        RunConfig {
            rounds: 3,
            batch_size: 8,
            strategy,
            model: ModelSpec::mlp(4, 3),
            optimizer: OptimizerSpec::adam(0.05),
            data,
            ..RunConfig::default()
        }
    }

    #[test]
    fn six_hospitals_form_two_triples() {
        let a = assign_clusters(6, 2, &mut Stream::seed_from_u64(3)).unwrap();
        assert_eq!(a.cluster_count(), 2);
        assert_eq!(a.cluster_size(), 3);
        let mut all: Vec<usize> = a.members.concat();
        all.sort_unstable();
        assert_eq!(all, (1..=6).collect::<Vec<_>>());
        assert_eq!(a, assign_clusters(6, 2, &mut Stream::seed_from_u64(3)).unwrap());
    }

    #[test]
    fn cluster_edge_cases() {
        let singles = assign_clusters(4, 4, &mut Stream::seed_from_u64(0)).unwrap();
        assert!(singles.members.iter().all(|m| m.len() == 1));
        assert!(matches!(
            assign_clusters(5, 2, &mut Stream::seed_from_u64(0)),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn dp_noise_basics() {
        let w = WeightVector::new(vec![0.5; 16]).unwrap();
        assert_eq!(dp_perturb(&w, 0.0, &mut Stream::seed_from_u64(1)).unwrap(), w);
        let a = dp_perturb(&w, 0.03, &mut Stream::seed_from_u64(1)).unwrap();
        let b = dp_perturb(&w, 0.03, &mut Stream::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, dp_perturb(&w, 0.03, &mut Stream::seed_from_u64(1)).unwrap());
        assert!(matches!(
            dp_perturb(&w, -1.0, &mut Stream::seed_from_u64(1)),
            Err(Error::Usage(_))
        ));
    }

    fn one_round(strategy: StrategyKind) -> (RunState, RoundOutcome, MessageLog) {
        let cfg = small_cfg(strategy);
        let clients = generate_clients(&cfg.data).unwrap();
        let fed = Federation::new(&cfg, &clients).unwrap();
        let mut state = fed.initial_state().unwrap();
        let mut net = Network::new(true);
        let out = run_round(&fed, &mut state, &mut net).unwrap();
        assert_eq!(net.pending(), 0);
        (state, out, net.into_log())
    }

    #[test]
    fn message_counts_per_round() {
        let (_, _, smc) = one_round(StrategyKind::Smc);
        assert_eq!(smc.len(), 24);
        let count = |log: &MessageLog, kind| log.records.iter().filter(|r| r.kind == kind).count();
        assert_eq!(count(&smc, MessageKind::BroadcastWeights), 6);
        assert_eq!(count(&smc, MessageKind::Share), 12);
        assert_eq!(count(&smc, MessageKind::MaskedSum), 6);
        assert_eq!(count(&smc, MessageKind::ClientWeights), 0);
        let (_, _, fedavg) = one_round(StrategyKind::Fedavg);
        assert_eq!(fedavg.len(), 12);
        let (_, _, dp) = one_round(StrategyKind::Dp);
        assert_eq!(dp.len(), 12);
    }

    #[test]
    fn smc_update_equals_fedavg_update() {
        let (smc_state, smc_out, _) = one_round(StrategyKind::Smc);
        let (avg_state, avg_out, _) = one_round(StrategyKind::Fedavg);
        // Identical local-training streams give identical local weights.
        assert_eq!(smc_out.local_weights, avg_out.local_weights);
        let max_w = smc_out.local_weights.iter().map(WeightVector::max_abs).fold(0.0, f64::max);
        let direct = vec_mean(&smc_out.local_weights).unwrap();
        assert_eq!(avg_state.global, direct);
        assert!(linf_dist(&smc_state.global, &direct).unwrap() <= 1e-9 * max_w);
    }

    #[test]
    fn frozen_training_keeps_global_weights() {
        let mut cfg = small_cfg(StrategyKind::Smc);
        cfg.optimizer.lr = 0.0;
        let clients = generate_clients(&cfg.data).unwrap();
        let fed = Federation::new(&cfg, &clients).unwrap();
        let mut state = fed.initial_state().unwrap();
        let before = state.global.clone();
        run_round(&fed, &mut state, &mut Network::new(false)).unwrap();
        assert!(linf_dist(&before, &state.global).unwrap() <= 1e-12);
    }

    #[test]
    fn shares_stay_inside_clusters() {
        let cfg = small_cfg(StrategyKind::Smc);
        let out = run_training(&cfg, RunOptions::default()).unwrap();
        for r in &out.log.records {
            match r.kind {
                MessageKind::Share => {
                    let (s, d) = (r.sender.hospital().unwrap(), r.receiver.hospital().unwrap());
                    assert_ne!(s, d);
                    assert!(out.clusters.same_cluster(s, d));
                }
                MessageKind::BroadcastWeights => assert!(r.sender.is_server()),
                MessageKind::MaskedSum => assert!(r.receiver.is_server()),
                MessageKind::ClientWeights => panic!("smc must not upload raw weights"),
            }
        }
    }

    #[test]
    fn dropped_share_is_a_protocol_error() {
        let cfg = small_cfg(StrategyKind::Smc);
        let clients = generate_clients(&cfg.data).unwrap();
        let fed = Federation::new(&cfg, &clients).unwrap();
        let mut state = fed.initial_state().unwrap();
        let victim = fed.clusters.members[0][0];
        let mut net = Network::new(false).with_drop_rule(Box::new(move |m: &Message| {
            m.kind == MessageKind::Share && m.sender == Endpoint::Hospital(victim)
        }));
        match run_round(&fed, &mut state, &mut net) {
            Err(Error::Protocol(crate::error::ProtocolError::MissingMessage { round, sender, kind })) => {
                assert_eq!((round, kind), (0, MessageKind::Share));
                assert_eq!(sender, format!("h{victim}"));
            }
            other => panic!("expected missing share, got {other:?}"),
        }
    }

    #[test]
    fn dropped_upload_is_a_protocol_error() {
        let cfg = small_cfg(StrategyKind::Fedavg);
        let clients = generate_clients(&cfg.data).unwrap();
        let fed = Federation::new(&cfg, &clients).unwrap();
        let mut state = fed.initial_state().unwrap();
        let mut net = Network::new(false).with_drop_rule(Box::new(|m: &Message| {
            m.kind == MessageKind::ClientWeights && m.sender == Endpoint::Hospital(4)
        }));
        let err = run_round(&fed, &mut state, &mut net).unwrap_err();
        assert!(err.to_string().contains("client_weights message from h4"), "{err}");
    }

    #[test]
    fn null_training_returns_initial_weights() {
        for strategy in [StrategyKind::Fedavg, StrategyKind::Smc] {
            let mut cfg = small_cfg(strategy);
            cfg.rounds = 1;
            cfg.optimizer.lr = 0.0;
            let out = run_training(&cfg, RunOptions::default()).unwrap();
            assert!(linf_dist(&out.initial_weights, &out.final_weights).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_cfg(StrategyKind::Dp);
        let a = run_training(&cfg, RunOptions::default()).unwrap();
        let b = run_training(&cfg, RunOptions::default()).unwrap();
        assert_eq!(a.final_weights, b.final_weights);
        assert_eq!(a.report, b.report);
        assert_eq!(a.log, b.log);
        assert_eq!(a.report.curves.len(), 3);
    }

    #[test]
    fn run_past_last_round_is_rejected() {
        let mut cfg = small_cfg(StrategyKind::Fedavg);
        cfg.rounds = 1;
        let clients = generate_clients(&cfg.data).unwrap();
        let fed = Federation::new(&cfg, &clients).unwrap();
        let mut state = fed.initial_state().unwrap();
        let mut net = Network::new(false);
        run_round(&fed, &mut state, &mut net).unwrap();
        assert!(matches!(run_round(&fed, &mut state, &mut net), Err(Error::Usage(_))));
    }
}
