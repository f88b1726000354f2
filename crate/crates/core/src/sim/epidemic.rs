use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DayStats, SimError, SimMetrics, SimParams};
use crate::authority::{CertStatus, CertificateAuthority};
use crate::forest::{Epoch, EpochConfig};
use crate::hash_tree::{Digest, SmtHasher};
use crate::node::{run_session, Links, NodeConfig, NodeEvent, NodeState, RepairPath, UpdateMemo, VerifiedCache};
use crate::wire::crypto::StubSigner;
use crate::wire::{Codec, CountingTransport, Message};

const HOUR: u32 = 3_600;
const DAY: u32 = 24 * HOUR;
/// Any epoch-aligned start works; this one keeps timestamps in 2025.
const START_EPOCH: u32 = 2_900;

struct Sim<'p> {
    p: &'p SimParams,
    cfg: EpochConfig,
    ca: CertificateAuthority,
    nodes: Vec<NodeState>,
    node_cfg: NodeConfig,
    /// The CA's level caches, handed to cachers that join.
    ca_caches: BTreeMap<Epoch, Arc<VerifiedCache>>,
    rng: ChaCha8Rng,
    codec: Codec,
    peer: CountingTransport,
    link: CountingTransport,
    awaiting_reissue: Vec<usize>,
    m: SimMetrics,
    day: DayStats,
    meets_sum: u64,
    node_days: u64,
    updates: u64,
    update_bytes: u64,
    epoch_changes: u64,
    epoch_change_bytes: u64,
    peer_bytes: u64,
}

fn err(e: impl std::fmt::Display) -> SimError {
    SimError::Invalid(e.to_string())
}

/// Runs the simulation described by `p`. The result depends on `p` alone.
pub fn run_epidemic_sim(p: &SimParams) -> Result<SimMetrics, SimError> {
    p.validate()?;
    let mut sim = Sim::new(p)?;
    for day in 0..p.weeks * 7 {
        sim.run_day(day)?;
    }
    Ok(sim.finish())
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (l, r) = v.split_at_mut(j);
        (&mut l[i], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(i);
        (&mut r[0], &mut l[j])
    }
}

/// `floor(x)` plus one more with probability `frac(x)`.
fn stochastic_round(rng: &mut ChaCha8Rng, x: f64) -> usize {
    let whole = x.floor();
    whole as usize + usize::from(rng.gen::<f64>() < x - whole)
}

impl<'p> Sim<'p> {
    fn new(p: &'p SimParams) -> Result<Self, SimError> {
        let cfg = EpochConfig::default();
        let week = cfg.epoch_duration;
        let t0 = week * START_EPOCH;
        let hasher = SmtHasher::sha256();
        let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
        let mut ca = CertificateAuthority::new(cfg, hasher, Box::new(StubSigner::from_seed(p.rng_seed)), t0)
            .map_err(err)?
            .with_execution(p.execution);
        let lifetime = u32::from(cfg.epoch_count) * week;
        let certs: Vec<(Digest, u32)> = (0..p.node_count)
            .map(|_| (Digest(rng.gen()), t0 + rng.gen_range(0..lifetime)))
            .collect();
        ca.bootstrap(certs.iter().copied(), t0).map_err(err)?;

        let ca_caches = (ca.base_epoch()..=ca.forest().newest_epoch())
            .map(|e| {
                let lc = ca.level_cache(e, p.clvl).map_err(err)?;
                Ok((e, Arc::new(VerifiedCache::new(hasher, lc))))
            })
            .collect::<Result<BTreeMap<_, _>, SimError>>()?;

        let node_cfg = NodeConfig {
            give_up_threshold: p.give_up_threshold,
            ..NodeConfig::default()
        };
        let cachers = (p.node_count as f64 * p.cacher_share).round() as usize;
        let mut is_cacher = vec![false; p.node_count];
        for i in rand::seq::index::sample(&mut rng, p.node_count, cachers) {
            is_cacher[i] = true;
        }
        let verifier = ca.verifier();
        let nodes = certs
            .iter()
            .zip(is_cacher)
            .map(|(&(cert, _), cacher)| {
                let epoch = ca.record(&cert).expect("bootstrapped").epoch;
                let poi = ca.answer_poi_request(&cert).map_err(err)?.poi;
                let mut n = NodeState::new(node_cfg, verifier.clone(), ca.forest().clone());
                n.enroll(cert, epoch, ca.forest().clone(), poi);
                Ok(if cacher { n.with_caches(ca_caches.clone()) } else { n })
            })
            .collect::<Result<Vec<_>, SimError>>()?;

        Ok(Sim {
            p,
            cfg,
            ca,
            nodes,
            node_cfg,
            ca_caches,
            rng,
            codec: Codec::new(&cfg),
            peer: CountingTransport::new(Codec::new(&cfg)),
            link: CountingTransport::new(Codec::new(&cfg)),
            awaiting_reissue: Vec::new(),
            m: SimMetrics::default(),
            day: DayStats::default(),
            meets_sum: 0,
            node_days: 0,
            updates: 0,
            update_bytes: 0,
            epoch_changes: 0,
            epoch_change_bytes: 0,
            peer_bytes: 0,
        })
    }

    fn t0(&self) -> u32 {
        self.cfg.epoch_duration * START_EPOCH
    }

    fn tally(&mut self, events: impl IntoIterator<Item = NodeEvent>) {
        for ev in events {
            match ev {
                NodeEvent::EpisodeStarted => self.day.episodes_started += 1,
                NodeEvent::Repaired { meets, via } => {
                    self.day.repaired += 1;
                    self.meets_sum += u64::from(meets);
                    match via {
                        RepairPath::Direct => self.m.repaired_direct += 1,
                        RepairPath::LevelCache => self.m.repaired_lc += 1,
                    }
                }
                NodeEvent::GaveUp => self.day.gave_up += 1,
                NodeEvent::ResolvedByUpdate => self.day.resolved_by_update += 1,
                NodeEvent::Abandoned => self.m.abandoned += 1,
                NodeEvent::Revoked => {}
            }
        }
    }

    fn outdated(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        n.cert().is_some() && self.ca.forest().root(n.epoch()) != Some(n.own_root())
    }

    fn stale_forest_share(&self) -> f64 {
        let ca = self.ca.forest().primer();
        let stale = self.nodes.iter().filter(|n| n.forest().primer() != ca).count();
        stale as f64 / self.nodes.len() as f64
    }

    fn run_day(&mut self, day: u32) -> Result<(), SimError> {
        self.day = DayStats {
            day,
            nodes: self.nodes.len(),
            ..DayStats::default()
        };
        let n = self.nodes.len();
        let mut order: Vec<usize> = (0..n).collect();
        for _hour in 0..24 {
            for _ in 0..self.p.encounters_per_node_per_hour {
                order.shuffle(&mut self.rng);
                for &i in &order {
                    let mut j = self.rng.gen_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    self.encounter(i, j);
                }
            }
            let s = self.stale_forest_share();
            self.m.hourly_stale_forest_share.push(s);
        }
        self.day.stale_forest_share = self.stale_forest_share();
        let holders = self.nodes.iter().filter(|x| x.cert().is_some()).count();
        let outdated = (0..n).filter(|&i| self.outdated(i)).count();
        self.day.outdated_poi_share = outdated as f64 / holders.max(1) as f64;

        let day_start = self.t0() + day * DAY;
        self.daily_update(day_start + DAY - 1)?;
        if (day + 1).is_multiple_of(7) {
            self.epoch_change(day_start + DAY)?;
        }
        self.day.stale_after_update = self.stale_forest_share();
        self.node_days += self.day.nodes as u64;
        let d = std::mem::take(&mut self.day);
        self.m.days.push(d);
        Ok(())
    }

    fn encounter(&mut self, i: usize, j: usize) {
        self.day.encounters += 1;
        if self.outdated(i) && self.outdated(j) {
            self.day.both_outdated_encounters += 1;
        }
        let (a, b) = pair_mut(&mut self.nodes, i, j);
        let links = Links {
            peer: &mut self.peer,
            ca: &mut self.link,
        };
        let r = run_session(a, b, links, &self.ca).expect("counting transport passes messages unchanged");
        self.day.peer_bytes += r.bytes;
        self.peer_bytes += r.bytes;
        if r.ca_bytes > 0 {
            self.day.ca_fallback_bytes += r.ca_bytes;
            self.m.ca_fallback_requests += 1;
        }
        self.tally(r.events.into_iter().map(|(_, e)| e));
    }

    fn fresh_cert(&mut self, epoch: Epoch) -> (Digest, u32) {
        let expiry = self.cfg.epoch_start(epoch) + self.rng.gen_range(0..self.cfg.epoch_duration);
        (Digest(self.rng.gen()), expiry)
    }

    fn daily_update(&mut self, now: u32) -> Result<(), SimError> {
        let newest = self.ca.forest().newest_epoch();
        let mut reissued = Vec::new();
        for i in std::mem::take(&mut self.awaiting_reissue) {
            let (cert, expiry) = self.fresh_cert(newest);
            self.ca.issue_now(cert, expiry).map_err(err)?;
            reissued.push((i, cert));
        }

        let n = self.nodes.len();
        let want = stochastic_round(&mut self.rng, self.p.daily_revocation_rate * self.ca.active_count() as f64);
        let mut attempts = 0;
        while self.awaiting_reissue.len() < want && attempts < 100 * n {
            attempts += 1;
            let i = self.rng.gen_range(0..n);
            let Some(cert) = self.nodes[i].cert() else { continue };
            let active = self.ca.record(&cert).is_some_and(|r| r.status == CertStatus::Active);
            if !active || reissued.iter().any(|&(k, _)| k == i) {
                continue;
            }
            self.ca.revoke(&cert).map_err(err)?;
            self.awaiting_reissue.push(i);
        }

        let upd = self.ca.build_update(now).map_err(err)?;
        let msg = Message::CaUpdate(upd);
        let bytes = self.codec.encoded_len(&msg) as u64;
        let Message::CaUpdate(upd) = msg else { unreachable!() };
        self.day.ca_update_bytes += bytes;
        self.update_bytes += bytes;
        self.updates += 1;

        let mut memo = UpdateMemo::new();
        for i in 0..n {
            if self.rng.gen::<f64>() < self.p.missing_share {
                continue;
            }
            let (_, ev) = self.nodes[i].apply_ca_update(&upd, &mut memo);
            self.tally(ev);
        }
        for (i, cert) in reissued {
            let poi = self.ca.answer_poi_request(&cert).map_err(err)?.poi;
            let vf = self.ca.forest().clone();
            let ev = self.nodes[i].enroll(cert, newest, vf, poi);
            self.tally(ev);
        }
        for (epoch, _) in &upd.changed_roots {
            let lc = self.ca.level_cache(*epoch, self.p.clvl).map_err(err)?;
            self.ca_caches
                .insert(*epoch, Arc::new(VerifiedCache::new(self.ca.hasher(), lc)));
        }
        Ok(())
    }

    fn epoch_change(&mut self, now: u32) -> Result<(), SimError> {
        let base = self.ca.base_epoch();
        let next = self.ca.forest().newest_epoch() + 1;
        let mut enrolling = Vec::new();
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            let Some(cert) = node.cert() else { continue };
            let renew = node.epoch() == base
                && self.ca.record(&cert).is_some_and(|r| r.status == CertStatus::Active);
            if renew {
                enrolling.push(i);
            }
        }
        let joining = stochastic_round(&mut self.rng, self.p.weekly_issue_rate * self.ca.active_count() as f64);
        enrolling.extend(self.nodes.len()..self.nodes.len() + joining);
        let mut certs = Vec::with_capacity(enrolling.len());
        for _ in &enrolling {
            let (cert, expiry) = self.fresh_cert(next);
            self.ca.stage_certificate(cert, expiry).map_err(err)?;
            certs.push(cert);
        }

        let upd = self.ca.epoch_change(now).map_err(err)?;
        let msg = Message::EpochChange(upd);
        let bytes = self.codec.encoded_len(&msg) as u64;
        let Message::EpochChange(upd) = msg else { unreachable!() };
        self.day.epoch_change_bytes += bytes;
        self.epoch_change_bytes += bytes;
        self.epoch_changes += 1;

        self.ca_caches.retain(|e, _| *e > base);
        let lc = self.ca.level_cache(upd.epoch, self.p.clvl).map_err(err)?;
        self.ca_caches
            .insert(upd.epoch, Arc::new(VerifiedCache::new(self.ca.hasher(), lc)));

        let tree = self.ca.tree(upd.epoch).expect("just built");
        let mut memo = UpdateMemo::new();
        let mut events = Vec::new();
        for node in &mut self.nodes {
            if self.rng.gen::<f64>() < self.p.missing_share {
                continue;
            }
            events.extend(node.apply_epoch_change(&upd, tree, &mut memo).1);
        }
        let verifier = self.ca.verifier();
        for (i, cert) in enrolling.into_iter().zip(certs) {
            let poi = tree.calc_poi(&cert);
            if i == self.nodes.len() {
                let cacher = self.rng.gen::<f64>() < self.p.cacher_share;
                let mut n = NodeState::new(self.node_cfg, verifier.clone(), self.ca.forest().clone());
                if cacher {
                    n = n.with_caches(self.ca_caches.clone());
                }
                self.nodes.push(n);
            }
            events.extend(self.nodes[i].enroll(cert, upd.epoch, self.ca.forest().clone(), poi));
        }
        self.tally(events);
        Ok(())
    }

    fn finish(mut self) -> SimMetrics {
        let m = &mut self.m;
        for d in &m.days {
            m.encounters += d.encounters;
            m.episodes_started += d.episodes_started;
            m.repaired += d.repaired;
            m.gave_up += d.gave_up;
            m.resolved_by_update += d.resolved_by_update;
            m.ca_fallback_bytes += d.ca_fallback_bytes;
        }
        let both: u64 = m.days.iter().map(|d| d.both_outdated_encounters).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        m.failed_repair_share = ratio(m.gave_up, m.repaired + m.gave_up);
        m.avg_meets_until_repair = ratio(self.meets_sum, m.repaired);
        m.both_outdated_encounter_share = ratio(both, m.encounters);
        let avg_nodes = self.node_days as f64 / m.days.len() as f64;
        m.node_weekly_exchange_bytes = self.peer_bytes as f64 / avg_nodes / f64::from(self.p.weeks);
        m.ca_daily_update_bytes = ratio(self.update_bytes, self.updates);
        m.epoch_change_bytes = ratio(self.epoch_change_bytes, self.epoch_changes);
        m.final_nodes = self.nodes.len();
        self.m
    }
}
