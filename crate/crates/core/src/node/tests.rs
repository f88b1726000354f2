use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::authority::CertificateAuthority;
use crate::forest::EpochConfig;
use crate::wire::crypto::StubSigner;
use crate::wire::{Codec, CountingTransport, Message, MessageKind, Transport, WireTransport};

const WEEK: u32 = 604_800;
const T0: u32 = WEEK * 2900;

struct World {
    ca: CertificateAuthority,
    certs: Vec<(Digest, u32)>,
    rng: ChaCha8Rng,
}

fn world(n: usize, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ca = CertificateAuthority::new(
        EpochConfig::default(),
        SmtHasher::sha256(),
        Box::new(StubSigner::from_seed(1)),
        T0,
    )
    .unwrap();
    let certs: Vec<(Digest, u32)> = (0..n)
        .map(|_| (Digest(rng.gen()), T0 + rng.gen_range(0..52 * WEEK)))
        .collect();
    ca.bootstrap(certs.iter().copied(), T0).unwrap();
    World { ca, certs, rng }
}

impl World {
    fn node(&self, i: usize) -> NodeState {
        let (cert, _) = self.certs[i];
        let rec = self.ca.record(&cert).unwrap();
        let poi = self.ca.answer_poi_request(&cert).unwrap().poi;
        let mut n = NodeState::new(NodeConfig::default(), self.ca.verifier(), self.ca.forest().clone());
        n.enroll(cert, rec.epoch, self.ca.forest().clone(), poi);
        assert!(n.own_valid());
        n
    }

    fn cacher(&self, i: usize, clvl: u8) -> NodeState {
        let caches: BTreeMap<Epoch, Arc<VerifiedCache>> = (self.ca.base_epoch()..=self.ca.forest().newest_epoch())
            .map(|e| {
                let lc = self.ca.level_cache(e, clvl).unwrap();
                (e, Arc::new(VerifiedCache::new(self.ca.hasher(), lc)))
            })
            .collect();
        self.node(i).with_caches(caches)
    }

    fn other_epoch_than(&self, i: usize) -> usize {
        let e = self.ca.record(&self.certs[i].0).unwrap().epoch;
        (0..self.certs.len())
            .find(|&j| self.ca.record(&self.certs[j].0).unwrap().epoch != e)
            .unwrap()
    }

    /// Revokes some other certificate in `i`'s epoch and publishes.
    fn revoke_near(&mut self, i: usize, now: u32) -> CaUpdate {
        let e = self.ca.record(&self.certs[i].0).unwrap().epoch;
        let victim = (0..self.certs.len())
            .map(|j| self.certs[j].0)
            .find(|c| {
                *c != self.certs[i].0
                    && self.ca.record(c).is_some_and(|r| r.epoch == e && r.status == crate::authority::CertStatus::Active)
            })
            .unwrap();
        self.ca.revoke(&victim).unwrap();
        self.ca.build_update(now).unwrap()
    }
}

fn codec() -> Codec {
    Codec::new(&EpochConfig::default())
}

fn session(a: &mut NodeState, b: &mut NodeState, ca: &CertificateAuthority) -> SessionReport {
    let mut peer = WireTransport::new(codec());
    let mut link = WireTransport::new(codec());
    run_session(a, b, Links { peer: &mut peer, ca: &mut link }, ca).unwrap()
}

#[test]
fn contact_message_describes_the_node() {
    let w = world(500, 1);
    let n = w.cacher(0, 4);
    let c = n.contact();
    assert_eq!(c.info.rel_epoch, Some((n.epoch() - n.forest().base_epoch()) as u8));
    assert!(c.info.has_lc && c.info.lc_fresh);
    let bytes = codec().encode(&Message::Contact(c));
    assert_eq!(bytes.len(), 115);
}

#[test]
fn update_keeps_every_receiver_valid() {
    let mut w = world(2000, 2);
    let mut nodes: Vec<NodeState> = (0..200).map(|i| w.node(i)).collect();
    let mut memo = UpdateMemo::new();
    let upd = w.revoke_near(0, T0 + 3600);
    for n in &mut nodes {
        let (ok, ev) = n.apply_ca_update(&upd, &mut memo);
        assert!(ok);
        assert!(ev.is_empty() || n.cert().is_none(), "{ev:?}");
        assert_eq!(n.forest(), w.ca.forest());
        if n.cert().is_some() {
            assert!(n.own_valid());
        }
    }
    // a replay is ignored
    assert!(!nodes[0].apply_ca_update(&upd, &mut memo).0);
}

#[test]
fn revoked_node_learns_it_from_the_update() {
    let mut w = world(500, 3);
    let mut n = w.node(5);
    w.ca.revoke(&w.certs[5].0).unwrap();
    let upd = w.ca.build_update(T0 + 10).unwrap();
    let (ok, ev) = n.apply_ca_update(&upd, &mut UpdateMemo::new());
    assert!(ok);
    assert_eq!(ev, vec![NodeEvent::Revoked]);
    assert_eq!(n.cert(), None);
}

#[test]
fn missed_update_is_synced_then_repaired_directly() {
    let mut w = world(2000, 4);
    let x_cert = w.certs[0].0;
    let e = w.ca.record(&x_cert).unwrap().epoch;
    let mut mates: Vec<usize> = (1..w.certs.len())
        .filter(|&j| w.ca.record(&w.certs[j].0).unwrap().epoch == e)
        .collect();
    // the peer's proof fixes ours when it shares at least as long a
    // prefix with us as the revoked leaf does
    mates.sort_by_key(|&j| x_cert.common_prefix_len(&w.certs[j].0));
    let victim = w.certs[mates[0]].0;
    let mut x = w.node(0);
    let mut y = w.node(*mates.last().unwrap());
    w.ca.revoke(&victim).unwrap();
    let upd = w.ca.build_update(T0 + 3600).unwrap();
    assert!(y.apply_ca_update(&upd, &mut UpdateMemo::new()).0);

    let r = session(&mut x, &mut y, &w.ca);
    assert_eq!(r.synced, Some(Side::A));
    assert_eq!(
        r.events,
        vec![
            (Side::A, NodeEvent::EpisodeStarted),
            (Side::A, NodeEvent::Repaired { meets: 1, via: RepairPath::Direct })
        ]
    );
    assert_eq!(x.forest(), w.ca.forest());
    assert!(x.own_valid());
    assert_eq!(r.ca_bytes, 0);
}

#[test]
fn cacher_repairs_any_epoch() {
    let mut w = world(2000, 5);
    let mut x = w.node(0);
    let mut y = w.cacher(w.other_epoch_than(0), 5);
    let upd = w.revoke_near(0, T0 + 3600);
    assert!(y.apply_ca_update(&upd, &mut UpdateMemo::new()).0);
    assert!(y.contact().info.lc_fresh);

    let r = session(&mut x, &mut y, &w.ca);
    assert!(r
        .events
        .contains(&(Side::A, NodeEvent::Repaired { meets: 1, via: RepairPath::LevelCache })));
    assert!(x.own_valid());
}

#[test]
fn stale_cacher_does_not_offer_its_cache() {
    let mut w = world(2000, 6);
    let mut y = w.cacher(w.other_epoch_than(0), 5);
    let upd = w.revoke_near(0, T0 + 3600);
    // the cacher missed the update, then synced its forest from someone
    let mut z = w.node(1);
    let mut memo = UpdateMemo::new();
    assert!(!z.apply_ca_update(&upd, &mut memo).0, "built after the update");
    session(&mut y, &mut z, &w.ca);
    assert_eq!(y.forest(), w.ca.forest());
    assert!(!y.contact().info.lc_fresh);

    // a fresh cacher hands over what is missing
    let mut c = w.cacher(2, 5);
    let r = session(&mut y, &mut c, &w.ca);
    assert!(y.contact().info.lc_fresh);
    assert!(r.bytes > r.contact_bytes);
}

#[test]
fn gives_up_after_threshold_and_asks_the_ca() {
    let mut w = world(2000, 7);
    let mut x = w.node(0);
    x.cfg.give_up_threshold = 3;
    w.revoke_near(0, T0 + 3600);
    let mut peers: Vec<NodeState> = (0..3).map(|_| w.node(w.other_epoch_than(0))).collect();
    let mut events = Vec::new();
    let mut ca_bytes = 0;
    for p in &mut peers {
        let r = session(&mut x, p, &w.ca);
        ca_bytes += r.ca_bytes;
        events.extend(r.events.into_iter().filter(|e| e.0 == Side::A).map(|e| e.1));
    }
    assert_eq!(events, vec![NodeEvent::EpisodeStarted, NodeEvent::GaveUp]);
    assert!(x.own_valid());
    assert!(ca_bytes > 0);
}

#[test]
fn forged_contact_is_ignored() {
    let mut w = world(500, 8);
    let mut x = w.node(0);
    let mut y = w.node(1);
    let upd = w.revoke_near(0, T0 + 3600);
    assert!(y.apply_ca_update(&upd, &mut UpdateMemo::new()).0);
    let mut forged = y.clone();
    forged.vf.sign(&StubSigner::from_seed(99));
    let before = x.clone();
    let r = session(&mut x, &mut forged, &w.ca);
    assert_eq!(r.synced, None);
    assert_eq!(x.forest(), before.forest());
}

#[test]
fn parity_sync_fetches_one_aggregate_slot_and_the_newest_root() {
    let mut w = world(3000, 9);
    let cfg = *w.ca.config();
    let base = w.ca.base_epoch();
    // an epoch well inside the aggregated part of the window
    let old = base + 20;
    let i = (0..w.certs.len())
        .find(|&i| w.ca.record(&w.certs[i].0).unwrap().epoch == old)
        .unwrap();
    let mut x = w.node(w.other_epoch_than(i));
    let mut y = w.node(i);
    w.ca.revoke(&w.certs[i].0).unwrap();
    let newest = w.ca.forest().newest_epoch();
    let fresh: Digest = Digest(w.rng.gen());
    w.ca.issue_now(fresh, cfg.epoch_start(newest) + 10).unwrap();
    let upd = w.ca.build_update(T0 + 3600).unwrap();
    assert_eq!(upd.changed_roots.len(), 2);
    y.apply_ca_update(&upd, &mut UpdateMemo::new());

    let mut peer = WireTransport::logging(codec());
    let mut link = CountingTransport::new(codec());
    let r = run_session(&mut x, &mut y, Links { peer: &mut peer, ca: &mut link }, &w.ca).unwrap();
    assert_eq!(r.synced, Some(Side::A));
    let log = peer.log.unwrap();
    let follow: Vec<(MessageKind, usize)> = log[2..].to_vec();
    assert_eq!(follow, vec![(MessageKind::ParityRequest, 3), (MessageKind::RootResponse, 466)]);
    assert_eq!(x.forest(), w.ca.forest());
}

#[test]
fn epoch_change_reaches_nodes_and_caches() {
    let mut w = world(1000, 10);
    let mut x = w.cacher(0, 4);
    let cfg = *w.ca.config();
    let next = w.ca.forest().newest_epoch() + 1;
    let newcomer: Digest = Digest(w.rng.gen());
    w.ca.stage_certificate(newcomer, cfg.epoch_start(next) + 100).unwrap();
    let upd = w.ca.epoch_change(T0 + WEEK).unwrap();
    let tree = upd.build_tree(w.ca.hasher());
    let (ok, _) = x.apply_epoch_change(&upd, &tree, &mut UpdateMemo::new());
    assert!(ok);
    assert_eq!(x.forest(), w.ca.forest());
    assert!(x.contact().info.lc_fresh);

    let mut n = NodeState::new(NodeConfig::default(), w.ca.verifier(), w.ca.forest().clone());
    let poi = w.ca.answer_poi_request(&newcomer).unwrap().poi;
    n.enroll(newcomer, next, w.ca.forest().clone(), poi);
    assert!(n.own_valid());
    assert_eq!(x.validate_peer_certificate(&newcomer, n.own_poi(), next), Ok(true));
    assert_eq!(
        x.validate_peer_certificate(&newcomer, n.own_poi(), w.ca.base_epoch() - 1),
        Err(NodeError::Expired(w.ca.base_epoch() - 1))
    );
}

#[test]
fn sentinel_epochs_validate_without_a_proof() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ca = CertificateAuthority::new(
        EpochConfig::default(),
        SmtHasher::sha256(),
        Box::new(StubSigner::from_seed(1)),
        T0,
    )
    .unwrap()
    .with_clean_epoch_sentinel(true);
    let certs: Vec<(Digest, u32)> = (0..200).map(|_| (Digest(rng.gen()), T0 + 4 * WEEK)).collect();
    ca.bootstrap(certs.iter().copied(), T0).unwrap();
    let cfg = NodeConfig {
        accept_clean_epoch_sentinel: true,
        ..NodeConfig::default()
    };
    let n = NodeState::new(cfg, ca.verifier(), ca.forest().clone());
    let e = ca.base_epoch() + 4;
    let bare = ProofOfInclusion::bare(certs[0].0);
    assert_eq!(n.validate_peer_certificate(&certs[0].0, &bare, e), Ok(true));
    let strict = NodeState::new(NodeConfig::default(), ca.verifier(), ca.forest().clone());
    assert_eq!(strict.validate_peer_certificate(&certs[0].0, &bare, e), Ok(false));
}

#[test]
fn transports_agree() {
    let mut w = world(2000, 12);
    let x0 = w.node(0);
    let mut y0 = w.cacher(3, 5);
    let upd = w.revoke_near(0, T0 + 3600);
    y0.apply_ca_update(&upd, &mut UpdateMemo::new());

    let (mut x1, mut y1) = (x0.clone(), y0.clone());
    let (mut x2, mut y2) = (x0.clone(), y0.clone());
    let mut p1 = WireTransport::new(codec());
    let mut l1 = WireTransport::new(codec());
    let r1 = run_session(&mut x1, &mut y1, Links { peer: &mut p1, ca: &mut l1 }, &w.ca).unwrap();
    let mut p2 = CountingTransport::new(codec());
    let mut l2 = CountingTransport::new(codec());
    let r2 = run_session(&mut x2, &mut y2, Links { peer: &mut p2, ca: &mut l2 }, &w.ca).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(x1.own_poi(), x2.own_poi());
    assert_eq!(p1.bytes(), p2.bytes());
}

#[test]
fn forest_age_limit_is_optional() {
    let w = world(300, 12);
    let n = w.node(0);
    let ts = n.forest().primer().timestamp;
    assert!(!n.forest_too_old(ts + 365 * 86_400));
    let strict = NodeState {
        cfg: NodeConfig {
            max_forest_age: Some(6 * 3600),
            ..NodeConfig::default()
        },
        ..n
    };
    assert!(!strict.forest_too_old(ts + 6 * 3600));
    assert!(strict.forest_too_old(ts + 6 * 3600 + 1));
    // a clock behind the primer is not an age
    assert!(!strict.forest_too_old(ts - 100));
}
