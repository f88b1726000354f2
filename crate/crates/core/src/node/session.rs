//! One encounter between two nodes: contact exchange, forest sync, proof
//! repair, cache sync, and the CA fallback.

use std::sync::Arc;

use thiserror::Error;

use super::{CaEndpoint, NodeEvent, NodeState, RepairPath, VerifiedCache};
use crate::forest::{diff_parities, compute_primer, Epoch, ForestError};
use crate::hash_tree::LeafState;
use crate::repair::update_poi_with_poi;
use crate::wire::{ContactMessage, DecodeError, Message, MessageKind, RootResponse, Transport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("expected {expected:?}, got {got:?}")]
    Unexpected { expected: MessageKind, got: MessageKind },
}

/// The two links a session may use. CA traffic is counted apart from
/// node-to-node traffic.
pub struct Links<'a> {
    pub peer: &'a mut dyn Transport,
    pub ca: &'a mut dyn Transport,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionReport {
    /// Node-to-node bytes, contacts included.
    pub bytes: u64,
    pub contact_bytes: u64,
    pub ca_bytes: u64,
    pub events: Vec<(Side, NodeEvent)>,
    /// Which side adopted a newer forest.
    pub synced: Option<Side>,
}

macro_rules! expect {
    ($msg:expr, $kind:ident) => {
        match $msg {
            Message::$kind(x) => x,
            other => {
                return Err(SessionError::Unexpected {
                    expected: MessageKind::$kind,
                    got: other.kind(),
                })
            }
        }
    };
    ($msg:expr, $kind:ident, unit) => {
        match $msg {
            Message::$kind => {}
            other => {
                return Err(SessionError::Unexpected {
                    expected: MessageKind::$kind,
                    got: other.kind(),
                })
            }
        }
    };
}

/// Runs a full encounter between `a` and `b`.
pub fn run_session(
    a: &mut NodeState,
    b: &mut NodeState,
    links: Links<'_>,
    ca: &dyn CaEndpoint,
) -> Result<SessionReport, SessionError> {
    let Links { peer, ca: ca_link } = links;
    let peer_start = peer.bytes();
    let ca_start = ca_link.bytes();
    let mut report = SessionReport::default();

    let from_a = expect!(peer.carry(Message::Contact(a.contact()))?, Contact);
    let from_b = expect!(peer.carry(Message::Contact(b.contact()))?, Contact);
    report.contact_bytes = peer.bytes() - peer_start;

    let same = from_a.primer == from_b.primer && from_a.sig == from_b.sig;
    if !same {
        let mut ev = Vec::new();
        if from_b.primer.timestamp > from_a.primer.timestamp {
            if sync_forest(a, b, &from_b, peer, &mut ev)? {
                report.synced = Some(Side::A);
            }
            report.events.extend(ev.into_iter().map(|e| (Side::A, e)));
        } else if from_a.primer.timestamp > from_b.primer.timestamp {
            if sync_forest(b, a, &from_a, peer, &mut ev)? {
                report.synced = Some(Side::B);
            }
            report.events.extend(ev.into_iter().map(|e| (Side::B, e)));
        }
    }

    let mut ev = Vec::new();
    try_repair(a, b, &from_a, &from_b, peer, ca_link, ca, &mut ev)?;
    report.events.extend(ev.drain(..).map(|e| (Side::A, e)));
    try_repair(b, a, &from_b, &from_a, peer, ca_link, ca, &mut ev)?;
    report.events.extend(ev.drain(..).map(|e| (Side::B, e)));

    if a.cacher.is_some() && b.cacher.is_some() && a.vf.primer() == b.vf.primer() {
        sync_caches(a, b, peer)?;
        sync_caches(b, a, peer)?;
    }

    report.bytes = peer.bytes() - peer_start;
    report.ca_bytes = ca_link.bytes() - ca_start;
    Ok(report)
}

/// Brings `stale` up to the forest announced in `contact` by `fresh`.
/// Returns whether the forest moved.
fn sync_forest(
    stale: &mut NodeState,
    fresh: &NodeState,
    contact: &ContactMessage,
    peer: &mut dyn Transport,
    events: &mut Vec<NodeEvent>,
) -> Result<bool, SessionError> {
    let primer = &contact.primer;
    if !stale.verifier.verify(&primer.to_bytes(), &contact.sig) {
        return Ok(false);
    }
    let aligned = stale.vf.aligned_to(primer.timestamp);
    let cfg = *stale.vf.config();
    // nothing changed but the timestamp, or only pruning
    if compute_primer(stale.hasher(), aligned.roots(), primer.timestamp, &cfg) == *primer {
        let moved = stale.vf.apply_root_updates(&[], primer, &contact.sig, stale.verifier.as_ref()).is_ok();
        if moved {
            stale.after_forest_change(events);
        }
        return Ok(moved);
    }
    let mut local = aligned.primer().clone();
    local.parities = aligned.local_parities();
    let all: Vec<usize> = (0..cfg.parity_slots()).collect();
    let mut slots = diff_parities(&local, primer, &cfg);
    if slots.is_empty() {
        slots = all.clone();
    }
    loop {
        let req = peer.carry(Message::ParityRequest(slots.iter().map(|&s| s as u8).collect()))?;
        let req: Vec<usize> = expect!(req, ParityRequest).into_iter().map(usize::from).collect();
        let Some(resp) = answer_parity_request(fresh, contact.primer.timestamp, &req) else {
            return Ok(false);
        };
        let resp = expect!(peer.carry(Message::RootResponse(resp))?, RootResponse);
        let res = stale.vf.apply_slot_roots(&slots, &resp.roots, &resp.primer, &resp.sig, stale.verifier.as_ref());
        match res {
            Ok(()) => {
                stale.after_forest_change(events);
                return Ok(true);
            }
            // a root changed without its parity changing: ask for everything
            Err(ForestError::Inconsistent) if slots != all => slots = all.clone(),
            Err(_) => return Ok(false),
        }
    }
}

fn answer_parity_request(fresh: &NodeState, announced: u32, slots: &[usize]) -> Option<RootResponse> {
    let vf = &fresh.vf;
    if vf.primer().timestamp != announced || slots.iter().any(|&s| s >= vf.config().parity_slots()) {
        return None;
    }
    Some(RootResponse {
        primer: vf.primer().clone(),
        sig: *vf.primer_sig(),
        roots: vf.roots_for_slots(slots),
    })
}

fn abs_epoch(contact: &ContactMessage, node: &NodeState) -> Option<Epoch> {
    let rel = contact.info.rel_epoch?;
    let base = node.vf.config().epoch_of(contact.primer.timestamp);
    Some(base + Epoch::from(rel))
}

/// Lets `x` repair its proof with `y`'s help, counting the attempt, and
/// falls back to the CA after too many fruitless fresh peers.
#[allow(clippy::too_many_arguments)]
fn try_repair(
    x: &mut NodeState,
    y: &NodeState,
    from_x: &ContactMessage,
    from_y: &ContactMessage,
    peer: &mut dyn Transport,
    ca_link: &mut dyn Transport,
    ca: &dyn CaEndpoint,
    events: &mut Vec<NodeEvent>,
) -> Result<(), SessionError> {
    if x.cert.is_none() || !x.in_episode || from_y.primer != *x.vf.primer() {
        return Ok(());
    }
    let mut via = None;
    if from_y.info.has_lc && from_y.info.lc_fresh {
        let req = expect!(peer.carry(Message::LcRepairRequest(x.own_poi.clone()))?, LcRepairRequest);
        let answer = abs_epoch(from_x, y).and_then(|e| y.serve_lc_repair(&req, e));
        if let Some(p) = answer {
            let p = expect!(peer.carry(Message::LcRepairResponse(p))?, LcRepairResponse);
            if x.commit_if_valid(p) {
                via = Some(RepairPath::LevelCache);
            }
        }
    }
    if via.is_none() && abs_epoch(from_y, x) == Some(x.epoch) {
        expect!(peer.carry(Message::PoiRequest)?, PoiRequest, unit);
        if let Some(p) = y.serve_poi() {
            let p = expect!(peer.carry(Message::PoiResponse(p))?, PoiResponse);
            let root = x.vf.root(x.epoch).expect("own epoch in window");
            if p.status(x.hasher(), &root) == Some(LeafState::Present) {
                let mut scratch = x.own_poi.clone();
                if update_poi_with_poi(x.hasher(), &mut scratch, &p, LeafState::Present).is_ok()
                    && x.commit_if_valid(scratch)
                {
                    via = Some(RepairPath::Direct);
                }
            }
        }
    }
    x.failed_repair_meets += 1;
    match via {
        Some(via) => {
            let meets = x.failed_repair_meets;
            x.end_episode(events, NodeEvent::Repaired { meets, via });
        }
        None if x.failed_repair_meets >= x.cfg.give_up_threshold => ca_fallback(x, ca_link, ca, events)?,
        None => {}
    }
    Ok(())
}

fn ca_fallback(
    x: &mut NodeState,
    link: &mut dyn Transport,
    ca: &dyn CaEndpoint,
    events: &mut Vec<NodeEvent>,
) -> Result<(), SessionError> {
    let cert = x.cert.expect("fallback needs a certificate");
    let cert = expect!(link.carry(Message::CaPoiRequest(cert))?, CaPoiRequest);
    let resp = match ca.poi(&cert) {
        Ok(r) => expect!(link.carry(Message::CaPoiResponse(r))?, CaPoiResponse),
        Err(_) => {
            x.drop_cert(events, NodeEvent::Revoked);
            return Ok(());
        }
    };
    if resp.primer != *x.vf.primer() {
        let all: Vec<usize> = (0..x.vf.config().parity_slots()).collect();
        let req = link.carry(Message::ParityRequest(all.iter().map(|&s| s as u8).collect()))?;
        expect!(req, ParityRequest);
        let roots = expect!(link.carry(Message::RootResponse(ca.roots(&all)))?, RootResponse);
        let _ = x
            .vf
            .apply_slot_roots(&all, &roots.roots, &roots.primer, &roots.sig, x.verifier.as_ref());
    }
    x.commit_if_valid(resp.poi);
    x.end_episode(events, NodeEvent::GaveUp);
    x.after_forest_change(events);
    Ok(())
}

/// Copies to `dst` every cache that `src` holds fresh and `dst` does not.
fn sync_caches(dst: &mut NodeState, src: &NodeState, peer: &mut dyn Transport) -> Result<(), SessionError> {
    let (Some(dc), Some(sc)) = (&dst.cacher, &src.cacher) else {
        return Ok(());
    };
    let wanted: Vec<Epoch> = dc
        .stale_epochs(&dst.vf)
        .into_iter()
        .filter(|&e| sc.fresh_for(&src.vf, e) && sc.caches.contains_key(&e))
        .collect();
    if wanted.is_empty() {
        return Ok(());
    }
    let base = dst.vf.base_epoch();
    let req = peer.carry(Message::LcSyncRequest(wanted.iter().map(|e| (e - base) as u8).collect()))?;
    let req = expect!(req, LcSyncRequest);
    let caches = req
        .iter()
        .filter_map(|&rel| sc.caches.get(&(src.vf.base_epoch() + Epoch::from(rel))))
        .map(|c| c.lc.clone())
        .collect();
    let caches = expect!(peer.carry(Message::LcSyncResponse(caches))?, LcSyncResponse);
    let hasher = dst.hasher();
    let dc = dst.cacher.as_mut().expect("checked above");
    for lc in caches {
        let epoch = lc.epoch;
        // in-process peers can share the sender's copy once it matches
        let vc = match sc.caches.get(&epoch) {
            Some(theirs) if theirs.lc == lc => theirs.clone(),
            _ => Arc::new(VerifiedCache::new(hasher, lc)),
        };
        if dst.vf.root(epoch) == Some(vc.root) {
            dc.caches.insert(epoch, vc);
        }
    }
    Ok(())
}
