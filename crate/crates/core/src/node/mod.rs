//! Node-side protocol state: own proof, forest, optional level-caches, and
//! the handling of CA updates. Peer sessions live in [`session`].

mod session;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::authority::{CaUpdate, CertificateAuthority, EpochChangeUpdate, AuthorityError};
use crate::forest::{Epoch, ValidationForest};
use crate::hash_tree::{verify_poi, Digest, LeafState, LookUpTable, ProofOfInclusion, SmtHasher, DIGEST_BITS};
use crate::repair::{construct_lvl_cache, update_lvl_cache_with_poi, update_poi_with_poi, LevelCache};
use crate::wire::crypto::PrimerVerifier;
use crate::wire::{CaPoiResponse, ContactInfo, ContactMessage, RootResponse};

pub use session::{run_session, Links, SessionError, SessionReport, Side};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Plain,
    Cacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeConfig {
    /// Fresh peers met without a repair before asking the CA.
    pub give_up_threshold: u32,
    /// Accept certificates of epochs whose published root is `H(∅)`
    /// without a proof.
    pub accept_clean_epoch_sentinel: bool,
    /// Seconds after which a forest counts as too old to trust, measured
    /// from its primer timestamp by the node's own clock. `None` never
    /// expires a forest.
    pub max_forest_age: Option<u32>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            give_up_threshold: 30,
            accept_clean_epoch_sentinel: false,
            max_forest_age: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepairPath {
    Direct,
    LevelCache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    /// Own proof stopped verifying against a current forest.
    EpisodeStarted,
    /// Fixed by a peer; `meets` counts fresh peers met in the episode,
    /// this one included.
    Repaired { meets: u32, via: RepairPath },
    /// Gave up on peers and fetched the proof from the CA.
    GaveUp,
    /// A later CA update fixed the proof.
    ResolvedByUpdate,
    /// The episode ended because the certificate was replaced or expired.
    Abandoned,
    /// Learned that the own certificate is revoked.
    Revoked,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error("epoch {0} is outside the forest window")]
    Expired(Epoch),
}

/// A level-cache whose root has been computed once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifiedCache {
    pub lc: LevelCache,
    pub root: Digest,
}

impl VerifiedCache {
    pub fn new(hasher: &SmtHasher, lc: LevelCache) -> Self {
        let root = lc.root(hasher);
        VerifiedCache { lc, root }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CacherState {
    pub caches: BTreeMap<Epoch, Arc<VerifiedCache>>,
}

impl CacherState {
    /// Whether the cache for `epoch` matches `vf`. Epochs published with
    /// the clean-epoch sentinel need no cache.
    pub fn fresh_for(&self, vf: &ValidationForest, epoch: Epoch) -> bool {
        let Some(root) = vf.root(epoch) else {
            return false;
        };
        if root == vf.hasher().empty(DIGEST_BITS) {
            return true;
        }
        self.caches.get(&epoch).is_some_and(|c| c.root == root)
    }

    pub fn stale_epochs(&self, vf: &ValidationForest) -> Vec<Epoch> {
        (vf.base_epoch()..=vf.newest_epoch())
            .filter(|&e| !self.fresh_for(vf, e))
            .collect()
    }

    pub fn all_fresh(&self, vf: &ValidationForest) -> bool {
        (vf.base_epoch()..=vf.newest_epoch()).all(|e| self.fresh_for(vf, e))
    }
}

/// Shares identical cache results between nodes that apply the same
/// update to the same cache, so a population of cachers does not hold
/// thousands of equal copies.
#[derive(Debug, Default)]
pub struct UpdateMemo {
    derived: HashMap<(usize, Epoch), Arc<VerifiedCache>>,
    fresh: HashMap<Epoch, Arc<VerifiedCache>>,
    /// Status of each update proof, keyed by the update's timestamp. Every
    /// node that accepts an update holds the same roots afterwards.
    states: Option<(u32, Arc<[Option<LeafState>]>)>,
}

impl UpdateMemo {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What the CA offers a node that gives up on its peers.
pub trait CaEndpoint {
    fn poi(&self, cert: &Digest) -> Result<CaPoiResponse, AuthorityError>;
    fn roots(&self, slots: &[usize]) -> RootResponse;
}

impl CaEndpoint for CertificateAuthority {
    fn poi(&self, cert: &Digest) -> Result<CaPoiResponse, AuthorityError> {
        self.answer_poi_request(cert)
    }

    fn roots(&self, slots: &[usize]) -> RootResponse {
        let vf = self.forest();
        RootResponse {
            primer: vf.primer().clone(),
            sig: *vf.primer_sig(),
            roots: vf.roots_for_slots(slots),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeState {
    cert: Option<Digest>,
    epoch: Epoch,
    own_poi: ProofOfInclusion,
    /// Root that `own_poi` folds to.
    own_root: Digest,
    vf: ValidationForest,
    cacher: Option<CacherState>,
    failed_repair_meets: u32,
    in_episode: bool,
    cfg: NodeConfig,
    verifier: Arc<dyn PrimerVerifier>,
}

impl NodeState {
    /// A node without a certificate holding `vf`.
    pub fn new(cfg: NodeConfig, verifier: Arc<dyn PrimerVerifier>, vf: ValidationForest) -> Self {
        let own_root = vf.hasher().empty(0);
        NodeState {
            cert: None,
            epoch: vf.base_epoch(),
            own_poi: ProofOfInclusion::default(),
            own_root,
            vf,
            cacher: None,
            failed_repair_meets: 0,
            in_episode: false,
            cfg,
            verifier,
        }
    }

    pub fn with_caches(mut self, caches: BTreeMap<Epoch, Arc<VerifiedCache>>) -> Self {
        self.cacher = Some(CacherState { caches });
        self
    }

    pub fn role(&self) -> Role {
        if self.cacher.is_some() {
            Role::Cacher
        } else {
            Role::Plain
        }
    }

    pub fn cert(&self) -> Option<Digest> {
        self.cert
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn own_poi(&self) -> &ProofOfInclusion {
        &self.own_poi
    }

    /// Root the own proof currently folds to.
    pub fn own_root(&self) -> Digest {
        self.own_root
    }

    pub fn forest(&self) -> &ValidationForest {
        &self.vf
    }

    pub fn cacher(&self) -> Option<&CacherState> {
        self.cacher.as_ref()
    }

    pub fn failed_repair_meets(&self) -> u32 {
        self.failed_repair_meets
    }

    pub fn in_episode(&self) -> bool {
        self.in_episode
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    fn hasher(&self) -> &'static SmtHasher {
        self.vf.hasher()
    }

    /// Whether the own proof verifies against the held forest.
    pub fn own_valid(&self) -> bool {
        self.cert.is_some() && self.vf.root(self.epoch) == Some(self.own_root)
    }

    /// Whether the held forest is older than the configured limit at local
    /// time `now`. A node past the limit should refresh before relying on
    /// peer certificates.
    pub fn forest_too_old(&self, now: u32) -> bool {
        self.cfg
            .max_forest_age
            .is_some_and(|max| now.saturating_sub(self.vf.primer().timestamp) > max)
    }

    /// Takes a fresh certificate, its proof, and the issuer's forest.
    pub fn enroll(&mut self, cert: Digest, epoch: Epoch, vf: ValidationForest, poi: ProofOfInclusion) -> Vec<NodeEvent> {
        let mut events = Vec::new();
        if self.in_episode {
            events.push(NodeEvent::Abandoned);
        }
        self.in_episode = false;
        self.failed_repair_meets = 0;
        self.cert = Some(cert);
        self.epoch = epoch;
        self.vf = vf;
        self.set_own_poi(poi);
        self.after_forest_change(&mut events);
        events
    }

    fn set_own_poi(&mut self, poi: ProofOfInclusion) {
        self.own_root = poi.root(self.hasher()).unwrap_or(Digest::ZERO);
        self.own_poi = poi;
    }

    /// Forgets the certificate. An open episode ends as abandoned unless
    /// the reason is a revocation, which is always reported.
    fn drop_cert(&mut self, events: &mut Vec<NodeEvent>, why: NodeEvent) {
        if why == NodeEvent::Revoked {
            events.push(why);
        } else if self.in_episode {
            events.push(NodeEvent::Abandoned);
        }
        self.cert = None;
        self.in_episode = false;
        self.failed_repair_meets = 0;
    }

    /// Commits `poi` if it verifies against the forest.
    fn commit_if_valid(&mut self, poi: ProofOfInclusion) -> bool {
        let Some(cert) = self.cert else {
            return false;
        };
        let Some(root) = self.vf.root(self.epoch) else {
            return false;
        };
        if verify_poi(self.hasher(), &cert, &poi, &root) {
            self.own_poi = poi;
            self.own_root = root;
            true
        } else {
            false
        }
    }

    fn end_episode(&mut self, events: &mut Vec<NodeEvent>, ev: NodeEvent) {
        if self.in_episode {
            events.push(ev);
        }
        self.in_episode = false;
        self.failed_repair_meets = 0;
    }

    /// Called after the forest moved: expire the certificate if its epoch
    /// left the window, and open an episode if the proof stopped verifying.
    fn after_forest_change(&mut self, events: &mut Vec<NodeEvent>) {
        if self.cert.is_some() && !self.vf.contains_epoch(self.epoch) {
            self.drop_cert(events, NodeEvent::Abandoned);
            return;
        }
        if self.cert.is_some() && !self.own_valid() && !self.in_episode {
            self.in_episode = true;
            self.failed_repair_meets = 0;
            events.push(NodeEvent::EpisodeStarted);
        }
    }

    pub fn contact(&self) -> ContactMessage {
        let rel_epoch = match self.cert {
            Some(_) if self.vf.contains_epoch(self.epoch) => Some((self.epoch - self.vf.base_epoch()) as u8),
            _ => None,
        };
        let (has_lc, lc_fresh) = match &self.cacher {
            Some(c) => (true, c.all_fresh(&self.vf)),
            None => (false, false),
        };
        ContactMessage {
            primer: self.vf.primer().clone(),
            sig: *self.vf.primer_sig(),
            info: ContactInfo {
                rel_epoch,
                has_lc,
                lc_fresh,
            },
        }
    }

    /// Applies a daily CA update. Returns false, leaving everything as it
    /// was, when the update does not fit the held forest (a missed earlier
    /// update, a forgery, or a replay).
    pub fn apply_ca_update(&mut self, upd: &CaUpdate, memo: &mut UpdateMemo) -> (bool, Vec<NodeEvent>) {
        let mut events = Vec::new();
        if upd.primer == *self.vf.primer() {
            return (false, events);
        }
        if self
            .vf
            .apply_root_updates(&upd.changed_roots, &upd.primer, &upd.sig, self.verifier.as_ref())
            .is_err()
        {
            return (false, events);
        }
        let hasher = self.hasher();
        let states = match &memo.states {
            Some((ts, st)) if *ts == upd.primer.timestamp => st.clone(),
            _ => {
                let st: Arc<[Option<LeafState>]> = upd
                    .update_pois
                    .iter()
                    .map(|(epoch, poi)| self.vf.root(*epoch).and_then(|r| poi.status(hasher, &r)))
                    .collect();
                memo.states = Some((upd.primer.timestamp, st.clone()));
                st
            }
        };

        if let Some(cert) = self.cert {
            let mut scratch = self.own_poi.clone();
            let mut touched = false;
            for ((epoch, poi), st) in upd.update_pois.iter().zip(states.iter()) {
                let Some(st) = *st else { continue };
                if *epoch != self.epoch {
                    continue;
                }
                if poi.leaf_hash == cert {
                    match st {
                        LeafState::Absent => {
                            self.drop_cert(&mut events, NodeEvent::Revoked);
                            touched = false;
                            break;
                        }
                        LeafState::Present => {
                            scratch = poi.clone();
                            touched = true;
                        }
                    }
                    continue;
                }
                if update_poi_with_poi(hasher, &mut scratch, poi, st).is_ok() {
                    touched = true;
                }
            }
            if touched && self.cert.is_some() && self.commit_if_valid(scratch) {
                self.end_episode(&mut events, NodeEvent::ResolvedByUpdate);
            }
        }

        if let Some(cacher) = &mut self.cacher {
            let mut by_epoch: BTreeMap<Epoch, Vec<(&ProofOfInclusion, LeafState)>> = BTreeMap::new();
            for ((epoch, poi), st) in upd.update_pois.iter().zip(states.iter()) {
                if let Some(st) = st {
                    by_epoch.entry(*epoch).or_default().push((poi, *st));
                }
            }
            for (epoch, pois) in by_epoch {
                let Some(old) = cacher.caches.get(&epoch) else { continue };
                let key = (Arc::as_ptr(old) as usize, epoch);
                let next = memo
                    .derived
                    .entry(key)
                    .or_insert_with(|| {
                        let mut lc = old.lc.clone();
                        for (poi, st) in pois {
                            let _ = update_lvl_cache_with_poi(hasher, &mut lc, poi, st);
                        }
                        Arc::new(VerifiedCache::new(hasher, lc))
                    })
                    .clone();
                cacher.caches.insert(epoch, next);
            }
        }
        self.after_forest_change(&mut events);
        (true, events)
    }

    /// Applies an epoch change, given the tree built from its leaf list.
    pub fn apply_epoch_change(
        &mut self,
        upd: &EpochChangeUpdate,
        tree: &LookUpTable,
        memo: &mut UpdateMemo,
    ) -> (bool, Vec<NodeEvent>) {
        let mut events = Vec::new();
        // a CA running the clean-epoch sentinel publishes H(∅) instead
        let candidates = [tree.root(), self.hasher().empty(DIGEST_BITS)];
        let applied = candidates.into_iter().any(|r| {
            self.vf
                .apply_root_updates(&[(upd.epoch, r)], &upd.primer, &upd.sig, self.verifier.as_ref())
                .is_ok()
        });
        if !applied {
            return (false, events);
        }
        if let Some(cert) = self.cert {
            if self.epoch == upd.epoch && tree.contains(&cert) {
                let poi = tree.calc_poi(&cert);
                self.commit_if_valid(poi);
            }
        }
        if let Some(cacher) = &mut self.cacher {
            let base = self.vf.base_epoch();
            cacher.caches.retain(|e, _| *e >= base);
            if let Some(clvl) = cacher.caches.values().next().map(|c| c.lc.clvl) {
                let hasher = self.vf.hasher();
                let fresh = memo
                    .fresh
                    .entry(upd.epoch)
                    .or_insert_with(|| {
                        let lc = construct_lvl_cache(clvl, upd.epoch, tree).expect("valid level");
                        Arc::new(VerifiedCache::new(hasher, lc))
                    })
                    .clone();
                cacher.caches.insert(upd.epoch, fresh);
            }
        }
        self.after_forest_change(&mut events);
        (true, events)
    }

    /// Checks a certificate presented by a peer against the held forest.
    pub fn validate_peer_certificate(
        &self,
        peer_cert: &Digest,
        peer_poi: &ProofOfInclusion,
        peer_epoch: Epoch,
    ) -> Result<bool, NodeError> {
        let root = self.vf.root(peer_epoch).ok_or(NodeError::Expired(peer_epoch))?;
        if self.cfg.accept_clean_epoch_sentinel && root == self.hasher().empty(DIGEST_BITS) {
            return Ok(true);
        }
        Ok(verify_poi(self.hasher(), peer_cert, peer_poi, &root))
    }

    /// Repairs `poi` from the held cache for `epoch`, if that cache is
    /// current. This is the cacher's side of a cache repair.
    pub fn serve_lc_repair(&self, poi: &ProofOfInclusion, epoch: Epoch) -> Option<ProofOfInclusion> {
        let cacher = self.cacher.as_ref()?;
        let root = self.vf.root(epoch)?;
        let cache = cacher.caches.get(&epoch)?;
        if cache.root != root {
            return None;
        }
        let mut out = poi.clone();
        crate::repair::update_poi_with_lvl_cache(self.hasher(), &mut out, &cache.lc);
        Some(out)
    }

    /// Own proof, offered to a peer only while it verifies.
    pub fn serve_poi(&self) -> Option<ProofOfInclusion> {
        self.own_valid().then(|| self.own_poi.clone())
    }
}

#[cfg(test)]
mod tests;
