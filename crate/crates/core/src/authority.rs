//! The certificate authority: registry, one tree per epoch, and the signed
//! updates that keep nodes' forests current.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::forest::{Epoch, EpochConfig, ForestError, Primer, ValidationForest};
use crate::hash_tree::{Digest, LookUpTable, ProofOfInclusion, SmtHasher};
use crate::par::{self, Execution};
use crate::repair::{construct_lvl_cache, LevelCache, RepairError};
use crate::wire::crypto::{PrimerSigner, PrimerVerifier, Signature};
use crate::wire::CaPoiResponse;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CertStatus {
    Active,
    Revoked,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CertificateRecord {
    pub cert_hash: Digest,
    pub expiry: u32,
    pub epoch: Epoch,
    pub status: CertStatus,
}

/// Daily bundle: new roots of changed epochs and a current proof for every
/// leaf that changed, revoked ones included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaUpdate {
    pub primer: Primer,
    pub sig: Signature,
    pub changed_roots: Vec<(Epoch, Digest)>,
    pub update_pois: Vec<(Epoch, ProofOfInclusion)>,
}

impl CaUpdate {
    pub fn is_heartbeat(&self) -> bool {
        self.changed_roots.is_empty() && self.update_pois.is_empty()
    }
}

/// Sent when the window slides: the full leaf list of the new newest tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochChangeUpdate {
    pub primer: Primer,
    pub sig: Signature,
    pub epoch: Epoch,
    pub leaves: Vec<Digest>,
}

impl EpochChangeUpdate {
    pub fn build_tree(&self, hasher: &'static SmtHasher) -> LookUpTable {
        LookUpTable::from_leaves(hasher, self.leaves.iter().copied())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthorityError {
    #[error("certificate {0:?} already known")]
    Duplicate(Digest),
    #[error("unknown certificate {0:?}")]
    Unknown(Digest),
    #[error("certificate is {0:?}")]
    NotActive(CertStatus),
    #[error(transparent)]
    Window(#[from] ForestError),
    #[error("epoch change due before further updates (window at {base}, now in {now})")]
    EpochChangeDue { base: Epoch, now: Epoch },
    #[error("no epoch boundary between window at {base} and now ({now})")]
    NoEpochBoundary { base: Epoch, now: Epoch },
    #[error("unpublished changes pending; build an update first")]
    PendingChanges,
    #[error(transparent)]
    Cache(#[from] RepairError),
}

pub struct CertificateAuthority {
    cfg: EpochConfig,
    hasher: &'static SmtHasher,
    signer: Box<dyn PrimerSigner>,
    registry: HashMap<Digest, CertificateRecord>,
    trees: VecDeque<LookUpTable>,
    revocations: VecDeque<u32>,
    forest: ValidationForest,
    staged: Vec<(Digest, u32)>,
    pending: BTreeMap<Epoch, BTreeSet<Digest>>,
    sentinel: bool,
    exec: Execution,
}

impl std::fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("base_epoch", &self.forest.base_epoch())
            .field("certificates", &self.registry.len())
            .field("primer", self.forest.primer())
            .finish()
    }
}

impl CertificateAuthority {
    /// Authority with an empty forest whose window starts at `now`.
    pub fn new(
        cfg: EpochConfig,
        hasher: &'static SmtHasher,
        signer: Box<dyn PrimerSigner>,
        now: u32,
    ) -> Result<Self, AuthorityError> {
        cfg.validate()?;
        let mut forest = ValidationForest::empty(cfg, hasher, now);
        forest.sign(signer.as_ref());
        Ok(CertificateAuthority {
            cfg,
            hasher,
            signer,
            registry: HashMap::new(),
            trees: (0..cfg.epoch_count).map(|_| LookUpTable::new(hasher)).collect(),
            revocations: vec![0; cfg.epoch_count as usize].into(),
            forest,
            staged: Vec::new(),
            pending: BTreeMap::new(),
            sentinel: false,
            exec: Execution::default(),
        })
    }

    /// Publish `H(∅)` as the root of any epoch that never had a revocation,
    /// so certificates there validate without a proof.
    pub fn with_clean_epoch_sentinel(mut self, on: bool) -> Self {
        self.sentinel = on;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &EpochConfig {
        &self.cfg
    }

    pub fn hasher(&self) -> &'static SmtHasher {
        self.hasher
    }

    pub fn verifier(&self) -> std::sync::Arc<dyn PrimerVerifier> {
        self.signer.verifier()
    }

    pub fn forest(&self) -> &ValidationForest {
        &self.forest
    }

    pub fn base_epoch(&self) -> Epoch {
        self.forest.base_epoch()
    }

    pub fn tree(&self, epoch: Epoch) -> Option<&LookUpTable> {
        self.forest
            .contains_epoch(epoch)
            .then(|| &self.trees[(epoch - self.base_epoch()) as usize])
    }

    pub fn record(&self, cert: &Digest) -> Option<&CertificateRecord> {
        self.registry.get(cert)
    }

    pub fn active_count(&self) -> usize {
        self.trees.iter().map(LookUpTable::len).sum()
    }

    fn idx(&self, epoch: Epoch) -> usize {
        (epoch - self.base_epoch()) as usize
    }

    fn effective_root(&self, i: usize) -> Digest {
        if self.sentinel && self.revocations[i] == 0 {
            self.hasher.empty(crate::hash_tree::DIGEST_BITS)
        } else {
            self.trees[i].root()
        }
    }

    fn next_timestamp(&self, now: u32) -> u32 {
        now.max(self.forest.primer().timestamp + 1)
    }

    /// Registers many active certificates at once and publishes the
    /// resulting forest. Trees are built from scratch, one per epoch.
    pub fn bootstrap<I>(&mut self, certs: I, now: u32) -> Result<(), AuthorityError>
    where
        I: IntoIterator<Item = (Digest, u32)>,
    {
        let base = self.base_epoch();
        let mut per_epoch: Vec<Vec<Digest>> = vec![Vec::new(); self.trees.len()];
        for (cert, expiry) in certs {
            let epoch = self.cfg.epoch_in_window(expiry, base)?;
            if self.registry.contains_key(&cert) {
                return Err(AuthorityError::Duplicate(cert));
            }
            self.registry.insert(
                cert,
                CertificateRecord {
                    cert_hash: cert,
                    expiry,
                    epoch,
                    status: CertStatus::Active,
                },
            );
            per_epoch[(epoch - base) as usize].push(cert);
        }
        let existing: Vec<(LookUpTable, Vec<Digest>)> = self.trees.drain(..).zip(per_epoch).collect();
        let hasher = self.hasher;
        let rebuilt = par::map(self.exec, existing, |(tree, new)| {
            if new.is_empty() {
                tree
            } else {
                LookUpTable::from_leaves(hasher, tree.leaves().copied().chain(new))
            }
        });
        self.trees = rebuilt.into();
        for i in 0..self.trees.len() {
            let r = self.effective_root(i);
            self.forest.set_root(base + i as Epoch, r)?;
        }
        let ts = self.next_timestamp(now);
        self.forest.reprime(ts, self.signer.as_ref());
        self.pending.clear();
        Ok(())
    }

    /// Queues a certificate for the tree opened at the next epoch change.
    pub fn stage_certificate(&mut self, cert: Digest, expiry: u32) -> Result<(), AuthorityError> {
        self.cfg.epoch_in_window(expiry, self.base_epoch() + 1)?;
        if self.registry.contains_key(&cert) || self.staged.iter().any(|(c, _)| *c == cert) {
            return Err(AuthorityError::Duplicate(cert));
        }
        self.staged.push((cert, expiry));
        Ok(())
    }

    /// Issues a certificate straight into its current tree; it goes out with
    /// the next update.
    pub fn issue_now(&mut self, cert: Digest, expiry: u32) -> Result<Epoch, AuthorityError> {
        let epoch = self.cfg.epoch_in_window(expiry, self.base_epoch())?;
        if self.registry.contains_key(&cert) {
            return Err(AuthorityError::Duplicate(cert));
        }
        self.registry.insert(
            cert,
            CertificateRecord {
                cert_hash: cert,
                expiry,
                epoch,
                status: CertStatus::Active,
            },
        );
        let i = self.idx(epoch);
        self.trees[i].add_leaf(cert);
        self.pending.entry(epoch).or_default().insert(cert);
        Ok(epoch)
    }

    pub fn revoke(&mut self, cert: &Digest) -> Result<Epoch, AuthorityError> {
        let rec = self.registry.get_mut(cert).ok_or(AuthorityError::Unknown(*cert))?;
        if rec.status != CertStatus::Active {
            return Err(AuthorityError::NotActive(rec.status));
        }
        rec.status = CertStatus::Revoked;
        let epoch = rec.epoch;
        let i = self.idx(epoch);
        self.trees[i].remove_leaf(cert);
        self.revocations[i] += 1;
        self.pending.entry(epoch).or_default().insert(*cert);
        Ok(epoch)
    }

    /// Publishes everything changed since the last update, or a heartbeat.
    pub fn build_update(&mut self, now: u32) -> Result<CaUpdate, AuthorityError> {
        let now_epoch = self.cfg.epoch_of(now);
        if now_epoch > self.base_epoch() {
            return Err(AuthorityError::EpochChangeDue {
                base: self.base_epoch(),
                now: now_epoch,
            });
        }
        let pending = std::mem::take(&mut self.pending);
        let mut changed_roots = Vec::with_capacity(pending.len());
        let mut jobs = Vec::new();
        for (&epoch, leaves) in &pending {
            let i = self.idx(epoch);
            let root = self.effective_root(i);
            self.forest.set_root(epoch, root)?;
            changed_roots.push((epoch, root));
            jobs.extend(leaves.iter().map(|l| (epoch, *l)));
        }
        let trees = &self.trees;
        let base = self.base_epoch();
        let update_pois = par::map(self.exec, jobs, |(epoch, leaf)| {
            (epoch, trees[(epoch - base) as usize].calc_poi(&leaf))
        });
        let ts = self.next_timestamp(now);
        self.forest.reprime(ts, self.signer.as_ref());
        Ok(CaUpdate {
            primer: self.forest.primer().clone(),
            sig: *self.forest.primer_sig(),
            changed_roots,
            update_pois,
        })
    }

    /// Slides the window by one epoch: the oldest tree expires and the
    /// staged certificates of the new newest epoch form its tree.
    pub fn epoch_change(&mut self, now: u32) -> Result<EpochChangeUpdate, AuthorityError> {
        let base = self.base_epoch();
        let now_epoch = self.cfg.epoch_of(now);
        if now_epoch <= base {
            return Err(AuthorityError::NoEpochBoundary { base, now: now_epoch });
        }
        self.pending.remove(&base);
        if !self.pending.is_empty() {
            return Err(AuthorityError::PendingChanges);
        }
        let expired = self.trees.pop_front().expect("window is never empty");
        self.revocations.pop_front();
        for leaf in expired.leaves() {
            if let Some(rec) = self.registry.get_mut(leaf) {
                rec.status = CertStatus::Expired;
            }
        }
        self.forest.prune();
        let newest = self.forest.newest_epoch();

        let staged = std::mem::take(&mut self.staged);
        let mut leaves = Vec::new();
        for (cert, expiry) in staged {
            let epoch = self.cfg.epoch_of(expiry);
            if epoch < self.base_epoch() {
                continue;
            }
            if epoch != newest {
                // lands in an existing tree: goes out with the next update
                if epoch < newest {
                    self.issue_now(cert, expiry)?;
                } else {
                    self.staged.push((cert, expiry));
                }
                continue;
            }
            self.registry.insert(
                cert,
                CertificateRecord {
                    cert_hash: cert,
                    expiry,
                    epoch,
                    status: CertStatus::Active,
                },
            );
            leaves.push(cert);
        }
        let tree = LookUpTable::from_leaves(self.hasher, leaves.iter().copied());
        let leaves: Vec<Digest> = tree.leaves().copied().collect();
        self.trees.push_back(tree);
        self.revocations.push_back(0);
        let i = self.trees.len() - 1;
        let root = self.effective_root(i);
        self.forest.set_root(newest, root)?;
        // Staged certificates that went into older trees only touch the
        // published roots at the next update, so this primer covers the new
        // tree alone.
        let ts = self.next_timestamp(now);
        self.forest.reprime(ts, self.signer.as_ref());
        Ok(EpochChangeUpdate {
            primer: self.forest.primer().clone(),
            sig: *self.forest.primer_sig(),
            epoch: newest,
            leaves,
        })
    }

    /// Current proof for an active certificate, with the signed primer.
    pub fn answer_poi_request(&self, cert: &Digest) -> Result<CaPoiResponse, AuthorityError> {
        let rec = self.registry.get(cert).ok_or(AuthorityError::Unknown(*cert))?;
        if rec.status != CertStatus::Active {
            return Err(AuthorityError::NotActive(rec.status));
        }
        let poi = self.trees[self.idx(rec.epoch)].calc_poi(cert);
        Ok(CaPoiResponse {
            poi,
            primer: self.forest.primer().clone(),
            sig: *self.forest.primer_sig(),
        })
    }

    pub fn level_cache(&self, epoch: Epoch, clvl: u8) -> Result<LevelCache, AuthorityError> {
        let tree = self.tree(epoch).ok_or(ForestError::OutOfWindow {
            epoch: epoch.into(),
            base: self.base_epoch(),
        })?;
        Ok(construct_lvl_cache(clvl, epoch, tree)?)
    }
}
