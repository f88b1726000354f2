//! The validation forest: one tree root per epoch over a sliding window,
//! summarised by a signed primer.

use std::ops::Range;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash_tree::{Digest, SmtHasher};
use crate::wire::crypto::{PrimerSigner, PrimerVerifier, Signature};

/// Absolute epoch index: `floor(timestamp / epoch_duration)`.
pub type Epoch = u16;

/// Upper bound on the parity vector length.
pub const MAX_PARITY_BYTES: usize = 64;

pub type Parities = ArrayVec<u8, MAX_PARITY_BYTES>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForestError {
    #[error("primer timestamp {offered} is older than current {current}")]
    Replay { current: u32, offered: u32 },
    #[error("primer signature does not verify")]
    Authentication,
    #[error("roots do not reproduce the offered primer")]
    Inconsistent,
    #[error("epoch {epoch} outside window starting at {base}")]
    OutOfWindow { epoch: u32, base: Epoch },
    #[error("invalid epoch configuration: {0}")]
    Config(&'static str),
    #[error("expected {expected} roots, got {got}")]
    RootCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochConfig {
    pub epoch_count: u16,
    /// Seconds per epoch.
    pub epoch_duration: u32,
    pub main_checksums: u16,
    pub roots_per_aggregate: u16,
    pub checksum_bytes: u16,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            epoch_count: 52,
            epoch_duration: 7 * 24 * 3600,
            main_checksums: 2,
            roots_per_aggregate: 10,
            checksum_bytes: 2,
        }
    }
}

impl EpochConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        // the contact message has six bits for the relative epoch, and 63
        // is reserved
        if self.epoch_count == 0 || self.epoch_count > 63 {
            return Err(ForestError::Config("epoch_count must be in 1..=63"));
        }
        if self.main_checksums > self.epoch_count {
            return Err(ForestError::Config("more main checksums than epochs"));
        }
        if self.roots_per_aggregate == 0 && self.main_checksums < self.epoch_count {
            return Err(ForestError::Config("roots_per_aggregate must be positive"));
        }
        if self.checksum_bytes == 0 || self.checksum_bytes > 32 {
            return Err(ForestError::Config("checksum_bytes must be in 1..=32"));
        }
        if self.parity_len() > MAX_PARITY_BYTES {
            return Err(ForestError::Config("parity vector longer than 64 bytes"));
        }
        if u64::from(u32::MAX) / u64::from(self.epoch_duration.max(1)) > u64::from(Epoch::MAX) {
            return Err(ForestError::Config("epoch_duration too short for 16-bit epoch indices"));
        }
        Ok(())
    }

    pub fn parity_slots(&self) -> usize {
        let rest = (self.epoch_count - self.main_checksums) as usize;
        let agg = self.roots_per_aggregate.max(1) as usize;
        self.main_checksums as usize + rest.div_ceil(agg)
    }

    pub fn parity_len(&self) -> usize {
        self.parity_slots() * self.checksum_bytes as usize
    }

    /// Encoded primer length: root, parities, timestamp.
    pub fn primer_len(&self) -> usize {
        32 + self.parity_len() + 4
    }

    /// Ages (0 = newest epoch) covered by a parity slot.
    pub fn slot_ages(&self, slot: usize) -> Range<usize> {
        let main = self.main_checksums as usize;
        if slot < main {
            return slot..slot + 1;
        }
        let agg = self.roots_per_aggregate as usize;
        let start = main + (slot - main) * agg;
        start..(start + agg).min(self.epoch_count as usize)
    }

    pub fn slot_of_age(&self, age: usize) -> usize {
        let main = self.main_checksums as usize;
        if age < main {
            age
        } else {
            main + (age - main) / self.roots_per_aggregate as usize
        }
    }

    pub fn epoch_of(&self, timestamp: u32) -> Epoch {
        (timestamp / self.epoch_duration) as Epoch
    }

    pub fn epoch_start(&self, epoch: Epoch) -> u32 {
        u32::from(epoch) * self.epoch_duration
    }

    /// Epoch of a certificate expiring at `expiry`, which must fall inside
    /// the window whose oldest epoch is `base`.
    pub fn epoch_in_window(&self, expiry: u32, base: Epoch) -> Result<Epoch, ForestError> {
        let epoch = expiry / self.epoch_duration;
        let lo = u32::from(base);
        if epoch < lo || epoch >= lo + u32::from(self.epoch_count) {
            return Err(ForestError::OutOfWindow { epoch, base });
        }
        Ok(epoch as Epoch)
    }

    /// Epochs covered by `slot` in the window starting at `base`, newest
    /// first.
    pub fn slot_epochs(&self, base: Epoch, slot: usize) -> impl Iterator<Item = Epoch> {
        let newest = base + self.epoch_count - 1;
        self.slot_ages(slot).map(move |age| newest - age as Epoch)
    }
}

/// Freshness token: forest root, parity checksums and issue time.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Primer {
    pub root: Digest,
    pub parities: Parities,
    pub timestamp: u32,
}

impl Primer {
    pub fn encoded_len(&self) -> usize {
        32 + self.parities.len() + 4
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.root.0);
        out.extend_from_slice(&self.parities);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
    }

    /// The exact bytes covered by the CA signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }
}

/// Parity checksums of `roots` (oldest first), slot 0 covering the newest.
pub fn compute_parities(hasher: &SmtHasher, roots: &[Digest], cfg: &EpochConfig) -> Parities {
    let mut out = Parities::new();
    let newest = roots.len() - 1;
    let mut buf = Vec::with_capacity(32 * cfg.roots_per_aggregate.max(1) as usize);
    for slot in 0..cfg.parity_slots() {
        buf.clear();
        for age in cfg.slot_ages(slot) {
            buf.extend_from_slice(&roots[newest - age].0);
        }
        let h = hasher.hash(&buf);
        out.extend(h.0[..cfg.checksum_bytes as usize].iter().copied());
    }
    out
}

pub fn compute_primer(hasher: &SmtHasher, roots: &[Digest], timestamp: u32, cfg: &EpochConfig) -> Primer {
    let mut cat = Vec::with_capacity(32 * roots.len());
    for r in roots {
        cat.extend_from_slice(&r.0);
    }
    Primer {
        root: hasher.hash(&cat),
        parities: compute_parities(hasher, roots, cfg),
        timestamp,
    }
}

/// Slots whose checksums differ. Empty while the roots differ means a
/// checksum collision; the caller then has to fetch every root.
pub fn diff_parities(local: &Primer, remote: &Primer, cfg: &EpochConfig) -> Vec<usize> {
    let w = cfg.checksum_bytes as usize;
    local
        .parities
        .chunks(w)
        .zip(remote.parities.chunks(w))
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationForest {
    cfg: EpochConfig,
    hasher: &'static SmtHasher,
    base_epoch: Epoch,
    roots: Vec<Digest>,
    primer: Primer,
    primer_sig: Signature,
}

impl ValidationForest {
    /// Forest with every tree unknown, primed at `timestamp` and unsigned.
    pub fn empty(cfg: EpochConfig, hasher: &'static SmtHasher, timestamp: u32) -> Self {
        let roots = vec![hasher.empty(0); cfg.epoch_count as usize];
        Self::from_roots(cfg, hasher, roots, timestamp).expect("root count matches")
    }

    /// Forest over `roots` (oldest first) with an unsigned primer. The
    /// window starts at the epoch containing `timestamp`.
    pub fn from_roots(
        cfg: EpochConfig,
        hasher: &'static SmtHasher,
        roots: Vec<Digest>,
        timestamp: u32,
    ) -> Result<Self, ForestError> {
        if roots.len() != cfg.epoch_count as usize {
            return Err(ForestError::RootCount {
                expected: cfg.epoch_count as usize,
                got: roots.len(),
            });
        }
        let primer = compute_primer(hasher, &roots, timestamp, &cfg);
        Ok(ValidationForest {
            cfg,
            hasher,
            base_epoch: cfg.epoch_of(timestamp),
            roots,
            primer,
            primer_sig: Signature::ZERO,
        })
    }

    pub fn sign(&mut self, signer: &dyn PrimerSigner) {
        self.primer_sig = signer.sign(&self.primer.to_bytes());
    }

    pub fn config(&self) -> &EpochConfig {
        &self.cfg
    }

    pub fn hasher(&self) -> &'static SmtHasher {
        self.hasher
    }

    pub fn base_epoch(&self) -> Epoch {
        self.base_epoch
    }

    pub fn newest_epoch(&self) -> Epoch {
        self.base_epoch + self.cfg.epoch_count - 1
    }

    /// Roots, oldest first.
    pub fn roots(&self) -> &[Digest] {
        &self.roots
    }

    pub fn primer(&self) -> &Primer {
        &self.primer
    }

    pub fn primer_sig(&self) -> &Signature {
        &self.primer_sig
    }

    pub fn contains_epoch(&self, epoch: Epoch) -> bool {
        epoch >= self.base_epoch && epoch <= self.newest_epoch()
    }

    pub fn root(&self, epoch: Epoch) -> Option<Digest> {
        self.contains_epoch(epoch)
            .then(|| self.roots[(epoch - self.base_epoch) as usize])
    }

    pub fn verify_signature(&self, verifier: &dyn PrimerVerifier) -> bool {
        verifier.verify(&self.primer.to_bytes(), &self.primer_sig)
    }

    /// Drops the oldest tree and opens an empty newest one. The primer is
    /// left as is until the next CA update.
    pub fn prune(&mut self) {
        self.base_epoch += 1;
        self.roots.remove(0);
        self.roots.push(self.hasher.empty(0));
    }

    /// Copy of this forest pruned forward to the window of `timestamp`.
    pub fn aligned_to(&self, timestamp: u32) -> ValidationForest {
        let mut out = self.clone();
        let target = self.cfg.epoch_of(timestamp);
        let steps = target.saturating_sub(self.base_epoch);
        if steps >= self.cfg.epoch_count {
            out.base_epoch = target;
            out.roots.fill(self.hasher.empty(0));
        } else {
            for _ in 0..steps {
                out.prune();
            }
        }
        out
    }

    /// Parities of the roots as held locally, without touching the primer.
    pub fn local_parities(&self) -> Parities {
        compute_parities(self.hasher, &self.roots, &self.cfg)
    }

    /// Roots for `slots`, each slot newest first.
    pub fn roots_for_slots(&self, slots: &[usize]) -> Vec<Digest> {
        slots
            .iter()
            .flat_map(|&s| self.cfg.slot_epochs(self.base_epoch, s))
            .map(|e| self.roots[(e - self.base_epoch) as usize])
            .collect()
    }

    /// Replaces roots and adopts `primer` if, after aligning to the primer's
    /// window, the updated roots reproduce it exactly. On any error the
    /// forest is left untouched.
    pub fn apply_root_updates(
        &mut self,
        updates: &[(Epoch, Digest)],
        primer: &Primer,
        sig: &Signature,
        verifier: &dyn PrimerVerifier,
    ) -> Result<(), ForestError> {
        if primer.timestamp < self.primer.timestamp {
            return Err(ForestError::Replay {
                current: self.primer.timestamp,
                offered: primer.timestamp,
            });
        }
        if !verifier.verify(&primer.to_bytes(), sig) {
            return Err(ForestError::Authentication);
        }
        let mut scratch = self.aligned_to(primer.timestamp);
        for &(epoch, root) in updates {
            if !scratch.contains_epoch(epoch) {
                return Err(ForestError::OutOfWindow {
                    epoch: epoch.into(),
                    base: scratch.base_epoch,
                });
            }
            scratch.roots[(epoch - scratch.base_epoch) as usize] = root;
        }
        let recomputed = compute_primer(self.hasher, &scratch.roots, primer.timestamp, &self.cfg);
        if recomputed != *primer {
            return Err(ForestError::Inconsistent);
        }
        scratch.primer = recomputed;
        scratch.primer_sig = *sig;
        *self = scratch;
        Ok(())
    }

    /// Like [`apply_root_updates`](Self::apply_root_updates) with roots
    /// listed per requested parity slot, in the order of `slots`.
    pub fn apply_slot_roots(
        &mut self,
        slots: &[usize],
        roots: &[Digest],
        primer: &Primer,
        sig: &Signature,
        verifier: &dyn PrimerVerifier,
    ) -> Result<(), ForestError> {
        let base = self.cfg.epoch_of(primer.timestamp).max(self.base_epoch);
        let epochs: Vec<Epoch> = slots
            .iter()
            .flat_map(|&s| self.cfg.slot_epochs(base, s))
            .collect();
        if epochs.len() != roots.len() {
            return Err(ForestError::RootCount {
                expected: epochs.len(),
                got: roots.len(),
            });
        }
        let updates: Vec<(Epoch, Digest)> = epochs.into_iter().zip(roots.iter().copied()).collect();
        self.apply_root_updates(&updates, primer, sig, verifier)
    }

    /// Replaces a root without touching the primer. For the CA, which signs
    /// a fresh primer afterwards via [`reprime`](Self::reprime).
    pub fn set_root(&mut self, epoch: Epoch, root: Digest) -> Result<(), ForestError> {
        if !self.contains_epoch(epoch) {
            return Err(ForestError::OutOfWindow {
                epoch: epoch.into(),
                base: self.base_epoch,
            });
        }
        self.roots[(epoch - self.base_epoch) as usize] = root;
        Ok(())
    }

    /// Recomputes the primer at `timestamp` and signs it.
    pub fn reprime(&mut self, timestamp: u32, signer: &dyn PrimerSigner) {
        self.primer = compute_primer(self.hasher, &self.roots, timestamp, &self.cfg);
        self.sign(signer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash_tree::sha256;
    use crate::wire::crypto::StubSigner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h() -> &'static SmtHasher {
        SmtHasher::sha256()
    }

    const WEEK: u32 = 604_800;

    fn random_roots(rng: &mut ChaCha8Rng) -> Vec<Digest> {
        (0..52).map(|_| Digest(rng.gen())).collect()
    }

    #[test]
    fn default_layout() {
        let cfg = EpochConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.parity_slots(), 7);
        assert_eq!(cfg.parity_len(), 14);
        assert_eq!(cfg.primer_len(), 50);
        assert_eq!(cfg.slot_ages(0), 0..1);
        assert_eq!(cfg.slot_ages(2), 2..12);
        assert_eq!(cfg.slot_ages(6), 42..52);
        for age in 0..52 {
            assert!(cfg.slot_ages(cfg.slot_of_age(age)).contains(&age));
        }
    }

    #[test]
    fn epoch_arithmetic() {
        let cfg = EpochConfig::default();
        assert_eq!(cfg.epoch_of(0), 0);
        assert_eq!(cfg.epoch_of(WEEK), 1);
        assert_eq!(cfg.epoch_of(WEEK - 1), 0);
        assert_eq!(cfg.epoch_of(WEEK * 52 - 1), 51);
        assert_eq!(cfg.epoch_in_window(WEEK * 52 - 1, 0), Ok(51));
        assert!(cfg.epoch_in_window(WEEK * 52, 0).is_err());
        assert!(cfg.epoch_in_window(WEEK * 9, 10).is_err());
        let mut last = 0;
        for ts in (0..WEEK * 60).step_by(99_991) {
            let e = cfg.epoch_of(ts);
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn short_epochs_are_rejected() {
        let cfg = EpochConfig {
            epoch_duration: 3600,
            ..EpochConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_forest_primer() {
        let cfg = EpochConfig::default();
        let vf = ValidationForest::empty(cfg, h(), 0);
        let mut cat = Vec::new();
        for _ in 0..52 {
            cat.extend_from_slice(&h().empty(0).0);
        }
        assert_eq!(vf.primer().root.0, sha256(&cat));
        assert_eq!(vf.primer().to_bytes().len(), 50);
    }

    #[test]
    fn single_root_changes_flip_root_and_one_slot() {
        let cfg = EpochConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let roots = random_roots(&mut rng);
        let base = compute_primer(h(), &roots, 5, &cfg);
        for _ in 0..100 {
            let mut r = roots.clone();
            let idx = rng.gen_range(0..52);
            r[idx] = r[idx].with_bit_flipped(rng.gen_range(0..256));
            let p = compute_primer(h(), &r, 5, &cfg);
            assert_ne!(p.root, base.root);
            let diff = diff_parities(&base, &p, &cfg);
            assert!(diff.len() <= 1);
            if let [slot] = diff[..] {
                assert_eq!(slot, cfg.slot_of_age(51 - idx));
            }
        }
    }

    #[test]
    fn newest_and_age_fifteen_map_to_expected_slots() {
        let cfg = EpochConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let roots = random_roots(&mut rng);
        let base = compute_primer(h(), &roots, 5, &cfg);
        let mut r = roots.clone();
        r[51] = Digest(rng.gen());
        assert_eq!(diff_parities(&base, &compute_primer(h(), &r, 5, &cfg), &cfg), vec![0]);
        let mut r = roots.clone();
        r[51 - 15] = Digest(rng.gen());
        assert_eq!(diff_parities(&base, &compute_primer(h(), &r, 5, &cfg), &cfg), vec![3]);
    }

    #[test]
    fn second_newest_and_epoch_26_changed() {
        let cfg = EpochConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let roots = random_roots(&mut rng);
        let base = compute_primer(h(), &roots, 5, &cfg);
        let mut r = roots.clone();
        r[50] = Digest(rng.gen());
        r[51 - 25] = Digest(rng.gen());
        let diff = diff_parities(&base, &compute_primer(h(), &r, 5, &cfg), &cfg);
        assert_eq!(diff, vec![1, 4]);
        let wanted: usize = diff.iter().map(|&s| cfg.slot_ages(s).len()).sum();
        assert_eq!(wanted, 11);
    }

    #[test]
    fn engineered_collision_hides_the_change() {
        let cfg = EpochConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let roots = random_roots(&mut rng);
        let base = compute_primer(h(), &roots, 5, &cfg);
        let mut tries = 0;
        let colliding = loop {
            tries += 1;
            let mut r = roots.clone();
            r[51] = Digest(rng.gen());
            let p = compute_primer(h(), &r, 5, &cfg);
            if p.parities == base.parities {
                break p;
            }
            assert!(tries < 2_000_000);
        };
        assert_ne!(colliding.root, base.root);
        assert!(diff_parities(&base, &colliding, &cfg).is_empty());
    }

    fn signed(roots: Vec<Digest>, ts: u32, signer: &StubSigner) -> ValidationForest {
        let mut vf = ValidationForest::from_roots(EpochConfig::default(), h(), roots, ts).unwrap();
        vf.sign(signer);
        vf
    }

    #[test]
    fn apply_updates_commits_or_leaves_untouched() {
        let signer = StubSigner::from_seed(9);
        let v = signer.verifier();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts = WEEK * 100;
        let roots = random_roots(&mut rng);
        let mut node = signed(roots.clone(), ts, &signer);

        let mut ca_roots = roots.clone();
        ca_roots[40] = Digest(rng.gen());
        let ca = signed(ca_roots.clone(), ts + 86_400, &signer);
        let epoch40 = node.base_epoch() + 40;

        let before = node.clone();
        let forged = [(epoch40, Digest(rng.gen()))];
        assert_eq!(
            node.apply_root_updates(&forged, ca.primer(), ca.primer_sig(), v.as_ref()),
            Err(ForestError::Inconsistent)
        );
        assert_eq!(node, before);

        let mut bad_sig = *ca.primer_sig();
        bad_sig.0[0] ^= 1;
        let good = [(epoch40, ca_roots[40])];
        assert_eq!(
            node.apply_root_updates(&good, ca.primer(), &bad_sig, v.as_ref()),
            Err(ForestError::Authentication)
        );
        assert_eq!(node, before);

        node.apply_root_updates(&good, ca.primer(), ca.primer_sig(), v.as_ref())
            .unwrap();
        assert_eq!(node.primer(), ca.primer());
        assert_eq!(node.roots(), ca.roots());

        assert!(matches!(
            node.apply_root_updates(&[], before.primer(), before.primer_sig(), v.as_ref()),
            Err(ForestError::Replay { .. })
        ));
        assert_eq!(node.primer(), ca.primer());
    }

    #[test]
    fn prune_slides_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let roots = random_roots(&mut rng);
        let mut vf = ValidationForest::from_roots(EpochConfig::default(), h(), roots.clone(), WEEK * 10).unwrap();
        vf.prune();
        assert_eq!(vf.roots().len(), 52);
        assert_eq!(vf.base_epoch(), 11);
        assert_eq!(vf.roots()[0], roots[1]);
        assert_eq!(vf.roots()[51], h().empty(0));
        for _ in 0..52 {
            vf.prune();
        }
        assert!(vf.roots().iter().all(|r| *r == h().empty(0)));
        let far = vf.aligned_to(WEEK * 500);
        assert_eq!(far.base_epoch(), 500);
    }

    #[test]
    fn epoch_change_via_slot_roots() {
        let signer = StubSigner::from_seed(1);
        let v = signer.verifier();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ts = WEEK * 200 + 10;
        let roots = random_roots(&mut rng);
        let mut node = signed(roots.clone(), ts, &signer);
        let mut ca_roots = roots[1..].to_vec();
        ca_roots.push(Digest(rng.gen()));
        let ca = signed(ca_roots, ts + WEEK, &signer);

        let aligned = node.aligned_to(ca.primer().timestamp);
        let mut local = node.primer().clone();
        local.parities = aligned.local_parities();
        let slots = diff_parities(&local, ca.primer(), node.config());
        assert_eq!(slots, vec![0]);
        let sent = ca.roots_for_slots(&slots);
        node.apply_slot_roots(&slots, &sent, ca.primer(), ca.primer_sig(), v.as_ref())
            .unwrap();
        assert_eq!(node, ca);
    }
}
