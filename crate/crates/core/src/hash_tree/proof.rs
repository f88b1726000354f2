use serde::{Deserialize, Serialize};

use super::{Digest, PathBitmap, ProofError, SmtHasher, DIGEST_BITS};

/// Whether the leaf slot a proof talks about holds the leaf or is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafState {
    Present,
    /// The slot is empty; the proof authenticates `H(∅)` at the position.
    Absent,
}

/// Sibling digests along a leaf's path, empty siblings left out.
///
/// `path` is ordered bottom-up: the sibling closest to the leaf comes first.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProofOfInclusion {
    pub leaf_hash: Digest,
    pub path_bitmap: PathBitmap,
    pub path: Vec<Digest>,
}

impl ProofOfInclusion {
    /// A proof that claims every sibling is empty.
    pub fn bare(leaf_hash: Digest) -> Self {
        ProofOfInclusion {
            leaf_hash,
            path_bitmap: PathBitmap::EMPTY,
            path: Vec::new(),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.path_bitmap.count_ones() as usize == self.path.len()
    }

    /// Sibling recorded for `depth` (1..=256), if non-empty.
    pub fn sibling(&self, depth: u16) -> Option<&Digest> {
        let idx = PathBitmap::index_of_depth(depth);
        if self.path_bitmap.bit(idx) {
            self.path.get(self.path_bitmap.rank(idx))
        } else {
            None
        }
    }

    /// Replaces the sibling at `depth`; `None` marks it empty.
    pub fn set_sibling(&mut self, depth: u16, value: Option<Digest>) {
        let idx = PathBitmap::index_of_depth(depth);
        let pos = self.path_bitmap.rank(idx);
        match (self.path_bitmap.bit(idx), value) {
            (true, Some(v)) => self.path[pos] = v,
            (true, None) => {
                self.path.remove(pos);
                self.path_bitmap.set(idx, false);
            }
            (false, Some(v)) => {
                self.path.insert(pos, v);
                self.path_bitmap.set(idx, true);
            }
            (false, None) => {}
        }
    }

    /// Stores `value` for `depth`, clearing the slot when it equals the
    /// empty hash for that depth.
    pub fn put_sibling(&mut self, hasher: &SmtHasher, depth: u16, value: Digest) {
        let v = (value != hasher.empty(depth)).then_some(value);
        self.set_sibling(depth, v);
    }

    /// Node value at depth `lvl` on this proof's path, starting from the
    /// leaf value implied by `state`.
    pub fn node_at(&self, hasher: &SmtHasher, state: LeafState, lvl: u16) -> Result<Digest, ProofError> {
        let start = match state {
            LeafState::Present => self.leaf_hash,
            LeafState::Absent => hasher.empty(DIGEST_BITS),
        };
        fold_path(hasher, &self.leaf_hash, start, &self.path, &self.path_bitmap, lvl)
    }

    pub fn root(&self, hasher: &SmtHasher) -> Result<Digest, ProofError> {
        self.node_at(hasher, LeafState::Present, 0)
    }

    /// Classifies the proof against `root`: proves membership, proves the
    /// slot empty, or neither.
    pub fn status(&self, hasher: &SmtHasher, root: &Digest) -> Option<LeafState> {
        if self.node_at(hasher, LeafState::Present, 0).ok()? == *root {
            Some(LeafState::Present)
        } else if self.node_at(hasher, LeafState::Absent, 0).ok()? == *root {
            Some(LeafState::Absent)
        } else {
            None
        }
    }
}

fn fold_path(
    hasher: &SmtHasher,
    position: &Digest,
    start: Digest,
    path: &[Digest],
    bitmap: &PathBitmap,
    lvl: u16,
) -> Result<Digest, ProofError> {
    if lvl > DIGEST_BITS {
        return Err(ProofError::BadDepth(lvl));
    }
    let bits = bitmap.count_ones();
    if bits as usize != path.len() {
        return Err(ProofError::Malformed { bits, elements: path.len() });
    }
    let mut result = start;
    let mut next = path.iter();
    for i in 0..(DIGEST_BITS - lvl) {
        let depth = DIGEST_BITS - i;
        let sibling = if bitmap.bit(i) {
            *next.next().expect("popcount checked")
        } else {
            hasher.empty(depth)
        };
        result = hasher.parent(position, depth, &result, &sibling);
    }
    Ok(result)
}

/// Folds `leaf_hash` upward through `path`, stopping at depth `lvl`
/// (0 gives the root).
pub fn calc_path_root(
    hasher: &SmtHasher,
    leaf_hash: &Digest,
    path: &[Digest],
    path_bitmap: &PathBitmap,
    lvl: u16,
) -> Result<Digest, ProofError> {
    fold_path(hasher, leaf_hash, *leaf_hash, path, path_bitmap, lvl)
}

/// True iff `poi` is a well-formed membership proof of `leaf_hash` under
/// `expected_root`.
pub fn verify_poi(hasher: &SmtHasher, leaf_hash: &Digest, poi: &ProofOfInclusion, expected_root: &Digest) -> bool {
    poi.leaf_hash == *leaf_hash
        && calc_path_root(hasher, leaf_hash, &poi.path, &poi.path_bitmap, 0).is_ok_and(|r| r == *expected_root)
}
