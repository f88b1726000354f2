//! Incremental sparse Merkle tree over the full 256-bit digest space.
//!
//! Depth 0 is the root and depth 256 holds the leaves. A leaf is stored at
//! the position given by its own digest, and every unassigned subtree hashes
//! to the matching entry of [`EmptyHashes`], so proofs only carry siblings
//! that are non-empty together with a [`PathBitmap`] saying where they go.

mod digest;
mod lut;
mod proof;

use std::sync::OnceLock;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use digest::{Digest, PathBitmap, DIGEST_BITS};
pub use lut::LookUpTable;
pub use proof::{calc_path_root, verify_poi, LeafState, ProofOfInclusion};

/// A 256-bit hash function.
pub type HashFn = fn(&[u8]) -> [u8; 32];
type PairFn = fn(&[u8; 64]) -> [u8; 32];

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofError {
    #[error("malformed proof: bitmap has {bits} set bits but path holds {elements} elements")]
    Malformed { bits: u32, elements: usize },
    #[error("stop depth {0} is outside 0..=256")]
    BadDepth(u16),
}

/// Hashes of fully-empty subtrees, indexed by the depth of the subtree root.
///
/// `levels[256]` is `H("")` and `levels[0]` is the root of an empty tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmptyHashes {
    levels: Vec<Digest>,
}

impl EmptyHashes {
    pub fn at(&self, depth: u16) -> Digest {
        self.levels[depth as usize]
    }

    pub fn levels(&self) -> &[Digest] {
        &self.levels
    }
}

pub fn compute_empty_hashes(hash: HashFn) -> EmptyHashes {
    let mut levels = vec![Digest::ZERO; DIGEST_BITS as usize + 1];
    levels[DIGEST_BITS as usize] = Digest(hash(&[]));
    for d in (0..DIGEST_BITS as usize).rev() {
        levels[d] = hash_pair_with(hash, &levels[d + 1], &levels[d + 1]);
    }
    EmptyHashes { levels }
}

#[inline]
fn hash_pair_with(hash: HashFn, left: &Digest, right: &Digest) -> Digest {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(&left.0);
    buf[32..].copy_from_slice(&right.0);
    Digest(hash(&buf))
}

/// SHA-256 of exactly one 64-byte block, skipping the streaming API.
#[allow(deprecated)] // sha2 0.10 still takes generic-array 0.14 blocks
fn sha256_block(buf: &[u8; 64]) -> [u8; 32] {
    use sha2::digest::generic_array::GenericArray;
    const IV: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
    ];
    // padding block for a 512-bit message
    const PAD: [u8; 64] = {
        let mut p = [0u8; 64];
        p[0] = 0x80;
        p[62] = 0x02;
        p
    };
    let mut state = IV;
    let blocks = [*GenericArray::from_slice(buf), *GenericArray::from_slice(&PAD)];
    sha2::compress256(&mut state, &blocks);
    let mut out = [0u8; 32];
    for (chunk, word) in out.chunks_exact_mut(4).zip(state) {
        chunk.copy_from_slice(&word.to_be_bytes());
    }
    out
}

/// The tree hash function bundled with its empty-subtree table.
#[derive(Clone, Debug)]
pub struct SmtHasher {
    hash: HashFn,
    pair: Option<PairFn>,
    empty: EmptyHashes,
}

// Two hashers are interchangeable when their empty tables agree.
impl PartialEq for SmtHasher {
    fn eq(&self, other: &Self) -> bool {
        self.empty == other.empty
    }
}

impl Eq for SmtHasher {}

impl SmtHasher {
    pub fn new(hash: HashFn) -> Self {
        SmtHasher {
            hash,
            pair: None,
            empty: compute_empty_hashes(hash),
        }
    }

    /// Process-wide SHA-256 instance.
    pub fn sha256() -> &'static SmtHasher {
        static INSTANCE: OnceLock<SmtHasher> = OnceLock::new();
        INSTANCE.get_or_init(|| SmtHasher {
            pair: Some(sha256_block),
            ..SmtHasher::new(sha256)
        })
    }

    /// Leaks a hasher for a custom hash function so it can be shared by
    /// trees, forests and nodes for the rest of the process.
    pub fn leak(hash: HashFn) -> &'static SmtHasher {
        Box::leak(Box::new(SmtHasher::new(hash)))
    }

    #[inline]
    pub fn hash(&self, data: &[u8]) -> Digest {
        Digest((self.hash)(data))
    }

    #[inline]
    pub fn hash_pair(&self, left: &Digest, right: &Digest) -> Digest {
        match self.pair {
            Some(pair) => {
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&left.0);
                buf[32..].copy_from_slice(&right.0);
                Digest(pair(&buf))
            }
            None => hash_pair_with(self.hash, left, right),
        }
    }

    /// Parent of `node` (at `depth`) and `sibling`, ordered by the branch
    /// direction that `position` takes at `depth`.
    #[inline]
    pub fn parent(&self, position: &Digest, depth: u16, node: &Digest, sibling: &Digest) -> Digest {
        if position.goes_right_at(depth) {
            self.hash_pair(sibling, node)
        } else {
            self.hash_pair(node, sibling)
        }
    }

    #[inline]
    pub fn empty(&self, depth: u16) -> Digest {
        self.empty.at(depth)
    }

    pub fn empty_hashes(&self) -> &EmptyHashes {
        &self.empty
    }

    /// Value of the node at `depth` above a lone leaf, with every sibling
    /// on the way empty.
    pub fn fold_single(&self, position: &Digest, value: Digest, from: u16, to: u16) -> Digest {
        let mut v = value;
        for d in ((to + 1)..=from).rev() {
            v = self.parent(position, d, &v, &self.empty(d));
        }
        v
    }
}
