//! Repairing stale proofs of inclusion, either from another leaf's fresh
//! proof or from a level-cache of the epoch tree.

use thiserror::Error;

use crate::forest::Epoch;
use crate::hash_tree::{Digest, LeafState, LookUpTable, PathBitmap, ProofError, ProofOfInclusion, SmtHasher, DIGEST_BITS};

pub const MAX_CACHE_LEVEL: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RepairError {
    #[error("both proofs are for the same leaf")]
    SameLeaf,
    #[error(transparent)]
    Proof(#[from] ProofError),
    #[error("cache level {0} outside 1..=16")]
    CacheLevel(u8),
}

/// Blends `fresh` (a current proof for another position) into `mine`.
///
/// Above the depth where the two paths split the siblings are shared and
/// are copied over. At the split, the sibling of `mine` is the node on the
/// fresh proof's own path; `state` says whether that proof authenticates
/// its leaf or an empty slot. Siblings below the split are left alone, so
/// a proof already current there is never damaged.
pub fn update_poi_with_poi(
    hasher: &SmtHasher,
    mine: &mut ProofOfInclusion,
    fresh: &ProofOfInclusion,
    state: LeafState,
) -> Result<(), RepairError> {
    if mine.leaf_hash == fresh.leaf_hash {
        return Err(RepairError::SameLeaf);
    }
    if !mine.is_well_formed() {
        return Err(RepairError::Proof(ProofError::Malformed {
            bits: mine.path_bitmap.count_ones(),
            elements: mine.path.len(),
        }));
    }
    let target = mine.leaf_hash.common_prefix_len(&fresh.leaf_hash);
    let split = fresh.node_at(hasher, state, target + 1)?;

    // bitmap indices: below `split_idx` are my deeper siblings, at it the
    // split sibling, above it the shared ones
    let split_idx = PathBitmap::index_of_depth(target + 1);
    let keep = mine.path_bitmap.rank(split_idx);
    let shared_from = fresh.path_bitmap.rank(split_idx + 1);

    let mut path = Vec::with_capacity(keep + 1 + fresh.path.len() - shared_from);
    path.extend_from_slice(&mine.path[..keep]);
    let mut bitmap = PathBitmap::EMPTY;
    for i in 0..split_idx {
        bitmap.set(i, mine.path_bitmap.bit(i));
    }
    if split != hasher.empty(target + 1) {
        path.push(split);
        bitmap.set(split_idx, true);
    }
    path.extend_from_slice(&fresh.path[shared_from..]);
    for i in (split_idx + 1)..DIGEST_BITS {
        bitmap.set(i, fresh.path_bitmap.bit(i));
    }
    mine.path = path;
    mine.path_bitmap = bitmap;
    Ok(())
}

/// All nodes of one epoch tree at depth `clvl`, left to right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelCache {
    pub clvl: u8,
    pub epoch: Epoch,
    pub entries: Vec<Digest>,
}

impl LevelCache {
    /// Cache of an empty tree.
    pub fn empty(hasher: &SmtHasher, clvl: u8, epoch: Epoch) -> Result<Self, RepairError> {
        check_level(clvl)?;
        Ok(LevelCache {
            clvl,
            epoch,
            entries: vec![hasher.empty(clvl.into()); 1 << clvl],
        })
    }

    pub fn size_bytes(&self) -> usize {
        self.entries.len() * 32
    }

    /// Index of the cache part that `position` falls into.
    pub fn part_of(&self, position: &Digest) -> usize {
        position.leading_bits(self.clvl.into()) as usize
    }

    /// Hash of the node at `depth` (1..=clvl) above `position`, folded
    /// from the cache entries below it.
    pub fn calc_pos_in_lc(&self, hasher: &SmtHasher, position: &Digest, depth: u16) -> Digest {
        let clvl = u16::from(self.clvl);
        debug_assert!((1..=clvl).contains(&depth));
        let span = 1usize << (clvl - depth);
        let start = (position.leading_bits(depth.into()) as usize) * span;
        fold_level(hasher, &self.entries[start..start + span])
    }

    /// Tree root implied by the cache.
    pub fn root(&self, hasher: &SmtHasher) -> Digest {
        fold_level(hasher, &self.entries)
    }
}

fn fold_level(hasher: &SmtHasher, entries: &[Digest]) -> Digest {
    let mut level = entries.to_vec();
    while level.len() > 1 {
        level = level
            .chunks_exact(2)
            .map(|pair| hasher.hash_pair(&pair[0], &pair[1]))
            .collect();
    }
    level[0]
}

fn check_level(clvl: u8) -> Result<(), RepairError> {
    if clvl == 0 || clvl > MAX_CACHE_LEVEL {
        return Err(RepairError::CacheLevel(clvl));
    }
    Ok(())
}

pub fn construct_lvl_cache(clvl: u8, epoch: Epoch, lut: &LookUpTable) -> Result<LevelCache, RepairError> {
    check_level(clvl)?;
    let entries = (0..1u64 << clvl)
        .map(|i| lut.get(&Digest::from_leading_bits(i, clvl.into()), clvl.into()))
        .collect();
    Ok(LevelCache { clvl, epoch, entries })
}

/// Refreshes the one cache entry on `fresh`'s path.
pub fn update_lvl_cache_with_poi(
    hasher: &SmtHasher,
    lc: &mut LevelCache,
    fresh: &ProofOfInclusion,
    state: LeafState,
) -> Result<(), RepairError> {
    let part = lc.part_of(&fresh.leaf_hash);
    lc.entries[part] = fresh.node_at(hasher, state, lc.clvl.into())?;
    Ok(())
}

/// Rewrites the siblings at depths 1..=clvl of `mine` from the cache.
/// Deeper siblings stay as they were.
pub fn update_poi_with_lvl_cache(hasher: &SmtHasher, mine: &mut ProofOfInclusion, lc: &LevelCache) {
    let leaf = mine.leaf_hash;
    for depth in 1..=u16::from(lc.clvl) {
        let sibling = lc.calc_pos_in_lc(hasher, &leaf.with_bit_flipped(depth - 1), depth);
        mine.put_sibling(hasher, depth, sibling);
    }
}
