use std::collections::{BTreeSet, HashMap};
use std::ops::Bound;

use super::{Digest, PathBitmap, ProofOfInclusion, SmtHasher, DIGEST_BITS};

type NodeKey = (Digest, u16);

#[inline]
fn key(position: &Digest, depth: u16) -> NodeKey {
    (position.prefix(depth), depth)
}

/// Sparse store of the non-empty nodes of one tree.
///
/// Only nodes that the update algorithms actually need are kept: every node
/// with two or more leaves below it, plus the highest node of each lone-leaf
/// chain (a single-leaf node whose parent is shared). The remaining
/// single-leaf nodes are recomputed from the leaf set on demand, so memory
/// stays linear in the number of leaves instead of growing with the tree
/// height. [`LookUpTable::get`] resolves any `(position, depth)` pair.
#[derive(Clone, Debug)]
pub struct LookUpTable {
    hasher: &'static SmtHasher,
    nodes: HashMap<NodeKey, Digest>,
    leaves: BTreeSet<Digest>,
}

impl LookUpTable {
    pub fn new(hasher: &'static SmtHasher) -> Self {
        LookUpTable {
            hasher,
            nodes: HashMap::new(),
            leaves: BTreeSet::new(),
        }
    }

    /// Builds a table over `leaves` in one pass (duplicates are ignored).
    pub fn from_leaves<I: IntoIterator<Item = Digest>>(hasher: &'static SmtHasher, leaves: I) -> Self {
        let leaves: BTreeSet<Digest> = leaves.into_iter().collect();
        let mut lut = LookUpTable::new(hasher);
        if !leaves.is_empty() {
            let sorted: Vec<Digest> = leaves.iter().copied().collect();
            lut.nodes.reserve(sorted.len() * 2);
            build(hasher, &mut lut.nodes, &sorted, 0);
        }
        lut.leaves = leaves;
        lut
    }

    pub fn hasher(&self) -> &'static SmtHasher {
        self.hasher
    }

    pub fn root(&self) -> Digest {
        self.nodes
            .get(&(Digest::ZERO, 0))
            .copied()
            .unwrap_or_else(|| self.hasher.empty(0))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn contains(&self, leaf: &Digest) -> bool {
        self.leaves.contains(leaf)
    }

    /// Leaves in position order.
    pub fn leaves(&self) -> impl Iterator<Item = &Digest> + '_ {
        self.leaves.iter()
    }

    /// Number of nodes held in memory (zero for an empty tree).
    pub fn stored_len(&self) -> usize {
        self.nodes.len()
    }

    /// Value of the node at `depth` on `position`'s path. Trailing bits of
    /// `position` below `depth` are ignored.
    pub fn get(&self, position: &Digest, depth: u16) -> Digest {
        let k = key(position, depth);
        if let Some(v) = self.nodes.get(&k) {
            return *v;
        }
        let mut under = self.leaves.range(k.0..=position.prefix_max(depth));
        match (under.next(), under.next()) {
            (None, _) => self.hasher.empty(depth),
            (Some(leaf), None) => self.hasher.fold_single(leaf, *leaf, DIGEST_BITS, depth),
            (Some(_), Some(_)) => unreachable!("shared node missing from table"),
        }
    }

    #[inline]
    fn stored_or_empty(&self, position: &Digest, depth: u16) -> Digest {
        self.nodes
            .get(&key(position, depth))
            .copied()
            .unwrap_or_else(|| self.hasher.empty(depth))
    }

    fn neighbours(&self, position: &Digest) -> (Option<&Digest>, Option<&Digest>) {
        let pred = self.leaves.range(..*position).next_back();
        let succ = self
            .leaves
            .range((Bound::Excluded(*position), Bound::Unbounded))
            .next();
        (pred, succ)
    }

    /// Depth of the deepest node that `position` shares with some leaf other
    /// than itself, and that leaf. `None` when there is no other leaf.
    fn split(&self, position: &Digest) -> Option<(u16, Digest)> {
        let (pred, succ) = self.neighbours(position);
        let a = pred.map(|p| (position.common_prefix_len(p), *p));
        let b = succ.map(|s| (position.common_prefix_len(s), *s));
        match (a, b) {
            (Some(x), Some(y)) => Some(if x.0 >= y.0 { x } else { y }),
            (x, y) => x.or(y),
        }
    }

    /// Recomputes the ancestors of the node at `from` on `position`'s path,
    /// starting from `value`, and returns the new root.
    fn propagate(&mut self, position: &Digest, mut value: Digest, from: u16) -> Digest {
        for d in (1..=from).rev() {
            let sibling = self.stored_or_empty(&position.with_bit_flipped(d - 1), d);
            value = self.hasher.parent(position, d, &value, &sibling);
            self.nodes.insert(key(position, d - 1), value);
        }
        value
    }

    /// Inserts `leaf` and returns the new root. Adding a present leaf
    /// changes nothing.
    pub fn add_leaf(&mut self, leaf: Digest) -> Digest {
        if self.leaves.contains(&leaf) {
            return self.root();
        }
        let split = self.split(&leaf);
        self.leaves.insert(leaf);
        let Some((s, other)) = split else {
            let root = self.hasher.fold_single(&leaf, leaf, DIGEST_BITS, 0);
            self.nodes.insert((Digest::ZERO, 0), root);
            return root;
        };
        let top = self.hasher.fold_single(&leaf, leaf, DIGEST_BITS, s + 1);
        self.nodes.insert(key(&leaf, s + 1), top);
        let sib_key = key(&other, s + 1);
        if !self.nodes.contains_key(&sib_key) {
            // `other` was alone below depth s; its chain now tops out here.
            let v = self.hasher.fold_single(&other, other, DIGEST_BITS, s + 1);
            self.nodes.insert(sib_key, v);
        }
        self.propagate(&leaf, top, s + 1)
    }

    /// Removes `leaf` and returns the new root. Removing an absent leaf
    /// changes nothing.
    pub fn remove_leaf(&mut self, leaf: &Digest) -> Digest {
        if !self.leaves.remove(leaf) {
            return self.root();
        }
        let Some((s, other)) = self.split(leaf) else {
            self.nodes.clear();
            return self.hasher.empty(0);
        };
        self.nodes.remove(&key(leaf, s + 1));
        let sib = key(&other, s + 1);
        let mut under = self.leaves.range(sib.0..=other.prefix_max(s + 1));
        let shared = under.next().is_some() && under.next().is_some();
        if shared {
            let empty = self.hasher.empty(s + 1);
            return self.propagate(leaf, empty, s + 1);
        }
        // `other` is now alone under the depth-s node: collapse its chain.
        let value = self.nodes[&sib];
        let top = self.split(&other).map_or(0, |(so, _)| so + 1);
        let folded = self.hasher.fold_single(&other, value, s + 1, top);
        for d in (top + 1)..=(s + 1) {
            self.nodes.remove(&key(&other, d));
        }
        self.nodes.insert(key(&other, top), folded);
        self.propagate(&other, folded, top)
    }

    /// Proof for `position` against the current root. For a position that
    /// holds no leaf the proof authenticates the empty leaf value there.
    pub fn calc_poi(&self, position: &Digest) -> ProofOfInclusion {
        let mut poi = ProofOfInclusion::bare(*position);
        let Some((s, _)) = self.split(position) else {
            return poi;
        };
        let mut path = Vec::with_capacity(s as usize + 1);
        let mut bitmap = PathBitmap::EMPTY;
        // Siblings below s + 1 are empty; the one at s + 1 may sit inside
        // a lone-leaf chain when `position` is not a member.
        for d in (1..=s + 1).rev() {
            let flipped = position.with_bit_flipped(d - 1);
            let sibling = if d == s + 1 {
                self.get(&flipped, d)
            } else {
                self.stored_or_empty(&flipped, d)
            };
            if sibling != self.hasher.empty(d) {
                bitmap.set(PathBitmap::index_of_depth(d), true);
                path.push(sibling);
            }
        }
        poi.path = path;
        poi.path_bitmap = bitmap;
        poi
    }
}

fn build(hasher: &SmtHasher, nodes: &mut HashMap<NodeKey, Digest>, leaves: &[Digest], depth: u16) -> Digest {
    let value = if let [leaf] = leaves {
        hasher.fold_single(leaf, *leaf, DIGEST_BITS, depth)
    } else {
        let mid = leaves.partition_point(|l| !l.bit(depth));
        let child = |nodes: &mut HashMap<NodeKey, Digest>, part: &[Digest]| {
            if part.is_empty() {
                hasher.empty(depth + 1)
            } else {
                build(hasher, nodes, part, depth + 1)
            }
        };
        let left = child(nodes, &leaves[..mid]);
        let right = child(nodes, &leaves[mid..]);
        hasher.hash_pair(&left, &right)
    };
    nodes.insert(key(&leaves[0], depth), value);
    value
}
