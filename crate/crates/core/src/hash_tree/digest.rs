use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of bits in a digest, which is also the depth of the tree.
pub const DIGEST_BITS: u16 = 256;

/// A 256-bit hash value.
///
/// A digest doubles as a leaf position: bit `i` (counting from the most
/// significant bit, `i = 0`) picks the branch taken at depth `i + 1`, with a
/// clear bit going left.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub const fn new(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Bit at `index`, counting from the most significant bit.
    #[inline]
    pub fn bit(&self, index: u16) -> bool {
        debug_assert!(index < DIGEST_BITS);
        let byte = self.0[(index / 8) as usize];
        (byte >> (7 - index % 8)) & 1 == 1
    }

    /// Branch direction of the node at `depth` (1..=256) on this digest's path.
    #[inline]
    pub fn goes_right_at(&self, depth: u16) -> bool {
        self.bit(depth - 1)
    }

    #[inline]
    pub fn with_bit_flipped(mut self, index: u16) -> Self {
        self.0[(index / 8) as usize] ^= 1 << (7 - index % 8);
        self
    }

    /// Keeps the first `depth` bits and zeroes the rest.
    pub fn prefix(&self, depth: u16) -> Self {
        debug_assert!(depth <= DIGEST_BITS);
        let mut out = [0u8; 32];
        let full = (depth / 8) as usize;
        out[..full].copy_from_slice(&self.0[..full]);
        let rem = depth % 8;
        if rem != 0 {
            out[full] = self.0[full] & (0xffu8 << (8 - rem));
        }
        Digest(out)
    }

    /// Keeps the first `depth` bits and sets the rest.
    pub fn prefix_max(&self, depth: u16) -> Self {
        let mut out = self.prefix(depth).0;
        let full = (depth / 8) as usize;
        let rem = depth % 8;
        if full < 32 {
            out[full] |= 0xffu8 >> rem;
            for b in &mut out[full + 1..] {
                *b = 0xff;
            }
        }
        Digest(out)
    }

    /// Number of leading bits shared with `other` (256 when equal).
    pub fn common_prefix_len(&self, other: &Digest) -> u16 {
        for (i, (a, b)) in self.0.iter().zip(other.0.iter()).enumerate() {
            let x = a ^ b;
            if x != 0 {
                return i as u16 * 8 + x.leading_zeros() as u16;
            }
        }
        DIGEST_BITS
    }

    /// The first `bits` bits (at most 64) as an integer.
    pub fn leading_bits(&self, bits: u32) -> u64 {
        debug_assert!(bits <= 64);
        if bits == 0 {
            return 0;
        }
        let head = u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"));
        head >> (64 - bits)
    }

    /// Digest whose first `bits` bits are `value` and the rest zero.
    pub fn from_leading_bits(value: u64, bits: u32) -> Self {
        debug_assert!(bits <= 64);
        let mut out = [0u8; 32];
        if bits > 0 {
            let head = value << (64 - bits);
            out[..8].copy_from_slice(&head.to_be_bytes());
        }
        Digest(out)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl From<[u8; 32]> for Digest {
    fn from(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }
}

/// 256-bit presence bitmap of a proof of inclusion.
///
/// Bit `i` counts from the least significant end and stands for the sibling
/// at depth `256 - i`, so bit 0 is the sibling of the leaf itself.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PathBitmap([u64; 4]);

impl PathBitmap {
    pub const EMPTY: PathBitmap = PathBitmap([0; 4]);

    #[inline]
    pub fn bit(&self, index: u16) -> bool {
        (self.0[(index / 64) as usize] >> (index % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, index: u16, value: bool) {
        let limb = &mut self.0[(index / 64) as usize];
        if value {
            *limb |= 1 << (index % 64);
        } else {
            *limb &= !(1 << (index % 64));
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|l| l.count_ones()).sum()
    }

    /// Number of set bits strictly below `index`.
    pub fn rank(&self, index: u16) -> usize {
        let limb = (index / 64) as usize;
        let mut n: u32 = self.0[..limb].iter().map(|l| l.count_ones()).sum();
        let rem = index % 64;
        if rem > 0 {
            n += (self.0[limb] & ((1u64 << rem) - 1)).count_ones();
        }
        n as usize
    }

    /// Presence bit for the sibling at `depth` (1..=256).
    #[inline]
    pub fn index_of_depth(depth: u16) -> u16 {
        DIGEST_BITS - depth
    }

    pub fn to_be_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (i, limb) in self.0.iter().enumerate() {
            let start = 32 - 8 * (i + 1);
            out[start..start + 8].copy_from_slice(&limb.to_be_bytes());
        }
        out
    }

    pub fn from_be_bytes(bytes: &[u8; 32]) -> Self {
        let mut limbs = [0u64; 4];
        for (i, limb) in limbs.iter_mut().enumerate() {
            let start = 32 - 8 * (i + 1);
            *limb = u64::from_be_bytes(bytes[start..start + 8].try_into().expect("8 bytes"));
        }
        PathBitmap(limbs)
    }
}

impl fmt::Debug for PathBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathBitmap({} set)", self.count_ones())
    }
}
