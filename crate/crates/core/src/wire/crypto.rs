//! Signing boundary for primers.
//!
//! Anything that produces 64-byte signatures can sign primers. The stub
//! signer is a keyed hash and is only meant for reproducible simulations;
//! the ECDSA signer uses P-256.

use std::fmt;
use std::sync::Arc;

use p256::ecdsa::signature::{Signer as _, Verifier as _};
use p256::ecdsa::{Signature as EcdsaSignature, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};

pub const SIGNATURE_LEN: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub const ZERO: Signature = Signature([0; SIGNATURE_LEN]);
}

impl Default for Signature {
    fn default() -> Self {
        Signature::ZERO
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

pub trait PrimerSigner: Send + Sync {
    fn sign(&self, message: &[u8]) -> Signature;
    fn verifier(&self) -> Arc<dyn PrimerVerifier>;
}

pub trait PrimerVerifier: Send + Sync + fmt::Debug {
    fn verify(&self, message: &[u8], signature: &Signature) -> bool;
}

/// Keyed SHA-256 "signature". Signing and verifying share the key, so it
/// offers no public-key security; it keeps simulations fast and
/// deterministic.
#[derive(Clone, Debug)]
pub struct StubSigner {
    key: [u8; 32],
}

impl StubSigner {
    pub fn new(key: [u8; 32]) -> Self {
        StubSigner { key }
    }

    pub fn from_seed(seed: u64) -> Self {
        StubSigner::new(Sha256::digest(seed.to_be_bytes()).into())
    }

    fn tag(&self, message: &[u8]) -> Signature {
        let mut out = [0u8; SIGNATURE_LEN];
        for (half, label) in out.chunks_exact_mut(32).zip(*b"LR") {
            let mut h = Sha256::new();
            h.update(self.key);
            h.update([label]);
            h.update(message);
            half.copy_from_slice(&h.finalize());
        }
        Signature(out)
    }
}

impl PrimerSigner for StubSigner {
    fn sign(&self, message: &[u8]) -> Signature {
        self.tag(message)
    }

    fn verifier(&self) -> Arc<dyn PrimerVerifier> {
        Arc::new(self.clone())
    }
}

impl PrimerVerifier for StubSigner {
    fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        self.tag(message) == *signature
    }
}

/// ECDSA over secp256r1 with SHA-256, fixed-size `r || s` encoding.
#[derive(Clone)]
pub struct EcdsaSigner {
    key: SigningKey,
}

impl EcdsaSigner {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        EcdsaSigner {
            key: SigningKey::random(rng),
        }
    }

    pub fn public(&self) -> EcdsaVerifier {
        EcdsaVerifier {
            key: *self.key.verifying_key(),
        }
    }
}

impl PrimerSigner for EcdsaSigner {
    fn sign(&self, message: &[u8]) -> Signature {
        let sig: EcdsaSignature = self.key.sign(message);
        Signature(sig.to_bytes().into())
    }

    fn verifier(&self) -> Arc<dyn PrimerVerifier> {
        Arc::new(self.public())
    }
}

#[derive(Clone, Debug)]
pub struct EcdsaVerifier {
    key: VerifyingKey,
}

impl PrimerVerifier for EcdsaVerifier {
    fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        match EcdsaSignature::from_slice(&signature.0) {
            Ok(sig) => self.key.verify(message, &sig).is_ok(),
            Err(_) => false,
        }
    }
}
