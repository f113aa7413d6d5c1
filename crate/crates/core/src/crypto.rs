//! Hashing, signatures and a verifiable random function behind one backend trait.
//!
//! [`IdealOracle`] models the primitives as registries owned by one simulation:
//! `hash` appends unseen inputs to a list and returns the index, a signature is
//! valid exactly when the registry holds it. [`RealCrypto`] uses SHA-256 and
//! Ed25519 instead.
//!
//! The VRF follows the unique-signature construction. The proof is a
//! deterministic signature on the tag under the owner's VRF key, and the output
//! is SHA-256 of the proof. Output derivation always uses SHA-256, also in the
//! ideal backend, because an index-valued hash carries no pseudorandomness.

use std::collections::HashMap;
use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::app::{AppState, ProcessId, Response};
use crate::wire::{Reader, WireResult, Writer};

/// VRF output length in bits.
pub const VRF_OUTPUT_BITS: usize = 256;
pub const DIGEST_LEN: usize = 32;

pub const DOMAIN_SPECULATE: &str = "speculate";
pub const DOMAIN_COMPLAIN: &str = "complain";
pub const DOMAIN_VRF: &str = "vrf";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("{caller} attempted to sign as {claimed}")]
    Impersonation { caller: ProcessId, claimed: ProcessId },
    #[error("VRF key already generated for {0}")]
    DuplicateVrfKey(ProcessId),
    #[error("VRF key pair does not match its verification key")]
    ForeignVrfKey,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// Digest carrying a list index, as returned by the ideal oracle.
    pub fn from_index(index: u64) -> Self {
        let mut b = [0u8; DIGEST_LEN];
        b[DIGEST_LEN - 8..].copy_from_slice(&index.to_be_bytes());
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        Ok(Self(r.raw(DIGEST_LEN)?.try_into().unwrap()))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: ProcessId,
    pub value: Vec<u8>,
}

impl Signature {
    /// Signer `u16`, then the length-prefixed signature value.
    pub fn encode_into(&self, w: &mut Writer) {
        w.u16(self.signer.0).bytes(&self.value);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        Ok(Self {
            signer: ProcessId(r.u16()?),
            value: r.bytes()?.to_vec(),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VrfPublicKey(pub [u8; 32]);

impl fmt::Debug for VrfPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VrfPublicKey({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone)]
pub struct VrfKeyPair {
    pub owner: ProcessId,
    sk: [u8; 32],
    pub vk: VrfPublicKey,
}

impl VrfKeyPair {
    /// Output length in bits.
    pub fn mu(&self) -> usize {
        VRF_OUTPUT_BITS
    }

    /// Input length bound; tags of any length are accepted.
    pub fn lambda(&self) -> Option<usize> {
        None
    }
}

impl fmt::Debug for VrfKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VrfKeyPair")
            .field("owner", &self.owner)
            .field("vk", &self.vk)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VrfTriple {
    pub tag: Vec<u8>,
    pub output: [u8; 32],
    pub proof: Vec<u8>,
}

impl VrfTriple {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.tag).raw(&self.output).bytes(&self.proof);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let tag = r.bytes()?.to_vec();
        let output = r.raw(32)?.try_into().unwrap();
        let proof = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self { tag, output, proof })
    }
}

/// `domain ‖ 0x00 ‖ config (u64 BE) ‖ digest` — the layout signed in approvals.
pub fn speculate_payload(config: u64, digest: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(DOMAIN_SPECULATE.as_bytes())
        .u8(0)
        .u64(config)
        .raw(digest.as_bytes());
    w.into_bytes()
}

/// `"complain" ‖ 0x00 ‖ epoch (u64 BE) ‖ accused (u16 BE)`.
pub fn complain_payload(epoch: u64, accused: ProcessId) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(DOMAIN_COMPLAIN.as_bytes()).u8(0).u64(epoch).u16(accused.0);
    w.into_bytes()
}

/// VRF tag: `instance ‖ 0x00 ‖ epoch (u64 BE) ‖ seq (u64 BE)`.
pub fn vrf_tag(instance: &[u8], epoch: u64, seq: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(instance).u8(0).u64(epoch).u64(seq);
    w.into_bytes()
}

/// Hash input for a typed value: `type ‖ 0x00 ‖ bytes`.
pub fn typed(kind: &str, bytes: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(kind.len() + 1 + bytes.len());
    v.extend_from_slice(kind.as_bytes());
    v.push(0);
    v.extend_from_slice(bytes);
    v
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Content fingerprint used in traces; independent of the active backend.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(&sha256(&[bytes])[..16])
}

pub fn state_digest(crypto: &mut dyn CryptoBackend, t: &AppState) -> Digest {
    crypto.hash(&typed("state", &t.encode()))
}

pub fn response_digest(crypto: &mut dyn CryptoBackend, r: &Response) -> Digest {
    crypto.hash(&typed("response", r.as_bytes()))
}

/// Digest approved for a speculative output: binds the state and response
/// digests, so an order carrying only `(ht, hr)` can still be checked.
pub fn output_digest(crypto: &mut dyn CryptoBackend, ht: &Digest, hr: &Digest) -> Digest {
    let mut x = Vec::with_capacity(2 * DIGEST_LEN);
    x.extend_from_slice(ht.as_bytes());
    x.extend_from_slice(hr.as_bytes());
    crypto.hash(&typed("output", &x))
}

fn vrf_output(proof: &[u8]) -> [u8; 32] {
    sha256(&[DOMAIN_VRF.as_bytes(), &[0], proof])
}

pub trait CryptoBackend: Send {
    fn hash(&mut self, x: &[u8]) -> Digest;
    fn sign(&mut self, p: ProcessId, m: &[u8]) -> Signature;
    fn verify(&self, p: ProcessId, sig: &Signature, m: &[u8]) -> bool;
    fn vrf_keygen(&mut self, owner: ProcessId, seed: &[u8]) -> Result<VrfKeyPair, CryptoError>;
    fn vrf_eval(&mut self, kp: &VrfKeyPair, tag: &[u8]) -> Result<VrfTriple, CryptoError>;
    fn vrf_verify(&self, vk: &VrfPublicKey, tag: &[u8], output: &[u8; 32], proof: &[u8]) -> bool;
}

/// Signs on behalf of `caller`, refusing to produce a signature for anyone else.
pub fn sign_as(
    backend: &mut dyn CryptoBackend,
    caller: ProcessId,
    signer: ProcessId,
    m: &[u8],
) -> Result<Signature, CryptoError> {
    if caller != signer {
        return Err(CryptoError::Impersonation {
            caller,
            claimed: signer,
        });
    }
    Ok(backend.sign(signer, m))
}

#[derive(Debug, Default)]
pub struct IdealOracle {
    hashed: Vec<Vec<u8>>,
    hash_index: HashMap<Vec<u8>, u64>,
    signed: HashMap<(ProcessId, Vec<u8>), Vec<u8>>,
    sign_count: u64,
    vrf_owners: HashMap<ProcessId, VrfPublicKey>,
    vrf_proofs: HashMap<(VrfPublicKey, Vec<u8>), Vec<u8>>,
}

impl IdealOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of distinct inputs hashed so far.
    pub fn hashed_len(&self) -> usize {
        self.hashed.len()
    }

    fn vrf_vk_for(sk: &[u8; 32]) -> VrfPublicKey {
        VrfPublicKey(sha256(&[b"vrf-vk\0", sk]))
    }
}

impl CryptoBackend for IdealOracle {
    fn hash(&mut self, x: &[u8]) -> Digest {
        if let Some(&i) = self.hash_index.get(x) {
            return Digest::from_index(i);
        }
        let i = self.hashed.len() as u64;
        self.hashed.push(x.to_vec());
        self.hash_index.insert(x.to_vec(), i);
        Digest::from_index(i)
    }

    fn sign(&mut self, p: ProcessId, m: &[u8]) -> Signature {
        let key = (p, m.to_vec());
        if let Some(value) = self.signed.get(&key) {
            return Signature {
                signer: p,
                value: value.clone(),
            };
        }
        let value = self.sign_count.to_be_bytes().to_vec();
        self.sign_count += 1;
        self.signed.insert(key, value.clone());
        Signature { signer: p, value }
    }

    fn verify(&self, p: ProcessId, sig: &Signature, m: &[u8]) -> bool {
        sig.signer == p && self.signed.get(&(p, m.to_vec())).is_some_and(|v| *v == sig.value)
    }

    fn vrf_keygen(&mut self, owner: ProcessId, seed: &[u8]) -> Result<VrfKeyPair, CryptoError> {
        if self.vrf_owners.contains_key(&owner) {
            return Err(CryptoError::DuplicateVrfKey(owner));
        }
        let sk = sha256(&[b"vrf-sk\0", seed]);
        let vk = Self::vrf_vk_for(&sk);
        self.vrf_owners.insert(owner, vk);
        Ok(VrfKeyPair { owner, sk, vk })
    }

    fn vrf_eval(&mut self, kp: &VrfKeyPair, tag: &[u8]) -> Result<VrfTriple, CryptoError> {
        if Self::vrf_vk_for(&kp.sk) != kp.vk {
            return Err(CryptoError::ForeignVrfKey);
        }
        let proof = self
            .vrf_proofs
            .entry((kp.vk, tag.to_vec()))
            .or_insert_with(|| sha256(&[b"vrf-proof\0", &kp.sk, tag]).to_vec())
            .clone();
        Ok(VrfTriple {
            tag: tag.to_vec(),
            output: vrf_output(&proof),
            proof,
        })
    }

    fn vrf_verify(&self, vk: &VrfPublicKey, tag: &[u8], output: &[u8; 32], proof: &[u8]) -> bool {
        self.vrf_proofs.get(&(*vk, tag.to_vec())).is_some_and(|p| p == proof) && vrf_output(proof) == *output
    }
}

/// SHA-256 digests and Ed25519 signatures; per-process keys derive from a seed.
pub struct RealCrypto {
    keys: Vec<SigningKey>,
    vrf_owners: HashMap<ProcessId, VrfPublicKey>,
}

impl RealCrypto {
    pub fn new(n: usize, seed: u64) -> Self {
        let keys = (0..n as u16)
            .map(|p| SigningKey::from_bytes(&sha256(&[b"sign-key\0", &seed.to_be_bytes(), &p.to_be_bytes()])))
            .collect();
        Self {
            keys,
            vrf_owners: HashMap::new(),
        }
    }

    fn vrf_message(tag: &[u8]) -> Vec<u8> {
        typed(DOMAIN_VRF, tag)
    }
}

impl CryptoBackend for RealCrypto {
    fn hash(&mut self, x: &[u8]) -> Digest {
        Digest(sha256(&[x]))
    }

    fn sign(&mut self, p: ProcessId, m: &[u8]) -> Signature {
        let value = self.keys[p.index()].sign(m).to_bytes().to_vec();
        Signature { signer: p, value }
    }

    fn verify(&self, p: ProcessId, sig: &Signature, m: &[u8]) -> bool {
        let Some(key) = self.keys.get(p.index()) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(sig.value.as_slice()) else {
            return false;
        };
        sig.signer == p
            && key
                .verifying_key()
                .verify_strict(m, &ed25519_dalek::Signature::from_bytes(&bytes))
                .is_ok()
    }

    fn vrf_keygen(&mut self, owner: ProcessId, seed: &[u8]) -> Result<VrfKeyPair, CryptoError> {
        if self.vrf_owners.contains_key(&owner) {
            return Err(CryptoError::DuplicateVrfKey(owner));
        }
        let sk = sha256(&[b"vrf-sk\0", seed]);
        let vk = VrfPublicKey(SigningKey::from_bytes(&sk).verifying_key().to_bytes());
        self.vrf_owners.insert(owner, vk);
        Ok(VrfKeyPair { owner, sk, vk })
    }

    fn vrf_eval(&mut self, kp: &VrfKeyPair, tag: &[u8]) -> Result<VrfTriple, CryptoError> {
        let key = SigningKey::from_bytes(&kp.sk);
        if key.verifying_key().to_bytes() != kp.vk.0 {
            return Err(CryptoError::ForeignVrfKey);
        }
        let proof = key.sign(&Self::vrf_message(tag)).to_bytes().to_vec();
        Ok(VrfTriple {
            tag: tag.to_vec(),
            output: vrf_output(&proof),
            proof,
        })
    }

    fn vrf_verify(&self, vk: &VrfPublicKey, tag: &[u8], output: &[u8; 32], proof: &[u8]) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&vk.0) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(proof) else {
            return false;
        };
        key.verify_strict(&Self::vrf_message(tag), &ed25519_dalek::Signature::from_bytes(&bytes))
            .is_ok()
            && vrf_output(proof) == *output
    }
}
