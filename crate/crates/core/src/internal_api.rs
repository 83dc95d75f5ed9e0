//! TA-facing services: randomness, digests and MACs, secp256k1 ECDSA and
//! trusted storage sealed to a device-unique key.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use alloc::collections::BTreeMap;
use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use k256::ecdsa::signature::hazmat::{PrehashSigner, PrehashVerifier};
use k256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

use crate::protocol::{ReturnCode, Uuid};

/// Deterministic CSPRNG. Identical seeds give identical streams.
#[derive(Clone)]
pub struct Rng(ChaCha20Rng);

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn from_entropy(entropy: [u8; 32]) -> Self {
        Rng(ChaCha20Rng::from_seed(entropy))
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        self.0.fill_bytes(out);
    }

    pub fn random_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n];
        self.fill(&mut out);
        out
    }
}

impl fmt::Debug for Rng {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Rng(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("unsupported algorithm {0:#x}")]
    UnsupportedAlg(u32),
    #[error("invalid key")]
    InvalidKey,
    #[error("invalid signature encoding")]
    InvalidSignature,
}

impl CryptoError {
    pub fn return_code(&self) -> ReturnCode {
        match self {
            CryptoError::UnsupportedAlg(_) => ReturnCode::ERROR_BAD_PARAMETERS,
            CryptoError::InvalidKey | CryptoError::InvalidSignature => {
                ReturnCode::ERROR_BAD_PARAMETERS
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DigestAlg {
    Sha256,
    Sha512,
}

impl DigestAlg {
    /// GlobalPlatform algorithm identifiers.
    pub fn from_id(id: u32) -> Result<Self, CryptoError> {
        match id {
            0x5000_0004 => Ok(DigestAlg::Sha256),
            0x5000_0006 => Ok(DigestAlg::Sha512),
            other => Err(CryptoError::UnsupportedAlg(other)),
        }
    }

    pub fn output_len(self) -> usize {
        match self {
            DigestAlg::Sha256 => 32,
            DigestAlg::Sha512 => 64,
        }
    }
}

/// Incremental digest.
#[derive(Clone)]
pub enum DigestStream {
    Sha256(Sha256),
    Sha512(Sha512),
}

impl DigestStream {
    pub fn new(alg: DigestAlg) -> Self {
        match alg {
            DigestAlg::Sha256 => DigestStream::Sha256(Sha256::new()),
            DigestAlg::Sha512 => DigestStream::Sha512(Sha512::new()),
        }
    }

    pub fn update(&mut self, chunk: &[u8]) {
        match self {
            DigestStream::Sha256(h) => h.update(chunk),
            DigestStream::Sha512(h) => h.update(chunk),
        }
    }

    pub fn finalize(self) -> Vec<u8> {
        match self {
            DigestStream::Sha256(h) => h.finalize().to_vec(),
            DigestStream::Sha512(h) => h.finalize().to_vec(),
        }
    }
}

pub fn digest(alg: DigestAlg, msg: &[u8]) -> Vec<u8> {
    let mut s = DigestStream::new(alg);
    s.update(msg);
    s.finalize()
}

pub fn sha256(msg: &[u8]) -> [u8; 32] {
    Sha256::digest(msg).into()
}

pub fn hmac(alg: DigestAlg, key: &[u8], msg: &[u8]) -> Vec<u8> {
    match alg {
        DigestAlg::Sha256 => {
            let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac takes any key length");
            mac.update(msg);
            mac.finalize().into_bytes().to_vec()
        }
        DigestAlg::Sha512 => {
            let mut mac = <Hmac<Sha512> as Mac>::new_from_slice(key).expect("hmac takes any key length");
            mac.update(msg);
            mac.finalize().into_bytes().to_vec()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Secp256k1,
}

fn signing_key(private_key: &[u8; 32]) -> Result<SigningKey, CryptoError> {
    SigningKey::from_bytes(private_key.into()).map_err(|_| CryptoError::InvalidKey)
}

/// Compressed SEC1 public key for a private scalar.
pub fn public_key(curve: Curve, private_key: &[u8; 32]) -> Result<[u8; 33], CryptoError> {
    let Curve::Secp256k1 = curve;
    let vk = *signing_key(private_key)?.verifying_key();
    let point = vk.to_encoded_point(true);
    Ok(point.as_bytes().try_into().expect("compressed point is 33 bytes"))
}

/// Deterministic-nonce (RFC 6979) signature, normalized to low-s, as r || s.
pub fn ecdsa_sign(
    curve: Curve,
    private_key: &[u8; 32],
    msg_hash: &[u8; 32],
) -> Result<[u8; 64], CryptoError> {
    let Curve::Secp256k1 = curve;
    let key = signing_key(private_key)?;
    let sig: Signature = key
        .sign_prehash(msg_hash)
        .map_err(|_| CryptoError::InvalidKey)?;
    let sig = sig.normalize_s().unwrap_or(sig);
    Ok(sig.to_bytes().into())
}

/// Verifies an r || s signature against a SEC1 public key.
pub fn ecdsa_verify(
    curve: Curve,
    public_key: &[u8],
    msg_hash: &[u8; 32],
    signature: &[u8; 64],
) -> Result<bool, CryptoError> {
    let Curve::Secp256k1 = curve;
    let vk = VerifyingKey::from_sec1_bytes(public_key).map_err(|_| CryptoError::InvalidKey)?;
    let sig = Signature::from_slice(signature).map_err(|_| CryptoError::InvalidSignature)?;
    Ok(vk.verify_prehash(msg_hash, &sig).is_ok())
}

/// Simulated hardware-unique key. The secret only ever feeds key derivation.
pub struct DeviceKey {
    huk: Zeroizing<[u8; 32]>,
}

impl DeviceKey {
    pub fn from_bytes(huk: [u8; 32]) -> Self {
        DeviceKey {
            huk: Zeroizing::new(huk),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"teeod-huk");
        h.update(seed.to_le_bytes());
        DeviceKey::from_bytes(h.finalize().into())
    }

    fn storage_key(&self, ta: &Uuid) -> Zeroizing<[u8; 32]> {
        let hk = Hkdf::<Sha256>::new(Some(STORAGE_KDF_SALT), &self.huk[..]);
        let mut okm = Zeroizing::new([0u8; 32]);
        hk.expand(ta.as_bytes(), &mut okm[..])
            .expect("32 bytes is a valid hkdf length");
        okm
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceKey(<redacted>)")
    }
}

const STORAGE_KDF_SALT: &[u8] = b"teeod-storage";

pub const SEALED_VERSION: u8 = 1;
pub const MAX_OBJECT_ID_LEN: usize = 64;
pub const SEALED_HEADER_LEN: usize = 1 + 16 + 1 + 32 + 12 + 4;
pub const SEALED_TAG_LEN: usize = 16;
pub type ObjectDigest = [u8; 32];

pub fn object_digest(object_id: &[u8]) -> ObjectDigest {
    sha256(object_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("item not found")]
    ItemNotFound,
    #[error("sealed object failed integrity check")]
    Tampered,
    #[error("object id of {0} bytes exceeds {MAX_OBJECT_ID_LEN}")]
    IdTooLong(usize),
    #[error("storage backend: {0}")]
    Backend(String),
}

impl StorageError {
    pub fn return_code(&self) -> ReturnCode {
        match self {
            StorageError::ItemNotFound => ReturnCode::ERROR_ITEM_NOT_FOUND,
            StorageError::Tampered => ReturnCode::ERROR_TAMPERED,
            StorageError::IdTooLong(_) => ReturnCode::ERROR_BAD_PARAMETERS,
            StorageError::Backend(_) => ReturnCode::ERROR_GENERIC,
        }
    }
}

/// Sealed object header as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedHeader {
    pub ta_uuid: Uuid,
    pub id_len: u8,
    pub id_digest: ObjectDigest,
    pub nonce: [u8; 12],
    pub length: u32,
}

impl SealedHeader {
    fn encode(&self) -> [u8; SEALED_HEADER_LEN] {
        let mut out = [0u8; SEALED_HEADER_LEN];
        out[0] = SEALED_VERSION;
        out[1..17].copy_from_slice(self.ta_uuid.as_bytes());
        out[17] = self.id_len;
        out[18..50].copy_from_slice(&self.id_digest);
        out[50..62].copy_from_slice(&self.nonce);
        out[62..66].copy_from_slice(&self.length.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        let h = bytes.get(..SEALED_HEADER_LEN)?;
        if h[0] != SEALED_VERSION {
            return None;
        }
        Some(SealedHeader {
            ta_uuid: Uuid::from_bytes(h[1..17].try_into().ok()?),
            id_len: h[17],
            id_digest: h[18..50].try_into().ok()?,
            nonce: h[50..62].try_into().ok()?,
            length: u32::from_le_bytes(h[62..66].try_into().ok()?),
        })
    }
}

/// Seals `payload`: version, uuid, id length, id digest, nonce, length,
/// ciphertext, tag. The header is bound as associated data.
pub fn seal(
    key: &DeviceKey,
    ta: &Uuid,
    object_id: &[u8],
    payload: &[u8],
    nonce: [u8; 12],
) -> Result<Vec<u8>, StorageError> {
    if object_id.len() > MAX_OBJECT_ID_LEN {
        return Err(StorageError::IdTooLong(object_id.len()));
    }
    let header = SealedHeader {
        ta_uuid: *ta,
        id_len: object_id.len() as u8,
        id_digest: object_digest(object_id),
        nonce,
        length: payload.len() as u32,
    }
    .encode();
    let k = key.storage_key(ta);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&k[..]));
    let mut out = Vec::with_capacity(SEALED_HEADER_LEN + payload.len() + SEALED_TAG_LEN);
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &header, &mut out[SEALED_HEADER_LEN..])
        .map_err(|_| StorageError::Backend(String::from("payload too large to seal")))?;
    out.extend_from_slice(&tag);
    Ok(out)
}

pub fn unseal(key: &DeviceKey, ta: &Uuid, object_id: &[u8], blob: &[u8]) -> Result<Vec<u8>, StorageError> {
    let header = SealedHeader::decode(blob).ok_or(StorageError::Tampered)?;
    if blob.len() != SEALED_HEADER_LEN + header.length as usize + SEALED_TAG_LEN
        || header.ta_uuid != *ta
        || header.id_digest != object_digest(object_id)
        || header.id_len as usize != object_id.len()
    {
        return Err(StorageError::Tampered);
    }
    let k = key.storage_key(ta);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&k[..]));
    let ct_end = blob.len() - SEALED_TAG_LEN;
    let mut plain = blob[SEALED_HEADER_LEN..ct_end].to_vec();
    let tag = Tag::from_slice(&blob[ct_end..]);
    match cipher.decrypt_in_place_detached(
        Nonce::from_slice(&header.nonce),
        &blob[..SEALED_HEADER_LEN],
        &mut plain,
        tag,
    ) {
        Ok(()) => Ok(plain),
        Err(_) => {
            plain.zeroize();
            Err(StorageError::Tampered)
        }
    }
}

/// Where sealed blobs live. Keys are (owning TA, object id digest).
pub trait ObjectBackend {
    fn load(&self, ta: &Uuid, id: &ObjectDigest) -> Result<Option<Vec<u8>>, StorageError>;
    /// Replaces the blob atomically.
    fn store(&self, ta: &Uuid, id: &ObjectDigest, blob: &[u8]) -> Result<(), StorageError>;
    /// Returns whether something was removed.
    fn remove(&self, ta: &Uuid, id: &ObjectDigest) -> Result<bool, StorageError>;
    fn list(&self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError>;
}

/// In-memory backend for single-context simulation and tests.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    objects: RefCell<BTreeMap<(Uuid, ObjectDigest), Vec<u8>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mutable access to a stored blob, for tamper tests.
    pub fn with_blob<R>(&self, ta: &Uuid, id: &ObjectDigest, f: impl FnOnce(&mut Vec<u8>) -> R) -> Option<R> {
        self.objects.borrow_mut().get_mut(&(*ta, *id)).map(f)
    }
}

impl ObjectBackend for MemoryBackend {
    fn load(&self, ta: &Uuid, id: &ObjectDigest) -> Result<Option<Vec<u8>>, StorageError> {
        Ok(self.objects.borrow().get(&(*ta, *id)).cloned())
    }

    fn store(&self, ta: &Uuid, id: &ObjectDigest, blob: &[u8]) -> Result<(), StorageError> {
        self.objects.borrow_mut().insert((*ta, *id), blob.to_vec());
        Ok(())
    }

    fn remove(&self, ta: &Uuid, id: &ObjectDigest) -> Result<bool, StorageError> {
        Ok(self.objects.borrow_mut().remove(&(*ta, *id)).is_some())
    }

    fn list(&self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        Ok(self
            .objects
            .borrow()
            .keys()
            .filter(|(owner, _)| owner == ta)
            .map(|(_, id)| *id)
            .collect())
    }
}

/// Trusted storage: sealing on top of a blob backend.
#[derive(Debug)]
pub struct SealedStore<B> {
    key: DeviceKey,
    backend: B,
}

impl<B: ObjectBackend> SealedStore<B> {
    pub fn new(key: DeviceKey, backend: B) -> Self {
        SealedStore { key, backend }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn put(&self, ta: &Uuid, object_id: &[u8], payload: &[u8], nonce: [u8; 12]) -> Result<(), StorageError> {
        let blob = seal(&self.key, ta, object_id, payload, nonce)?;
        self.backend.store(ta, &object_digest(object_id), &blob)
    }

    pub fn get(&self, ta: &Uuid, object_id: &[u8]) -> Result<Vec<u8>, StorageError> {
        if object_id.len() > MAX_OBJECT_ID_LEN {
            return Err(StorageError::IdTooLong(object_id.len()));
        }
        let blob = self
            .backend
            .load(ta, &object_digest(object_id))?
            .ok_or(StorageError::ItemNotFound)?;
        unseal(&self.key, ta, object_id, &blob)
    }

    pub fn delete(&self, ta: &Uuid, object_id: &[u8]) -> Result<(), StorageError> {
        if object_id.len() > MAX_OBJECT_ID_LEN {
            return Err(StorageError::IdTooLong(object_id.len()));
        }
        if self.backend.remove(ta, &object_digest(object_id))? {
            Ok(())
        } else {
            Err(StorageError::ItemNotFound)
        }
    }

    pub fn list(&self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        self.backend.list(ta)
    }
}

/// Platform services an enclave offers to the TA it hosts. Storage calls
/// take the caller's UUID; the enclave always passes its own TA's.
pub trait TeeServices {
    fn random_bytes(&mut self, out: &mut [u8]);
    fn storage_put(&mut self, ta: &Uuid, object_id: &[u8], payload: &[u8]) -> Result<(), StorageError>;
    fn storage_get(&mut self, ta: &Uuid, object_id: &[u8]) -> Result<Vec<u8>, StorageError>;
    fn storage_delete(&mut self, ta: &Uuid, object_id: &[u8]) -> Result<(), StorageError>;
    fn storage_list(&mut self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError>;
    /// Monotonic counter standing in for trusted time.
    fn monotonic_tick(&mut self) -> u64;
}

/// Services built from an owned RNG and sealed store.
#[derive(Debug)]
pub struct SoftServices<B> {
    pub rng: Rng,
    pub store: SealedStore<B>,
    ticks: u64,
}

impl<B: ObjectBackend> SoftServices<B> {
    pub fn new(rng: Rng, store: SealedStore<B>) -> Self {
        SoftServices { rng, store, ticks: 0 }
    }
}

impl<B: ObjectBackend> TeeServices for SoftServices<B> {
    fn random_bytes(&mut self, out: &mut [u8]) {
        self.rng.fill(out);
    }

    fn storage_put(&mut self, ta: &Uuid, object_id: &[u8], payload: &[u8]) -> Result<(), StorageError> {
        let mut nonce = [0u8; 12];
        self.rng.fill(&mut nonce);
        self.store.put(ta, object_id, payload, nonce)
    }

    fn storage_get(&mut self, ta: &Uuid, object_id: &[u8]) -> Result<Vec<u8>, StorageError> {
        self.store.get(ta, object_id)
    }

    fn storage_delete(&mut self, ta: &Uuid, object_id: &[u8]) -> Result<(), StorageError> {
        self.store.delete(ta, object_id)
    }

    fn storage_list(&mut self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        self.store.list(ta)
    }

    fn monotonic_tick(&mut self) -> u64 {
        self.ticks += 1;
        self.ticks
    }
}
