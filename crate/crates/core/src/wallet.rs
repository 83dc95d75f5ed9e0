//! Bitcoin-wallet TA: six pin-protected commands over a master key that
//! never leaves trusted storage.
//!
//! Key pipeline: 128-bit entropy -> 12-word mnemonic -> PBKDF2-HMAC-SHA512
//! seed (empty passphrase) -> HMAC-SHA512("Bitcoin seed") master key ->
//! hardened child `m/index'` -> compressed pubkey -> P2PKH address.
//!
//! Invoke ABI shared with the client application:
//!
//! | param | kind      | use                                                   |
//! |-------|-----------|-------------------------------------------------------|
//! | 0     | VALUE_IN  | a = pin (4 ASCII digits, little-endian), b = child index |
//! | 1     | MEMREF    | input: mnemonic (cmd 3) or raw transaction (cmd 5)    |
//! | 2     | MEMREF    | output: mnemonic (2), signature hex (5), address (6)  |
//! | 3     | VALUE_OUT | a = exists flag (cmd 1) or output length              |

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use hmac::{Hmac, Mac};
use k256::elliptic_curve::PrimeField;
use k256::Scalar;
use ripemd::Ripemd160;
use sha2::{Digest, Sha256, Sha512};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop, Zeroizing};

use crate::enclave::{Params, TaEnv, TaError, TaResult, TrustedApp};
use crate::internal_api::{self, Curve};
use crate::protocol::{ParamKind, ReturnCode, Uuid};

const WORDLIST: &str = include_str!("bip39_english.txt");

/// UUID of the wallet TA.
pub const WALLET_UUID: Uuid = Uuid::from_bytes([
    0xb1, 0x7c, 0x0a, 0x11, 0x5e, 0x2d, 0x4b, 0x6f, 0x9a, 0x3c, 0x6e, 0x00, 0x42, 0x71, 0x5a, 0x11,
]);

pub const CMD_CHECK_EXISTS: u32 = 1;
pub const CMD_GENERATE: u32 = 2;
pub const CMD_DERIVE_FROM_MNEMONIC: u32 = 3;
pub const CMD_DELETE: u32 = 4;
pub const CMD_SIGN_TRANSACTION: u32 = 5;
pub const CMD_GET_ADDRESS: u32 = 6;

pub const WRONG_PIN: ReturnCode = ReturnCode(0x8000_1001);
pub const NO_KEY: ReturnCode = ReturnCode(0x8000_1002);
pub const ALREADY_EXISTS: ReturnCode = ReturnCode(0x8000_1003);
pub const INVALID_MNEMONIC: ReturnCode = ReturnCode(0x8000_1004);

/// Sealed object id of the master key record.
pub const MASTER_OBJECT_ID: &[u8] = b"master";

/// Signature output: hex(r || s || sighash-all).
pub const SIGNATURE_HEX_LEN: usize = 130;
pub const SIGHASH_ALL: u8 = 0x01;

pub fn wallet_error_name(rc: ReturnCode) -> Option<&'static str> {
    match rc {
        WRONG_PIN => Some("WRONG_PIN"),
        NO_KEY => Some("NO_KEY"),
        ALREADY_EXISTS => Some("ALREADY_EXISTS"),
        INVALID_MNEMONIC => Some("INVALID_MNEMONIC"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MnemonicError {
    #[error("expected 12 words, got {0}")]
    WordCount(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("checksum mismatch")]
    Checksum,
}

fn wordlist() -> Vec<&'static str> {
    WORDLIST.lines().collect()
}

/// A checksum-valid 12-word English mnemonic.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct Mnemonic {
    indices: [u16; 12],
}

impl core::fmt::Debug for Mnemonic {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("Mnemonic(<12 words>)")
    }
}

impl Mnemonic {
    pub fn from_entropy(entropy: &[u8; 16]) -> Self {
        let checksum = Sha256::digest(entropy)[0] >> 4;
        // 128 entropy bits followed by 4 checksum bits, read 11 at a time.
        let mut bits = u128::from_be_bytes(*entropy);
        let mut indices = [0u16; 12];
        let mut acc: u32 = u32::from(checksum);
        let mut acc_bits = 4;
        for slot in indices.iter_mut().rev() {
            while acc_bits < 11 {
                acc |= ((bits & 1) as u32) << acc_bits;
                bits >>= 1;
                acc_bits += 1;
            }
            *slot = (acc & 0x7FF) as u16;
            acc >>= 11;
            acc_bits -= 11;
        }
        Mnemonic { indices }
    }

    pub fn parse(text: &str) -> Result<Self, MnemonicError> {
        let list = wordlist();
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() != 12 {
            return Err(MnemonicError::WordCount(words.len()));
        }
        let mut indices = [0u16; 12];
        for (slot, word) in indices.iter_mut().zip(&words) {
            *slot = list
                .binary_search(word)
                .map_err(|_| MnemonicError::UnknownWord(String::from(*word)))? as u16;
        }
        // 132 bits do not fit a u128: rebuild the top 128 and keep the
        // low nibble of the last word as checksum.
        let checksum = (indices[11] & 0xF) as u8;
        let mut entropy_bits: u128 = 0;
        for idx in &indices[..11] {
            entropy_bits = (entropy_bits << 11) | u128::from(*idx);
        }
        entropy_bits = (entropy_bits << 7) | u128::from(indices[11] >> 4);
        let entropy = entropy_bits.to_be_bytes();
        if Sha256::digest(entropy)[0] >> 4 != checksum {
            return Err(MnemonicError::Checksum);
        }
        Ok(Mnemonic { indices })
    }

    pub fn words(&self) -> Vec<&'static str> {
        let list = wordlist();
        self.indices.iter().map(|i| list[*i as usize]).collect()
    }

    pub fn phrase(&self) -> Zeroizing<String> {
        Zeroizing::new(self.words().join(" "))
    }

    /// PBKDF2-HMAC-SHA512, 2048 rounds, salt "mnemonic" + passphrase.
    pub fn to_seed(&self, passphrase: &str) -> Zeroizing<[u8; 64]> {
        let mut seed = Zeroizing::new([0u8; 64]);
        let salt = Zeroizing::new(format!("mnemonic{passphrase}"));
        pbkdf2::pbkdf2_hmac::<Sha512>(self.phrase().as_bytes(), salt.as_bytes(), 2048, &mut seed[..]);
        seed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerivationError {
    #[error("derived key is invalid for index {0}")]
    InvalidChild(u32),
    #[error("master key is invalid")]
    InvalidMaster,
}

/// Private extended key.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct ExtendedKey {
    pub secret: [u8; 32],
    pub chain_code: [u8; 32],
}

impl core::fmt::Debug for ExtendedKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("ExtendedKey(<redacted>)")
    }
}

fn hmac_sha512(key: &[u8], parts: &[&[u8]]) -> Zeroizing<[u8; 64]> {
    let mut mac = Hmac::<Sha512>::new_from_slice(key).expect("hmac takes any key length");
    for p in parts {
        mac.update(p);
    }
    Zeroizing::new(mac.finalize().into_bytes().into())
}

fn split(i: &[u8; 64]) -> ([u8; 32], [u8; 32]) {
    (i[..32].try_into().unwrap(), i[32..].try_into().unwrap())
}

impl ExtendedKey {
    pub fn master_from_seed(seed: &[u8]) -> Result<Self, DerivationError> {
        let i = hmac_sha512(b"Bitcoin seed", &[seed]);
        let (secret, chain_code) = split(&i);
        let scalar: Option<Scalar> = Scalar::from_repr(secret.into()).into();
        if scalar.is_none_or(|s| bool::from(s.is_zero())) {
            return Err(DerivationError::InvalidMaster);
        }
        Ok(ExtendedKey { secret, chain_code })
    }

    /// Hardened child at `index` (the hardened bit is set here).
    pub fn derive_hardened(&self, index: u32) -> Result<Self, DerivationError> {
        let hardened = index | 0x8000_0000;
        let i = hmac_sha512(&self.chain_code, &[&[0u8], &self.secret, &hardened.to_be_bytes()]);
        let (tweak, chain_code) = split(&i);
        let tweak: Option<Scalar> = Scalar::from_repr(tweak.into()).into();
        let parent: Option<Scalar> = Scalar::from_repr(self.secret.into()).into();
        let (Some(tweak), Some(parent)) = (tweak, parent) else {
            return Err(DerivationError::InvalidChild(index));
        };
        let child = tweak + parent;
        if bool::from(child.is_zero()) {
            return Err(DerivationError::InvalidChild(index));
        }
        Ok(ExtendedKey {
            secret: child.to_repr().into(),
            chain_code,
        })
    }

    pub fn public_key(&self) -> [u8; 33] {
        internal_api::public_key(Curve::Secp256k1, &self.secret).expect("validated on derivation")
    }
}

pub fn hash160(data: &[u8]) -> [u8; 20] {
    Ripemd160::digest(Sha256::digest(data)).into()
}

/// Legacy pay-to-pubkey-hash address (version byte 0x00).
pub fn p2pkh_address(pubkey: &[u8; 33]) -> String {
    bs58::encode(hash160(pubkey)).with_check_version(0x00).into_string()
}

pub fn double_sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(Sha256::digest(data)).into()
}

/// Signs `raw_tx` with `key`: double-SHA-256 digest, low-s RFC 6979 ECDSA,
/// rendered as hex(r || s || 0x01).
pub fn sign_transaction(key: &ExtendedKey, raw_tx: &[u8]) -> String {
    let sig = internal_api::ecdsa_sign(Curve::Secp256k1, &key.secret, &double_sha256(raw_tx))
        .expect("validated on derivation");
    let mut out = Vec::with_capacity(65);
    out.extend_from_slice(&sig);
    out.push(SIGHASH_ALL);
    hex::encode(out)
}

/// Packs a 4-digit pin into the VALUE word the client sends.
pub fn pack_pin(pin: &str) -> Option<u32> {
    let bytes: [u8; 4] = pin.as_bytes().try_into().ok()?;
    bytes
        .iter()
        .all(u8::is_ascii_digit)
        .then(|| u32::from_le_bytes(bytes))
}

fn unpack_pin(word: u32) -> TaResult<[u8; 4]> {
    let bytes = word.to_le_bytes();
    if bytes.iter().all(u8::is_ascii_digit) {
        Ok(bytes)
    } else {
        Err(TaError::BAD_PARAMETERS)
    }
}

const RECORD_LEN: usize = 32 + 32 + 16 + 32;

/// Master key record as sealed under the wallet TA's UUID.
#[derive(Zeroize, ZeroizeOnDrop)]
struct MasterRecord {
    key: ExtendedKey,
    salt: [u8; 16],
    pin_hash: [u8; 32],
}

fn pin_hash(pin: &[u8; 4], salt: &[u8; 16]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(pin);
    h.update(salt);
    h.finalize().into()
}

impl MasterRecord {
    fn new(key: ExtendedKey, pin: &[u8; 4], salt: [u8; 16]) -> Self {
        MasterRecord {
            pin_hash: pin_hash(pin, &salt),
            key,
            salt,
        }
    }

    fn encode(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(Vec::with_capacity(RECORD_LEN));
        out.extend_from_slice(&self.key.secret);
        out.extend_from_slice(&self.key.chain_code);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.pin_hash);
        out
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != RECORD_LEN {
            return None;
        }
        Some(MasterRecord {
            key: ExtendedKey {
                secret: bytes[..32].try_into().ok()?,
                chain_code: bytes[32..64].try_into().ok()?,
            },
            salt: bytes[64..80].try_into().ok()?,
            pin_hash: bytes[80..112].try_into().ok()?,
        })
    }

    fn check_pin(&self, pin: &[u8; 4]) -> TaResult<()> {
        if bool::from(pin_hash(pin, &self.salt).ct_eq(&self.pin_hash)) {
            Ok(())
        } else {
            Err(TaError::Code(WRONG_PIN))
        }
    }
}

/// The wallet TA. Holds no key material between requests; only one session
/// may be open at a time.
#[derive(Debug, Default)]
pub struct WalletTa {
    session: Option<u32>,
}

use ParamKind::{Memref, None as Empty, ValueIn, ValueOut};

impl WalletTa {
    fn load(env: &mut TaEnv<'_>) -> TaResult<Option<MasterRecord>> {
        match env.storage_get(MASTER_OBJECT_ID) {
            Ok(bytes) => {
                let bytes = Zeroizing::new(bytes);
                MasterRecord::decode(&bytes)
                    .map(Some)
                    .ok_or(TaError::Code(ReturnCode::ERROR_TAMPERED))
            }
            Err(internal_api::StorageError::ItemNotFound) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn load_checked(env: &mut TaEnv<'_>, pin: &[u8; 4]) -> TaResult<MasterRecord> {
        let record = Self::load(env)?.ok_or(TaError::Code(NO_KEY))?;
        record.check_pin(pin)?;
        Ok(record)
    }

    fn store_new(env: &mut TaEnv<'_>, key: ExtendedKey, pin: &[u8; 4]) -> TaResult<()> {
        let mut salt = [0u8; 16];
        env.random_bytes(&mut salt);
        let record = MasterRecord::new(key, pin, salt);
        env.storage_put(MASTER_OBJECT_ID, &record.encode())?;
        Ok(())
    }

    fn key_from_mnemonic(m: &Mnemonic) -> TaResult<ExtendedKey> {
        ExtendedKey::master_from_seed(&m.to_seed("")[..]).map_err(|_| TaError::Code(ReturnCode::ERROR_GENERIC))
    }

    fn child(record: &MasterRecord, index: u32) -> TaResult<ExtendedKey> {
        record
            .key
            .derive_hardened(index)
            .map_err(|_| TaError::Code(ReturnCode::ERROR_GENERIC))
    }

    fn cmd_check(env: &mut TaEnv<'_>, pin: &[u8; 4], params: &mut Params) -> TaResult<()> {
        env.uart("Check if there's a existing master key...");
        let exists = match Self::load(env)? {
            Some(record) => {
                record.check_pin(pin)?;
                env.uart("Master Key exists");
                1
            }
            None => {
                env.uart("None master key exists");
                0
            }
        };
        params.set_value(3, exists, 0)
    }

    fn cmd_generate(env: &mut TaEnv<'_>, pin: &[u8; 4], params: &mut Params) -> TaResult<()> {
        env.uart("Generating new master key...");
        if Self::load(env)?.is_some() {
            return Err(TaError::Code(ALREADY_EXISTS));
        }
        let mut entropy = Zeroizing::new([0u8; 16]);
        env.random_bytes(&mut entropy[..]);
        let mnemonic = Mnemonic::from_entropy(&entropy);
        let phrase = mnemonic.phrase();
        let (_, out_len) = env.mem.grant(2).ok_or(TaError::BAD_PARAMETERS)?;
        if phrase.len() > out_len {
            return Err(TaError::Code(ReturnCode::ERROR_SHORT_BUFFER));
        }
        let key = Self::key_from_mnemonic(&mnemonic)?;
        Self::store_new(env, key, pin)?;
        env.mem.memref_write(2, phrase.as_bytes())?;
        env.uart("Here's your wallet mnemonic!");
        params.set_value(3, phrase.len() as u32, 0)
    }

    fn cmd_derive(env: &mut TaEnv<'_>, pin: &[u8; 4], params: &mut Params) -> TaResult<()> {
        env.uart("Deriving master key from your mnemonic...");
        let raw = Zeroizing::new(env.mem.memref_read(1)?);
        let text = core::str::from_utf8(&raw).map_err(|_| TaError::Code(INVALID_MNEMONIC))?;
        let mnemonic = Mnemonic::parse(text).map_err(|_| TaError::Code(INVALID_MNEMONIC))?;
        let key = Self::key_from_mnemonic(&mnemonic)?;
        match Self::load(env)? {
            Some(existing) => {
                existing.check_pin(pin)?;
                if existing.key != key {
                    return Err(TaError::Code(ALREADY_EXISTS));
                }
            }
            None => Self::store_new(env, key, pin)?,
        }
        env.uart("Success!");
        params.set_value(3, 0, 0)
    }

    fn cmd_delete(env: &mut TaEnv<'_>, pin: &[u8; 4], params: &mut Params) -> TaResult<()> {
        env.uart("Check if there's a existing master key...");
        let record = Self::load(env)?.ok_or(TaError::Code(ReturnCode::ERROR_ITEM_NOT_FOUND))?;
        record.check_pin(pin)?;
        env.storage_delete(MASTER_OBJECT_ID)?;
        env.uart("Master key exists, erase success");
        params.set_value(3, 0, 0)
    }

    fn cmd_sign(env: &mut TaEnv<'_>, pin: &[u8; 4], index: u32, params: &mut Params) -> TaResult<()> {
        env.uart("before sign raw tx");
        let record = Self::load_checked(env, pin)?;
        let raw_tx = env.mem.memref_read(1)?;
        if raw_tx.is_empty() {
            return Err(TaError::BAD_PARAMETERS);
        }
        let child = Self::child(&record, index)?;
        Self::print_pubkey(env, &child);
        let signed = sign_transaction(&child, &raw_tx);
        env.mem.memref_write(2, signed.as_bytes())?;
        env.uart("after sign raw tx");
        env.uart("Transaction has been successfully signed.");
        params.set_value(3, signed.len() as u32, 0)
    }

    fn cmd_address(env: &mut TaEnv<'_>, pin: &[u8; 4], index: u32, params: &mut Params) -> TaResult<()> {
        let record = Self::load_checked(env, pin)?;
        let child = Self::child(&record, index)?;
        Self::print_pubkey(env, &child);
        env.uart("get_bitcoin_address");
        let address = p2pkh_address(&child.public_key());
        env.mem.memref_write(2, address.as_bytes())?;
        env.uart(&address);
        params.set_value(3, address.len() as u32, 0)
    }

    fn print_pubkey(env: &mut TaEnv<'_>, child: &ExtendedKey) {
        let pk = child.public_key();
        env.uart(&format!("Chld_pk_x:{}", hex::encode(&pk[1..])));
    }
}

impl TrustedApp for WalletTa {
    fn open_session(&mut self, _env: &mut TaEnv<'_>, session: u32, _params: &mut Params) -> TaResult<()> {
        if self.session.is_some() {
            return Err(TaError::Code(ReturnCode::ERROR_BUSY));
        }
        self.session = Some(session);
        Ok(())
    }

    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _session: u32, cmd_id: u32, params: &mut Params) -> TaResult<()> {
        let expected = match cmd_id {
            CMD_CHECK_EXISTS | CMD_DELETE => [ValueIn, Empty, Empty, ValueOut],
            CMD_GENERATE | CMD_GET_ADDRESS => [ValueIn, Empty, Memref, ValueOut],
            CMD_DERIVE_FROM_MNEMONIC => [ValueIn, Memref, Empty, ValueOut],
            CMD_SIGN_TRANSACTION => [ValueIn, Memref, Memref, ValueOut],
            _ => return Err(TaError::BAD_PARAMETERS),
        };
        params.expect(expected)?;
        let (pin_word, index) = params.value(0)?;
        let pin = unpack_pin(pin_word)?;
        env.uart(&format!("Choice from MW: {cmd_id}"));
        match cmd_id {
            CMD_CHECK_EXISTS => Self::cmd_check(env, &pin, params),
            CMD_GENERATE => Self::cmd_generate(env, &pin, params),
            CMD_DERIVE_FROM_MNEMONIC => Self::cmd_derive(env, &pin, params),
            CMD_DELETE => Self::cmd_delete(env, &pin, params),
            CMD_SIGN_TRANSACTION => Self::cmd_sign(env, &pin, index, params),
            _ => Self::cmd_address(env, &pin, index, params),
        }
    }

    fn close_session(&mut self, env: &mut TaEnv<'_>, session: u32) {
        if self.session == Some(session) {
            self.session = None;
        }
        env.uart("Goodbye!");
    }

    fn destroy(&mut self, env: &mut TaEnv<'_>) {
        env.uart("TA_DestroyEntryPoint has been called");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ZERO_MNEMONIC: &str =
        "abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon about";


    // Frozen from the independent pure-Python oracle in tests/oracles.
    const SEED: &str = "5eb00bbddcf069084889a8ab9155568165f5c453ccb85e70811aaed6f6da5fc19a5ac40b389cd370d086206dec8aa6c43daea6690f20ad3d8d48b2d2ce9e38e4";
    const MASTER_SK: &str = "1837c1be8e2995ec11cda2b066151be2cfb48adf9e47b151d46adab3a21cdf67";
    const MASTER_CC: &str = "7923408dadd3c7b56eed15567707ae5e5dca089de972e07f3b860450e2a3b70e";
    const CHILD0_SK: &str = "c08cf331996482c06db3d259ff99be4bf7083824d53185e33191ee7ceb2bf96f";
    const CHILD0_CC: &str = "f1c03f5ff97108912fd56761d3fada8879e4173aba45f10da4bbd94b1c497160";
    const CHILD0_PUB: &str = "027f1d87730e460e921b382242911565bf93daf2081ed685b2edd1d01176b2c13c";
    const CHILD0_ADDR: &str = "15E71CDmjirqPGsS9bzuvKXHPCwnwwn93T";
    const CHILD1_SK: &str = "3ef02fc53000742891fc90458ba9edc8363d8f1f267e326b1078710c7db34de5";
    const CHILD1_CC: &str = "43cc4bca59c666a5f79265148125802ed2cec46df1c5ca8e6a058dab525a73f1";
    const CHILD1_PUB: &str = "03b5184a526dac6abda3d8d54a541471ce83e8c2260d56706053e2780922319f5e";
    const CHILD1_ADDR: &str = "19H1tZfC5doXVdacEdD3sLrYTTUJUu2G6v";
    const RAW_TX: &[u8] = b"teeod wallet test transaction";
    const TX_DIGEST: &str = "72e4638111519c2b4eb7d1207335a0eaf8fd8048006c2988acdb4277eaecbbbe";
    const CHILD1_SIG: &str = "ef362e1b1f6386fa1148ba296068463590f6a1a418262f397fcfcdef2dd315e305e824348f208e4b513d2cd5cacbd4cd989b0ecb6c41b834375573de2ffb022c";

    fn reference_master() -> ExtendedKey {
        let seed = Mnemonic::parse(ZERO_MNEMONIC).unwrap().to_seed("");
        assert_eq!(hex::encode(&seed[..]), SEED);
        ExtendedKey::master_from_seed(&seed[..]).unwrap()
    }

    #[test]
    fn master_key_matches_oracle() {
        let m = reference_master();
        assert_eq!(hex::encode(m.secret), MASTER_SK);
        assert_eq!(hex::encode(m.chain_code), MASTER_CC);
    }

    #[test]
    fn hardened_children_match_oracle() {
        let m = reference_master();
        for (i, sk, cc, pk, addr) in [
            (0, CHILD0_SK, CHILD0_CC, CHILD0_PUB, CHILD0_ADDR),
            (1, CHILD1_SK, CHILD1_CC, CHILD1_PUB, CHILD1_ADDR),
        ] {
            let child = m.derive_hardened(i).unwrap();
            assert_eq!(hex::encode(child.secret), sk);
            assert_eq!(hex::encode(child.chain_code), cc);
            assert_eq!(hex::encode(child.public_key()), pk);
            assert_eq!(p2pkh_address(&child.public_key()), addr);
        }
    }

    #[test]
    fn signature_matches_oracle_and_verifies() {
        let child = reference_master().derive_hardened(1).unwrap();
        assert_eq!(hex::encode(double_sha256(RAW_TX)), TX_DIGEST);
        let signed = sign_transaction(&child, RAW_TX);
        assert_eq!(signed.len(), SIGNATURE_HEX_LEN);
        assert_eq!(&signed[..128], CHILD1_SIG);
        assert!(signed.ends_with("01"));
        let sig: [u8; 64] = hex::decode(&signed[..128]).unwrap().try_into().unwrap();
        assert!(internal_api::ecdsa_verify(Curve::Secp256k1, &child.public_key(), &double_sha256(RAW_TX), &sig).unwrap());
        assert_eq!(sign_transaction(&child, RAW_TX), signed);
    }

    #[test]
    fn address_decodes_with_version_zero() {
        let decoded = bs58::decode(CHILD0_ADDR).with_check(Some(0x00)).into_vec().unwrap();
        assert_eq!(decoded.len(), 21);
        assert_eq!(&decoded[1..], &hash160(&hex::decode(CHILD0_PUB).unwrap()));
    }

    #[test]
    fn wordlist_shape() {
        let list = wordlist();
        assert_eq!(list.len(), 2048);
        assert!(list.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(internal_api::sha256(WORDLIST.as_bytes()).to_vec(),
            hex::decode("2f5eed53a4727b4bf8880d8f3f199efc90e58503646d9ff8eff3a2ed3b24dbda").unwrap());
    }

    #[test]
    fn zero_entropy_mnemonic() {
        let m = Mnemonic::from_entropy(&[0; 16]);
        assert_eq!(m.phrase().as_str(), ZERO_MNEMONIC);
        assert_eq!(Mnemonic::parse(ZERO_MNEMONIC).unwrap(), m);
        let m = Mnemonic::from_entropy(&[0x7f; 16]);
        assert_eq!(
            m.phrase().as_str(),
            "legal winner thank year wave sausage worth useful legal winner thank yellow"
        );
    }

    #[test]
    fn mnemonic_errors() {
        let eleven = ZERO_MNEMONIC.rsplit_once(' ').unwrap().0;
        assert_eq!(Mnemonic::parse(eleven), Err(MnemonicError::WordCount(11)));
        let bad_word = ZERO_MNEMONIC.replace("about", "nango");
        assert!(matches!(Mnemonic::parse(&bad_word), Err(MnemonicError::UnknownWord(_))));
        let bad_sum = ZERO_MNEMONIC.replace("about", "abandon");
        assert_eq!(Mnemonic::parse(&bad_sum), Err(MnemonicError::Checksum));
    }

    #[test]
    fn pin_packing() {
        assert_eq!(pack_pin("1234"), Some(u32::from_le_bytes(*b"1234")));
        assert_eq!(pack_pin("123"), None);
        assert_eq!(pack_pin("12a4"), None);
        assert_eq!(unpack_pin(pack_pin("0000").unwrap()).unwrap(), *b"0000");
        assert!(unpack_pin(1234).is_err());
    }

    #[test]
    fn master_record_round_trip() {
        let key = ExtendedKey { secret: [1; 32], chain_code: [2; 32] };
        let rec = MasterRecord::new(key.clone(), b"1234", [3; 16]);
        let back = MasterRecord::decode(&rec.encode()).unwrap();
        assert!(back.key == key);
        assert!(back.check_pin(b"1234").is_ok());
        assert_eq!(back.check_pin(b"4321"), Err(TaError::Code(WRONG_PIN)));
        assert!(MasterRecord::decode(&[0; 10]).is_none());
    }

    #[test]
    fn secrets_are_redacted_in_debug() {
        let key = ExtendedKey { secret: [0xAB; 32], chain_code: [0xCD; 32] };
        assert_eq!(format!("{key:?}"), "ExtendedKey(<redacted>)");
        assert_eq!(format!("{:?}", Mnemonic::from_entropy(&[0; 16])), "Mnemonic(<12 words>)");
    }

    mod on_fabric {
        use super::*;
        use crate::fabric::{Fabric, FabricConfig, FabricEvent};
        use crate::protocol::{MailboxFrame, OperationId, Param, ParamType, TaImage};
        use crate::tas::kind;
        use alloc::vec;

        struct Run {
            rc: ReturnCode,
            out_value: u32,
            out: Vec<u8>,
        }

        fn fabric() -> Fabric {
            Fabric::with_builtins(FabricConfig { enclave_count: 2, cm_capacity: 1 << 16, ..FabricConfig::default() })
        }

        /// One open/invoke/close cycle, as the client application does it.
        fn run(f: &mut Fabric, cmd: u32, pin: &str, index: u32, input: &[u8]) -> Run {
            let image = TaImage::new(WALLET_UUID, kind::WALLET, Vec::new()).encode().unwrap();
            let block = f.cm_stage(&image).unwrap();
            let (slot, open) = f.open_session(WALLET_UUID, block, &MailboxFrame::new(OperationId::Open, 0)).unwrap();
            f.cm_release(block.offset);
            assert_eq!(open.return_code, ReturnCode::SUCCESS);
            let mut frame = MailboxFrame::new(OperationId::Invoke, open.session_id);
            frame.cmd_id = cmd;
            let kinds = match cmd {
                1 | 4 => [ValueIn, Empty, Empty, ValueOut],
                2 | 6 => [ValueIn, Empty, Memref, ValueOut],
                3 => [ValueIn, Memref, Empty, ValueOut],
                _ => [ValueIn, Memref, Memref, ValueOut],
            };
            frame.param_type = ParamType::new(kinds);
            frame.set_param(0, Param::Value { kind: ValueIn, a: pack_pin(pin).unwrap(), b: index });
            if kinds[1] == Memref {
                f.enclave_mut(slot).shm_write(0, input).unwrap();
                frame.set_param(1, Param::Memref { offset: 0, len: input.len() as u32 });
            }
            if kinds[2] == Memref {
                f.enclave_mut(slot).shm_write(1024, &[0; 256]).unwrap();
                frame.set_param(2, Param::Memref { offset: 1024, len: 256 });
            }
            frame.set_param(3, Param::Value { kind: ValueOut, a: 0, b: 0 });
            let reply = f.comm_dispatch(slot, &frame);
            let out_value = reply.gp[6];
            let out = f.enclave(slot).shm_read(1024, out_value as usize).unwrap().to_vec();
            f.close_session(slot, open.session_id);
            assert!(f.enclave(slot).is_zeroized());
            Run { rc: reply.return_code, out_value, out }
        }

        #[test]
        fn client_command_sequence() {
            let mut f = fabric();
            let r = run(&mut f, 1, "1234", 0, &[]);
            assert_eq!((r.rc, r.out_value), (ReturnCode::SUCCESS, 0));
            let r = run(&mut f, 2, "1234", 0, &[]);
            assert_eq!(r.rc, ReturnCode::SUCCESS);
            let phrase = String::from_utf8(r.out).unwrap();
            assert!(Mnemonic::parse(&phrase).is_ok());
            let r = run(&mut f, 5, "1234", 1, RAW_TX);
            assert_eq!((r.rc, r.out.len()), (ReturnCode::SUCCESS, SIGNATURE_HEX_LEN));
            let r = run(&mut f, 6, "1234", 1, &[]);
            assert_eq!(r.rc, ReturnCode::SUCCESS);
            assert!(bs58::decode(&r.out).with_check(Some(0)).into_vec().is_ok());
            assert_eq!(run(&mut f, 4, "1234", 0, &[]).rc, ReturnCode::SUCCESS);
            let r = run(&mut f, 1, "1234", 0, &[]);
            assert_eq!((r.rc, r.out_value), (ReturnCode::SUCCESS, 0));
            let destroys = f.events().iter().filter(|e| matches!(e, FabricEvent::Destroy { .. })).count();
            assert_eq!(destroys, 6);
            assert_eq!(f.state().load_count(), 6);
        }

        #[test]
        fn reference_mnemonic_reproduces_oracle() {
            let mut f = fabric();
            assert_eq!(run(&mut f, 3, "0000", 0, ZERO_MNEMONIC.as_bytes()).rc, ReturnCode::SUCCESS);
            // Same mnemonic again is a no-op; another mnemonic is refused.
            assert_eq!(run(&mut f, 3, "0000", 0, ZERO_MNEMONIC.as_bytes()).rc, ReturnCode::SUCCESS);
            let other = Mnemonic::from_entropy(&[0x7f; 16]);
            assert_eq!(run(&mut f, 3, "0000", 0, other.phrase().as_bytes()).rc, ALREADY_EXISTS);
            assert_eq!(run(&mut f, 6, "0000", 0, &[]).out, CHILD0_ADDR.as_bytes());
            assert_eq!(run(&mut f, 6, "0000", 1, &[]).out, CHILD1_ADDR.as_bytes());
            let sig = run(&mut f, 5, "0000", 1, RAW_TX).out;
            assert_eq!(&sig[..128], CHILD1_SIG.as_bytes());
        }

        #[test]
        fn error_paths() {
            let mut f = fabric();
            assert_eq!(run(&mut f, 4, "1234", 0, &[]).rc, ReturnCode::ERROR_ITEM_NOT_FOUND);
            assert_eq!(run(&mut f, 5, "1234", 0, RAW_TX).rc, NO_KEY);
            assert_eq!(run(&mut f, 6, "1234", 0, &[]).rc, NO_KEY);
            let eleven = ZERO_MNEMONIC.rsplit_once(' ').unwrap().0;
            assert_eq!(run(&mut f, 3, "1234", 0, eleven.as_bytes()).rc, INVALID_MNEMONIC);
            assert_eq!(run(&mut f, 2, "1234", 0, &[]).rc, ReturnCode::SUCCESS);
            assert_eq!(run(&mut f, 2, "1234", 0, &[]).rc, ALREADY_EXISTS);
            assert_eq!(run(&mut f, 1, "9999", 0, &[]).rc, WRONG_PIN);
            assert_eq!(run(&mut f, 4, "9999", 0, &[]).rc, WRONG_PIN);
            assert_eq!(run(&mut f, 1, "1234", 0, &[]).out_value, 1);
            assert_eq!(run(&mut f, 5, "1234", 0, &[]).rc, ReturnCode::ERROR_BAD_PARAMETERS);
        }

        #[test]
        fn second_session_is_busy() {
            let mut f = fabric();
            let image = TaImage::new(WALLET_UUID, kind::WALLET, vec![]).encode().unwrap();
            let block = f.cm_stage(&image).unwrap();
            let open = MailboxFrame::new(OperationId::Open, 0);
            let (slot, first) = f.open_session(WALLET_UUID, block, &open).unwrap();
            let (slot2, second) = f.open_session(WALLET_UUID, block, &open).unwrap();
            assert_eq!(slot, slot2);
            assert_eq!(first.return_code, ReturnCode::SUCCESS);
            assert_eq!((second.return_code, second.session_id), (ReturnCode::ERROR_BUSY, 0));
            assert!(f.state().is_taken(slot));
            f.close_session(slot, first.session_id);
            assert!(!f.state().is_taken(slot));
        }

        #[test]
        fn uart_never_carries_secrets() {
            let mut f = fabric();
            run(&mut f, 3, "0000", 0, ZERO_MNEMONIC.as_bytes());
            run(&mut f, 5, "0000", 1, RAW_TX);
            run(&mut f, 6, "0000", 1, &[]);
            let lines = f.enclave_mut(0).uart().lines().to_vec();
            let text = lines.join("\n");
            for secret in [MASTER_SK, MASTER_CC, CHILD1_SK, CHILD1_CC] {
                assert!(!text.contains(secret));
            }
            assert!(text.contains(CHILD1_ADDR));
            assert_eq!(lines.iter().filter(|l| *l == "TA_DestroyEntryPoint has been called").count(), 3);
            assert_eq!(lines.last().unwrap(), "TA_DestroyEntryPoint has been called");
        }
    }
}
