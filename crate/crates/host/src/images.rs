//! Images for the built-in TAs, with fixed UUIDs.

use teeod_core::protocol::{TaImage, Uuid};
use teeod_core::tas::kind;
use teeod_core::wallet::WALLET_UUID;

pub const INCREMENT_UUID: Uuid = Uuid::from_bytes([
    0x1c, 0x0e, 0x5a, 0x01, 0x7d, 0x44, 0x4e, 0x11, 0x9b, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x01,
]);
pub const SHMEM16_UUID: Uuid = Uuid::from_bytes([
    0x1c, 0x0e, 0x5a, 0x01, 0x7d, 0x44, 0x4e, 0x11, 0x9b, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x02,
]);
pub const ECHO_UUID: Uuid = Uuid::from_bytes([
    0x1c, 0x0e, 0x5a, 0x01, 0x7d, 0x44, 0x4e, 0x11, 0x9b, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x03,
]);

fn build(uuid: Uuid, ta_kind: u32, tag: &str) -> Vec<u8> {
    TaImage::new(uuid, ta_kind, tag.as_bytes().to_vec())
        .encode()
        .expect("built-in images are small")
}

pub fn increment() -> (Uuid, Vec<u8>) {
    (INCREMENT_UUID, build(INCREMENT_UUID, kind::INCREMENT, "increment"))
}

pub fn shmem16() -> (Uuid, Vec<u8>) {
    (SHMEM16_UUID, build(SHMEM16_UUID, kind::SHMEM16, "shmem16"))
}

pub fn echo() -> (Uuid, Vec<u8>) {
    (ECHO_UUID, build(ECHO_UUID, kind::ECHO, "echo"))
}

pub fn wallet() -> (Uuid, Vec<u8>) {
    (WALLET_UUID, build(WALLET_UUID, kind::WALLET, "bitcoin wallet"))
}
