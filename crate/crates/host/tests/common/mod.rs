//! Test-only TAs and helpers shared by the integration tests.
#![allow(dead_code)]

use teeod::config::SimConfig;
use teeod::host::HostFabric;
use teeod_core::enclave::{Params, Space, TaEnv, TaError, TaRegistry, TaResult, TrustedApp};
use teeod_core::protocol::{ParamKind, TaImage, Uuid, SHM_SIZE, TCM_SIZE};
use teeod_core::tas::BuiltinRegistry;

pub mod kind {
    pub const SENTINEL: u32 = 100;
    pub const SCANNER: u32 = 101;
    pub const PROBER: u32 = 102;
    pub const VAULT: u32 = 103;
}

pub const SENTINEL_BYTE: u8 = 0xA5;

/// Fills its TCM above the image and any granted window bytes with the
/// sentinel.
pub struct SentinelTa;

impl TrustedApp for SentinelTa {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _s: u32, _c: u32, _p: &mut Params) -> TaResult<()> {
        env.mem.write(Space::Tcm, 64, &vec![SENTINEL_BYTE; TCM_SIZE - 64])?;
        for i in 0..4 {
            if let Some((off, len)) = env.mem.grant(i) {
                env.mem.write(Space::Shm, off, &vec![SENTINEL_BYTE; len])?;
            }
        }
        Ok(())
    }
}

/// Reports how many sentinel bytes its TCM holds in parameter 0.
pub struct ScannerTa;

impl TrustedApp for ScannerTa {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _s: u32, _c: u32, params: &mut Params) -> TaResult<()> {
        let tcm = env.mem.read_vec(Space::Tcm, 0, TCM_SIZE)?;
        let hits = tcm.iter().filter(|b| **b == SENTINEL_BYTE).count() as u32;
        params.set_value(0, hits, 0)
    }
}

pub fn xorshift(state: &mut u64) -> u64 {
    let mut x = *state;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    *state = x;
    x
}

/// One access the prober attempts: window offset, length, write or read.
pub fn probe_access(state: &mut u64) -> (usize, usize, bool) {
    let r = xorshift(state);
    let len = 1 + (r as usize >> 16) % 64;
    let offset = (r as usize >> 32) % SHM_SIZE;
    (offset, len, r & 1 == 1)
}

/// Tries `count` random window accesses seeded by parameter 0 and reports
/// (allowed, denied) in parameter 3. Faults are swallowed per access.
pub struct ProberTa;

impl TrustedApp for ProberTa {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _s: u32, _c: u32, params: &mut Params) -> TaResult<()> {
        let (seed, count) = params.value(0)?;
        let mut state = u64::from(seed) | 1 << 40;
        let (mut allowed, mut denied) = (0u32, 0u32);
        for _ in 0..count {
            let (offset, len, write) = probe_access(&mut state);
            let fill = (xorshift(&mut state) & 0xff) as u8;
            let r = if write {
                env.mem.write(Space::Shm, offset, &vec![fill; len])
            } else {
                env.mem.read_vec(Space::Shm, offset, len).map(|_| ())
            };
            match r {
                Ok(()) => allowed += 1,
                Err(_) => denied += 1,
            }
        }
        params.set_value(3, allowed, denied)
    }
}

/// Command 1 seals parameter 1 as "secret", 2 reads it into parameter 2
/// (length in parameter 3), 3 reports the object count in parameter 3.
pub struct VaultTa;

impl TrustedApp for VaultTa {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _s: u32, cmd: u32, params: &mut Params) -> TaResult<()> {
        match cmd {
            1 => {
                let data = env.mem.memref_read(1)?;
                env.storage_put(b"secret", &data)?;
                Ok(())
            }
            2 => {
                let data = env.storage_get(b"secret")?;
                env.mem.memref_write(2, &data)?;
                params.set_value(3, data.len() as u32, 0)
            }
            3 => {
                let n = env.storage_list()?.len() as u32;
                params.set_value(3, n, 0)
            }
            _ => Err(TaError::BAD_PARAMETERS),
        }
    }
}

/// Built-in TAs plus the test TAs above.
pub struct TestRegistry;

impl TaRegistry for TestRegistry {
    fn instantiate(&self, image: &TaImage) -> Option<Box<dyn TrustedApp>> {
        Some(match image.ta_kind {
            kind::SENTINEL => Box::new(SentinelTa),
            kind::SCANNER => Box::new(ScannerTa),
            kind::PROBER => Box::new(ProberTa),
            kind::VAULT => Box::new(VaultTa),
            _ => return BuiltinRegistry.instantiate(image),
        })
    }
}

pub fn test_image(n: u8, ta_kind: u32) -> (Uuid, Vec<u8>) {
    let uuid = Uuid::from_bytes([0x70, n, 0, 0, 0, 0, 0x40, 0, 0x80, 0, 0, 0, 0, 0, 0, n]);
    (uuid, TaImage::new(uuid, ta_kind, b"test ta".to_vec()).encode().unwrap())
}

pub fn boot(cfg: SimConfig) -> HostFabric {
    HostFabric::boot_with_registry(&cfg, Box::new(TestRegistry)).unwrap()
}

pub fn config(enclaves: u32) -> SimConfig {
    SimConfig {
        enclave_count: enclaves,
        rng_seed: Some(7),
        ..SimConfig::default()
    }
}

/// Kinds for memref-free value parameters, for readability in tests.
pub const VALUE_IN: ParamKind = ParamKind::ValueIn;
