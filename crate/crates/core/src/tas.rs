//! Built-in trusted applications and the default `ta_kind` registry.

use alloc::boxed::Box;

use crate::enclave::{Params, TaEnv, TaError, TaRegistry, TaResult, TrustedApp};
use crate::protocol::{ParamKind, TaImage};
use crate::wallet::WalletTa;

/// `ta_kind` keys understood by [`BuiltinRegistry`].
pub mod kind {
    pub const INCREMENT: u32 = 1;
    pub const SHMEM16: u32 = 2;
    pub const ECHO: u32 = 3;
    pub const WALLET: u32 = 4;
}

use ParamKind::{Memref, None as Empty, ValueInout, ValueOut};

/// Returns its VALUE_INOUT input plus one (mod 2^32).
#[derive(Debug, Default)]
pub struct IncrementTa;

impl TrustedApp for IncrementTa {
    fn invoke_command(&mut self, _env: &mut TaEnv<'_>, _session: u32, _cmd: u32, params: &mut Params) -> TaResult<()> {
        params.expect([ValueInout, Empty, Empty, Empty])?;
        let (a, b) = params.value(0)?;
        params.set_value(0, a.wrapping_add(1), b)
    }
}

/// Fills a granted MEMREF with the sixteen bytes 0x00..=0x0F.
#[derive(Debug, Default)]
pub struct Shmem16Ta;

pub const SHMEM16_PATTERN: [u8; 16] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];

impl TrustedApp for Shmem16Ta {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _session: u32, _cmd: u32, params: &mut Params) -> TaResult<()> {
        params.expect([Memref, Empty, Empty, Empty])?;
        env.mem.memref_write(0, &SHMEM16_PATTERN)
    }
}

/// Copies parameter 0 into parameter 1 and parameter 2 into parameter 3.
/// Value pairs are copied to VALUE_OUT/INOUT slots, MEMREF bytes to MEMREF
/// slots.
#[derive(Debug, Default)]
pub struct EchoTa;

impl EchoTa {
    fn copy(env: &mut TaEnv<'_>, params: &mut Params, from: usize, to: usize) -> TaResult<()> {
        let kinds = params.kinds();
        match (kinds[from], kinds[to]) {
            (Empty, Empty) => Ok(()),
            (Memref, Memref) => {
                let data = env.mem.memref_read(from)?;
                env.mem.memref_write(to, &data)
            }
            (src, ValueOut | ValueInout) if src.is_value() => {
                let (a, b) = params.value(from)?;
                params.set_value(to, a, b)
            }
            _ => Err(TaError::BAD_PARAMETERS),
        }
    }
}

impl TrustedApp for EchoTa {
    fn invoke_command(&mut self, env: &mut TaEnv<'_>, _session: u32, _cmd: u32, params: &mut Params) -> TaResult<()> {
        Self::copy(env, params, 0, 1)?;
        Self::copy(env, params, 2, 3)
    }
}

/// Maps the built-in kinds to their implementations.
#[derive(Debug, Default, Clone, Copy)]
pub struct BuiltinRegistry;

impl TaRegistry for BuiltinRegistry {
    fn instantiate(&self, image: &TaImage) -> Option<Box<dyn TrustedApp>> {
        Some(match image.ta_kind {
            kind::INCREMENT => Box::new(IncrementTa),
            kind::SHMEM16 => Box::new(Shmem16Ta),
            kind::ECHO => Box::new(EchoTa),
            kind::WALLET => Box::new(WalletTa::default()),
            _ => return None,
        })
    }
}

/// Short name of a built-in kind, for logs.
pub fn kind_name(ta_kind: u32) -> &'static str {
    match ta_kind {
        kind::INCREMENT => "increment",
        kind::SHMEM16 => "shmem16",
        kind::ECHO => "echo",
        kind::WALLET => "wallet",
        _ => "unknown",
    }
}
