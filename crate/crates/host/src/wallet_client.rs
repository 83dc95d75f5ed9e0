//! Client application for the wallet TA: `wallet <command> <pin> [-a ..]`.
//! Each call is one open, one invoke and one close.

use std::io::{self, Write};

use teeod_core::protocol::{ParamKind, ReturnCode};
use teeod_core::wallet::{
    pack_pin, wallet_error_name, CMD_CHECK_EXISTS, CMD_DELETE, CMD_DERIVE_FROM_MNEMONIC, CMD_GENERATE,
    CMD_GET_ADDRESS, CMD_SIGN_TRANSACTION,
};
use thiserror::Error;

use crate::client::{Context, Direction, ImageSource, Operation, Param, TeecError};
use crate::images;

/// Transaction signed by `wallet 5` when none is given. Treated as opaque
/// bytes by the TA.
pub const DEMO_RAW_TX: &[u8] = b"teeod demo transaction: pay 0.001 BTC";

const MNEMONIC_BUF: usize = 256;
const SIGNATURE_BUF: usize = 256;
const ADDRESS_BUF: usize = 64;

#[derive(clap::Args, Debug, Clone, PartialEq, Eq)]
pub struct WalletArgs {
    /// Command number: 1 check, 2 generate, 3 derive, 4 delete, 5 sign, 6 address.
    pub command: String,
    /// Four-digit access pin.
    pub pin: String,
    /// Child index for 5 and 6 (then an optional hex transaction for 5), or
    /// the twelve mnemonic words for 3.
    #[arg(short = 'a', num_args = 1..)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WalletCommand {
    Check,
    Generate,
    Derive { mnemonic: String },
    Delete,
    Sign { index: u32, raw_tx: Vec<u8> },
    Address { index: u32 },
}

impl WalletCommand {
    pub fn id(&self) -> u32 {
        match self {
            WalletCommand::Check => CMD_CHECK_EXISTS,
            WalletCommand::Generate => CMD_GENERATE,
            WalletCommand::Derive { .. } => CMD_DERIVE_FROM_MNEMONIC,
            WalletCommand::Delete => CMD_DELETE,
            WalletCommand::Sign { .. } => CMD_SIGN_TRANSACTION,
            WalletCommand::Address { .. } => CMD_GET_ADDRESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalletRequest {
    pub command: WalletCommand,
    pub pin: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UsageError {
    #[error("unknown command {0:?}: expected 1 to 6")]
    Command(String),
    #[error("pin must be exactly 4 digits")]
    Pin,
    #[error("command {0} needs -a <child index>")]
    MissingIndex(u32),
    #[error("child index {0:?} is not a number below 2^31")]
    Index(String),
    #[error("transaction must be non-empty hex")]
    RawTx,
    #[error("command 3 needs -a followed by the mnemonic words")]
    MissingMnemonic,
    #[error("unexpected arguments for command {0}")]
    ExtraArgs(u32),
}

fn child_index(cmd: u32, args: &[String]) -> Result<u32, UsageError> {
    let text = args.first().ok_or(UsageError::MissingIndex(cmd))?;
    text.parse::<u32>()
        .ok()
        .filter(|i| *i < 0x8000_0000)
        .ok_or_else(|| UsageError::Index(text.clone()))
}

impl WalletRequest {
    pub fn from_args(args: &WalletArgs) -> Result<Self, UsageError> {
        let id: u32 = args
            .command
            .parse()
            .ok()
            .filter(|c| (1..=6).contains(c))
            .ok_or_else(|| UsageError::Command(args.command.clone()))?;
        let pin = pack_pin(&args.pin).ok_or(UsageError::Pin)?;
        let extra = &args.args;
        let command = match id {
            CMD_CHECK_EXISTS | CMD_GENERATE | CMD_DELETE => {
                if !extra.is_empty() {
                    return Err(UsageError::ExtraArgs(id));
                }
                match id {
                    CMD_CHECK_EXISTS => WalletCommand::Check,
                    CMD_GENERATE => WalletCommand::Generate,
                    _ => WalletCommand::Delete,
                }
            }
            CMD_DERIVE_FROM_MNEMONIC => {
                if extra.is_empty() {
                    return Err(UsageError::MissingMnemonic);
                }
                WalletCommand::Derive {
                    mnemonic: extra.join(" "),
                }
            }
            CMD_SIGN_TRANSACTION => {
                let index = child_index(id, extra)?;
                let raw_tx = match extra.get(1..).unwrap_or_default() {
                    [] => DEMO_RAW_TX.to_vec(),
                    [hex_tx] => hex::decode(hex_tx)
                        .ok()
                        .filter(|t| !t.is_empty())
                        .ok_or(UsageError::RawTx)?,
                    _ => return Err(UsageError::ExtraArgs(id)),
                };
                WalletCommand::Sign { index, raw_tx }
            }
            _ => {
                let index = child_index(id, extra)?;
                if extra.len() > 1 {
                    return Err(UsageError::ExtraArgs(id));
                }
                WalletCommand::Address { index }
            }
        };
        Ok(WalletRequest { command, pin })
    }
}

/// What a successful command produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WalletOutput {
    Exists(bool),
    Mnemonic(String),
    Derived,
    Deleted,
    Signature(String),
    Address(String),
}

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("{}", describe(.0))]
    Tee(TeecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WalletError {
    pub fn code(&self) -> Option<ReturnCode> {
        match self {
            WalletError::Tee(e) => Some(e.code),
            WalletError::Io(_) => None,
        }
    }
}

impl From<TeecError> for WalletError {
    fn from(e: TeecError) -> Self {
        WalletError::Tee(e)
    }
}

fn describe(e: &TeecError) -> String {
    let name = wallet_error_name(e.code)
        .or_else(|| e.code.name())
        .unwrap_or("UNKNOWN");
    format!("wallet command failed: {name} ({:#010x})", e.code.0)
}

fn text_of(buf: &[u8], len: u32) -> String {
    let len = (len as usize).min(buf.len());
    String::from_utf8_lossy(&buf[..len]).into_owned()
}

/// Runs one command: open, invoke, close. Prints the client's lines to
/// `out` and returns what the TA produced.
pub fn run(ctx: &Context<'_>, req: &WalletRequest, out: &mut dyn Write) -> Result<WalletOutput, WalletError> {
    let (uuid, image) = images::wallet();
    let mut session = ctx.open_session(uuid, ImageSource::Bytes(&image))?;
    let result = invoke(ctx, &session, req, out);
    let closed = ctx.close_session(&mut session);
    let output = result?;
    closed?;
    Ok(output)
}

fn invoke(
    ctx: &Context<'_>,
    session: &crate::client::Session,
    req: &WalletRequest,
    out: &mut dyn Write,
) -> Result<WalletOutput, WalletError> {
    let index = match req.command {
        WalletCommand::Sign { index, .. } | WalletCommand::Address { index } => index,
        _ => 0,
    };
    let p0 = || Param::Value {
        kind: ParamKind::ValueIn,
        a: req.pin,
        b: index,
    };
    let cmd = req.command.id();
    match &req.command {
        WalletCommand::Check => {
            writeln!(out, "Check if there's a existing master key...")?;
            let mut op = Operation::new([p0(), Param::None, Param::None, Param::value_out()]);
            ctx.invoke_command(session, cmd, &mut op)?;
            let exists = op.params[3].value().is_some_and(|(a, _)| a != 0);
            if exists {
                writeln!(out, "Master key exists")?;
            } else {
                writeln!(out, "None master key exists")?;
            }
            Ok(WalletOutput::Exists(exists))
        }
        WalletCommand::Generate => {
            writeln!(out, "Generating new master key...")?;
            let mut shm = ctx.allocate_shared_memory(session, MNEMONIC_BUF, Direction::Out)?;
            let mut op = Operation::new([p0(), Param::None, Param::Memref(&mut shm), Param::value_out()]);
            ctx.invoke_command(session, cmd, &mut op)?;
            let len = op.params[3].value().map_or(0, |(a, _)| a);
            let phrase = text_of(&shm.buffer, len);
            shm.buffer.fill(0);
            ctx.release_shared_memory(shm);
            writeln!(out, "Here's your wallet mnemonic!")?;
            writeln!(out, "{phrase}")?;
            Ok(WalletOutput::Mnemonic(phrase))
        }
        WalletCommand::Derive { mnemonic } => {
            writeln!(out, "Deriving master key from your mnemonic...")?;
            let mut shm = ctx.allocate_shared_memory(session, mnemonic.len(), Direction::In)?;
            shm.buffer.copy_from_slice(mnemonic.as_bytes());
            let mut op = Operation::new([p0(), Param::Memref(&mut shm), Param::None, Param::value_out()]);
            let r = ctx.invoke_command(session, cmd, &mut op);
            shm.buffer.fill(0);
            ctx.release_shared_memory(shm);
            r?;
            writeln!(out, "Success!")?;
            Ok(WalletOutput::Derived)
        }
        WalletCommand::Delete => {
            writeln!(out, "Check if there's a existing master key...")?;
            let mut op = Operation::new([p0(), Param::None, Param::None, Param::value_out()]);
            ctx.invoke_command(session, cmd, &mut op)?;
            writeln!(out, "Master key exists, erase success")?;
            Ok(WalletOutput::Deleted)
        }
        WalletCommand::Sign { index, raw_tx } => {
            writeln!(out, "Sending transaction for signing.")?;
            writeln!(out, "Attempt to issue transactions from {index} child account...")?;
            let mut tx = ctx.allocate_shared_memory(session, raw_tx.len(), Direction::In)?;
            tx.buffer.copy_from_slice(raw_tx);
            let mut sig = ctx.allocate_shared_memory(session, SIGNATURE_BUF, Direction::Out)?;
            let mut op = Operation::new([p0(), Param::Memref(&mut tx), Param::Memref(&mut sig), Param::value_out()]);
            ctx.invoke_command(session, cmd, &mut op)?;
            let len = op.params[3].value().map_or(0, |(a, _)| a);
            let signed = text_of(&sig.buffer, len);
            ctx.release_shared_memory(tx);
            ctx.release_shared_memory(sig);
            writeln!(out, "Retrieved signed transaction")?;
            writeln!(out, "{signed}")?;
            Ok(WalletOutput::Signature(signed))
        }
        WalletCommand::Address { .. } => {
            writeln!(out, "Getting bitcoin address...")?;
            let mut shm = ctx.allocate_shared_memory(session, ADDRESS_BUF, Direction::Out)?;
            let mut op = Operation::new([p0(), Param::None, Param::Memref(&mut shm), Param::value_out()]);
            ctx.invoke_command(session, cmd, &mut op)?;
            let len = op.params[3].value().map_or(0, |(a, _)| a);
            let address = text_of(&shm.buffer, len);
            ctx.release_shared_memory(shm);
            writeln!(out, "{address}")?;
            Ok(WalletOutput::Address(address))
        }
    }
}
