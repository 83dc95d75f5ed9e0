//! `teeod` and `wallet` command lines. Both host the fabric and the client
//! in one process.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use teeod_core::protocol::ReturnCode;
use teeod_core::resource_model::{gp_floor_warning, max_enclaves, report};

use crate::bench;
use crate::client::{Context, Direction, ImageSource, Operation, Param};
use crate::config::{load_device_profile, ConfigFile, DmaModel, SimConfig, DEFAULT_NS_PER_BYTE};
use crate::host::HostFabric;
use crate::images;
use crate::wallet_client::{self, WalletArgs, WalletRequest};

/// Storage directory used by wallet commands when none is configured, so
/// that separate invocations see the same key.
pub const DEFAULT_WALLET_STORE: &str = "teeod-store";

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalOpts {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of enclave slots.
    #[arg(long = "enclaves", value_name = "N")]
    pub enclave_count: Option<u32>,
    /// Device profile: "zu3eg" or a profile file.
    #[arg(long)]
    pub device: Option<String>,
    /// Seed for the TEE random generator.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub storage_dir: Option<PathBuf>,
    #[arg(long)]
    pub uart_dir: Option<PathBuf>,
    /// Append fabric events to this file.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

impl GlobalOpts {
    pub fn sim_config(&self) -> anyhow::Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::from_file(&ConfigFile::load(path)?)?,
            None => SimConfig::default(),
        };
        if let Some(n) = self.enclave_count {
            cfg.enclave_count = n;
        }
        if let Some(d) = &self.device {
            cfg.device = load_device_profile(d)?;
        }
        if let Some(s) = self.seed {
            cfg.rng_seed = Some(s);
        }
        if let Some(p) = &self.storage_dir {
            cfg.storage_dir = Some(p.clone());
        }
        if let Some(p) = &self.uart_dir {
            cfg.uart_dir = Some(p.clone());
        }
        if let Some(p) = &self.event_log {
            cfg.event_log = Some(p.clone());
        }
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "teeod", version, about = "FPGA-hosted TEE simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Demo {
    Increment,
    Shmem16,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the fabric from the configuration and report its slots.
    Boot,
    /// Open a built-in TA, invoke it once and close it.
    Demo {
        name: Demo,
        /// Input for the increment TA.
        #[arg(long, default_value_t = 41)]
        value: u32,
    },
    /// Time cold open, warm open, raw invoke, shared-memory invoke and close.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
        iterations: usize,
        /// DMA cost per byte; 0 disables the model. Defaults to the
        /// configured model, or 250 ns when none is configured.
        #[arg(long)]
        ns_per_byte: Option<u64>,
    },
    /// Utilization table for N enclaves on the device.
    Resources {
        #[arg(long = "enclaves", value_name = "N")]
        enclaves: u32,
    },
    /// Run one wallet command.
    Wallet(WalletArgs),
}

#[derive(Parser, Debug)]
#[command(name = "wallet", about = "Bitcoin wallet client")]
pub struct WalletCli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(flatten)]
    pub args: WalletArgs,
}

fn parse<P: Parser>(args: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write, err: &mut dyn Write) -> Result<P, i32> {
    P::try_parse_from(args).map_err(|e| {
        let text = e.render().to_string();
        if e.use_stderr() {
            let _ = write!(err, "{text}");
        } else {
            let _ = write!(out, "{text}");
        }
        e.exit_code()
    })
}

/// Entry point of `teeod`; returns the exit code.
pub fn run_teeod(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli: Cli = match parse(args, out, err) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match execute(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

/// Entry point of `wallet`; returns the exit code.
pub fn run_wallet(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli: WalletCli = match parse(args, out, err) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match wallet(&cli.global, &cli.args, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Boot => boot(&cli.global, out),
        Command::Demo { name, value } => demo(&cli.global, *name, *value, out),
        Command::Bench {
            iterations,
            ns_per_byte,
        } => run_bench(&cli.global, *iterations, *ns_per_byte, out),
        Command::Resources { enclaves } => resources(&cli.global, *enclaves, out, err),
        Command::Wallet(args) => wallet(&cli.global, args, out, err),
    }
}

fn boot(global: &GlobalOpts, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = global.sim_config()?;
    let fabric = HostFabric::boot(&cfg)?;
    let ceiling = max_enclaves(&cfg.device);
    writeln!(
        out,
        "booted {} enclave(s) on {} (device ceiling {}, limited by {})",
        fabric.enclave_count(),
        cfg.device.name,
        ceiling.count,
        ceiling.binding.label()
    )?;
    let state = fabric.state();
    for r in state.enclaves_list() {
        let rt_state = fabric.inspect(r.slot_index, |rt| rt.state());
        writeln!(
            out,
            "slot={} tcm_base={:#x} state={:?} core={:?}",
            r.slot_index, r.tcm_base, r.state, rt_state
        )?;
    }
    writeln!(out, "dma={}", cfg.dma.describe())?;
    if let Some(w) = gp_floor_warning(&cfg.device) {
        writeln!(out, "{w}")?;
    }
    Ok(0)
}

fn demo(global: &GlobalOpts, name: Demo, value: u32, out: &mut dyn Write) -> anyhow::Result<i32> {
    let fabric = HostFabric::boot(&global.sim_config()?)?;
    let ctx = Context::new(&fabric);
    match name {
        Demo::Increment => {
            let (uuid, image) = images::increment();
            let mut s = ctx.open_session(uuid, ImageSource::Bytes(&image))?;
            let mut op = Operation::new([Param::value_inout(value, 0), Param::None, Param::None, Param::None]);
            let r = ctx.invoke_command(&s, 0, &mut op);
            ctx.close_session(&mut s)?;
            r?;
            let (a, _) = op.params[0].value().unwrap_or_default();
            writeln!(out, "{a}")?;
        }
        Demo::Shmem16 => {
            let (uuid, image) = images::shmem16();
            let mut s = ctx.open_session(uuid, ImageSource::Bytes(&image))?;
            let mut shm = ctx.allocate_shared_memory(&s, 16, Direction::Out)?;
            let mut op = Operation::new([Param::Memref(&mut shm), Param::None, Param::None, Param::None]);
            let r = ctx.invoke_command(&s, 0, &mut op);
            ctx.close_session(&mut s)?;
            r?;
            writeln!(out, "{}", hex::encode(&shm.buffer))?;
        }
    }
    Ok(0)
}

fn run_bench(
    global: &GlobalOpts,
    iterations: usize,
    ns_per_byte: Option<u64>,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let mut cfg = global.sim_config()?;
    cfg.dma = match ns_per_byte {
        Some(0) => DmaModel::None,
        Some(n) => DmaModel::PerByte { ns_per_byte: n },
        None if cfg.dma == DmaModel::None => DmaModel::PerByte {
            ns_per_byte: DEFAULT_NS_PER_BYTE,
        },
        None => cfg.dma,
    };
    let fabric = HostFabric::boot(&cfg)?;
    let report = bench::run(&fabric, iterations)?;
    writeln!(out, "{report}")?;
    Ok(0)
}

fn resources(global: &GlobalOpts, n: u32, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    let device = match &global.device {
        Some(d) => load_device_profile(d)?,
        None => global.sim_config()?.device,
    };
    match report(n, &device) {
        Ok(text) => {
            write!(out, "{text}")?;
            let ceiling = max_enclaves(&device);
            writeln!(
                out,
                "max_enclaves: {} (limited by {})",
                ceiling.count,
                ceiling.binding.label()
            )?;
            if let Some(w) = gp_floor_warning(&device) {
                writeln!(out, "{w}")?;
            }
            Ok(0)
        }
        Err(e) => {
            writeln!(err, "INVALID_N: {e}")?;
            Ok(2)
        }
    }
}

fn wallet(global: &GlobalOpts, args: &WalletArgs, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    let req = match WalletRequest::from_args(args) {
        Ok(r) => r,
        Err(e) => {
            writeln!(err, "usage error: {e}")?;
            writeln!(err, "usage: wallet <command 1-6> <4-digit pin> [-a <args>...]")?;
            return Ok(2);
        }
    };
    let mut cfg = global.sim_config()?;
    if cfg.storage_dir.is_none() {
        cfg.storage_dir = Some(PathBuf::from(DEFAULT_WALLET_STORE));
    }
    let fabric = HostFabric::boot(&cfg)?;
    let ctx = Context::new(&fabric);
    match wallet_client::run(&ctx, &req, out) {
        Ok(_) => Ok(0),
        Err(e) => {
            writeln!(err, "{e}")?;
            Ok(match e.code() {
                Some(c) if c == ReturnCode::ERROR_BAD_PARAMETERS => 2,
                _ => 1,
            })
        }
    }
}
