//! Simulator configuration: a TOML file of `key = value` pairs, overridden
//! by command-line flags, validated against the device's enclave ceiling.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use teeod_core::internal_api::DeviceKey;
use teeod_core::protocol::{SHM_SIZE, TCM_SIZE};
use teeod_core::resource_model::{max_enclaves, DeviceProfile, Resource, ResourceError, ResourceVector};
use thiserror::Error;

/// Per-byte DMA cost applied to loader copies and shared-memory transfers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum DmaModel {
    #[default]
    None,
    PerByte { ns_per_byte: u64 },
}

/// Cost used by `bench` when no model is configured.
pub const DEFAULT_NS_PER_BYTE: u64 = 250;

impl DmaModel {
    pub fn cost(&self, bytes: usize) -> Duration {
        match self {
            DmaModel::None => Duration::ZERO,
            DmaModel::PerByte { ns_per_byte } => Duration::from_nanos(ns_per_byte.saturating_mul(bytes as u64)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DmaModel::None => "none".to_string(),
            DmaModel::PerByte { ns_per_byte } => format!("per_byte({ns_per_byte}ns)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HukSource {
    Seed(u64),
    Bytes([u8; 32]),
}

impl HukSource {
    pub fn device_key(&self) -> DeviceKey {
        match self {
            HukSource::Seed(s) => DeviceKey::from_seed(*s),
            HukSource::Bytes(b) => DeviceKey::from_bytes(*b),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("enclave_count must be at least 1")]
    NoEnclaves,
    #[error("enclave_count {requested} exceeds the {max} enclaves {device} can host: {binding} would run out")]
    TooManyEnclaves {
        requested: u32,
        max: u32,
        device: String,
        binding: &'static str,
    },
    #[error("{field} is fixed at {required} bytes (got {got})")]
    FixedSize {
        field: &'static str,
        required: usize,
        got: u64,
    },
    #[error("huk must be 64 hex digits")]
    BadHuk,
    #[error("set either huk or huk_seed, not both")]
    HukConflict,
    #[error("device profile: {0}")]
    Device(#[from] ResourceError),
    #[error("cannot create {path}: {source}")]
    CreateDir { path: PathBuf, source: std::io::Error },
}

/// Raw file contents; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub enclave_count: Option<u32>,
    pub device_profile: Option<String>,
    pub tcm_size: Option<u64>,
    pub shm_size: Option<u64>,
    pub storage_dir: Option<PathBuf>,
    pub rng_seed: Option<u64>,
    pub huk: Option<String>,
    pub huk_seed: Option<u64>,
    pub uart_dir: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    pub quarantine_on_fault: Option<bool>,
    pub dma: Option<DmaModel>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}

/// Device profile file: a name plus one capacity per resource class.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    name: String,
    lut: u64,
    lutram: u64,
    ff: u64,
    bram: u64,
    dsp: u64,
    io: u64,
    bufg: u64,
}

/// Resolves a profile name ("zu3eg") or a path to a profile file.
pub fn load_device_profile(spec: &str) -> Result<DeviceProfile, ConfigError> {
    if spec.eq_ignore_ascii_case("zu3eg") {
        return Ok(DeviceProfile::zu3eg());
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let p: ProfileFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        source: Box::new(e),
    })?;
    let profile = DeviceProfile {
        name: p.name,
        capacity: ResourceVector::new(p.lut, p.lutram, p.ff, p.bram, p.dsp, p.io, p.bufg),
    };
    profile.validate()?;
    Ok(profile)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub enclave_count: u32,
    pub device: DeviceProfile,
    /// Sealed objects live here; `None` keeps them in memory.
    pub storage_dir: Option<PathBuf>,
    /// Seeds the TEE random generator; `None` draws from the OS.
    pub rng_seed: Option<u64>,
    pub huk: HukSource,
    pub uart_dir: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    pub quarantine_on_fault: bool,
    pub dma: DmaModel,
    /// Record every frame and shared-window snapshot (tests and audits).
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            enclave_count: 4,
            device: DeviceProfile::zu3eg(),
            storage_dir: None,
            rng_seed: None,
            huk: HukSource::Seed(0),
            uart_dir: None,
            event_log: None,
            quarantine_on_fault: false,
            dma: DmaModel::None,
            trace: false,
        }
    }
}

impl SimConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self, ConfigError> {
        let mut cfg = SimConfig::default();
        cfg.apply(file)?;
        Ok(cfg)
    }

    /// Overlays every key present in `file`.
    pub fn apply(&mut self, file: &ConfigFile) -> Result<(), ConfigError> {
        if let Some(got) = file.tcm_size.filter(|s| *s != TCM_SIZE as u64) {
            return Err(ConfigError::FixedSize {
                field: "tcm_size",
                required: TCM_SIZE,
                got,
            });
        }
        if let Some(got) = file.shm_size.filter(|s| *s != SHM_SIZE as u64) {
            return Err(ConfigError::FixedSize {
                field: "shm_size",
                required: SHM_SIZE,
                got,
            });
        }
        if let Some(n) = file.enclave_count {
            self.enclave_count = n;
        }
        if let Some(d) = &file.device_profile {
            self.device = load_device_profile(d)?;
        }
        if let Some(p) = &file.storage_dir {
            self.storage_dir = Some(p.clone());
        }
        if let Some(s) = file.rng_seed {
            self.rng_seed = Some(s);
        }
        match (&file.huk, file.huk_seed) {
            (Some(_), Some(_)) => return Err(ConfigError::HukConflict),
            (Some(h), None) => {
                let mut b = [0u8; 32];
                hex::decode_to_slice(h, &mut b).map_err(|_| ConfigError::BadHuk)?;
                self.huk = HukSource::Bytes(b);
            }
            (None, Some(s)) => self.huk = HukSource::Seed(s),
            (None, None) => {}
        }
        if let Some(p) = &file.uart_dir {
            self.uart_dir = Some(p.clone());
        }
        if let Some(p) = &file.event_log {
            self.event_log = Some(p.clone());
        }
        if let Some(q) = file.quarantine_on_fault {
            self.quarantine_on_fault = q;
        }
        if let Some(d) = file.dma {
            self.dma = d;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.enclave_count == 0 {
            return Err(ConfigError::NoEnclaves);
        }
        self.device.validate()?;
        let ceiling = max_enclaves(&self.device);
        if self.enclave_count > ceiling.count {
            return Err(ConfigError::TooManyEnclaves {
                requested: self.enclave_count,
                max: ceiling.count,
                device: self.device.name.clone(),
                binding: ceiling.binding.label(),
            });
        }
        Ok(())
    }

    /// Creates the storage and UART directories.
    pub fn prepare_dirs(&self) -> Result<(), ConfigError> {
        for dir in [&self.storage_dir, &self.uart_dir].into_iter().flatten() {
            fs::create_dir_all(dir).map_err(|source| ConfigError::CreateDir {
                path: dir.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Resource that limits the device, for messages.
pub fn binding_resource(device: &DeviceProfile) -> Resource {
    max_enclaves(device).binding
}
