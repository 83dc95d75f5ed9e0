//! FPGA resource budget: measured synthesis rows for one to four enclaves,
//! linear extrapolation beyond, and the device fit question.

use alloc::format;
use alloc::string::String;
use core::fmt::Write;
use core::ops::{Add, Mul};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Lut,
    Lutram,
    Ff,
    Bram,
    Dsp,
    Io,
    Bufg,
}

impl Resource {
    pub const ALL: [Resource; 7] = [
        Resource::Lut,
        Resource::Lutram,
        Resource::Ff,
        Resource::Bram,
        Resource::Dsp,
        Resource::Io,
        Resource::Bufg,
    ];

    /// Resources that decide whether a design fits. IO and BUFG stay constant
    /// across the measured designs and are only reported.
    pub const FIT: [Resource; 5] = [
        Resource::Lut,
        Resource::Lutram,
        Resource::Ff,
        Resource::Bram,
        Resource::Dsp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Resource::Lut => "LUT",
            Resource::Lutram => "LUTRAM",
            Resource::Ff => "FF",
            Resource::Bram => "BRAM",
            Resource::Dsp => "DSP",
            Resource::Io => "IO",
            Resource::Bufg => "BUFG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ResourceVector {
    pub lut: u64,
    pub lutram: u64,
    pub ff: u64,
    pub bram: u64,
    pub dsp: u64,
    pub io: u64,
    pub bufg: u64,
}

impl ResourceVector {
    pub const fn new(lut: u64, lutram: u64, ff: u64, bram: u64, dsp: u64, io: u64, bufg: u64) -> Self {
        ResourceVector {
            lut,
            lutram,
            ff,
            bram,
            dsp,
            io,
            bufg,
        }
    }

    pub fn get(&self, r: Resource) -> u64 {
        match r {
            Resource::Lut => self.lut,
            Resource::Lutram => self.lutram,
            Resource::Ff => self.ff,
            Resource::Bram => self.bram,
            Resource::Dsp => self.dsp,
            Resource::Io => self.io,
            Resource::Bufg => self.bufg,
        }
    }

    /// First fit resource (in `Resource::FIT` order) that exceeds `capacity`.
    pub fn first_overflow(&self, capacity: &ResourceVector) -> Option<Resource> {
        Resource::FIT
            .into_iter()
            .find(|r| self.get(*r) > capacity.get(*r))
    }

    pub fn fits(&self, capacity: &ResourceVector) -> bool {
        self.first_overflow(capacity).is_none()
    }

    pub fn dominates(&self, other: &ResourceVector) -> bool {
        Resource::ALL.into_iter().all(|r| self.get(r) >= other.get(r))
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, o: ResourceVector) -> ResourceVector {
        ResourceVector::new(
            self.lut + o.lut,
            self.lutram + o.lutram,
            self.ff + o.ff,
            self.bram + o.bram,
            self.dsp + o.dsp,
            self.io + o.io,
            self.bufg + o.bufg,
        )
    }
}

impl Mul<u64> for ResourceVector {
    type Output = ResourceVector;

    fn mul(self, k: u64) -> ResourceVector {
        ResourceVector::new(
            self.lut * k,
            self.lutram * k,
            self.ff * k,
            self.bram * k,
            self.dsp * k,
            self.io * k,
            self.bufg * k,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub name: String,
    pub capacity: ResourceVector,
}

/// ZU3EG capacities. IO (82) and BUFG (196) are the denominators implied by
/// the measured IO/BUFG percentages.
pub const ZU3EG_CAPACITY: ResourceVector = ResourceVector::new(70_560, 28_800, 141_120, 216, 360, 82, 196);

impl DeviceProfile {
    pub fn zu3eg() -> Self {
        DeviceProfile {
            name: String::from("ZU3EG"),
            capacity: ZU3EG_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<(), ResourceError> {
        match Resource::ALL.into_iter().find(|r| self.capacity.get(*r) == 0) {
            Some(r) => Err(ResourceError::ZeroCapacity(r)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("invalid enclave count {0}: at least one enclave is required")]
    InvalidN(u32),
    #[error("device capacity for {0:?} must be positive")]
    ZeroCapacity(Resource),
}

/// One synthesized design row together with the percentages exactly as
/// they were printed next to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredRow {
    pub enclaves: u32,
    pub usage: ResourceVector,
    pub printed_percent: [&'static str; 7],
}

pub const MEASURED_ROWS: [MeasuredRow; 4] = [
    MeasuredRow {
        enclaves: 1,
        usage: ResourceVector::new(9845, 807, 11532, 34, 3, 2, 3),
        printed_percent: ["13.95", "2.80", "8.17", "15.7", "0.83", "2.4", "1.53"],
    },
    MeasuredRow {
        enclaves: 2,
        usage: ResourceVector::new(14844, 987, 17034, 68, 6, 2, 4),
        printed_percent: ["21.0", "3.4", "12", "31", "1.6", "2.4", "2."],
    },
    MeasuredRow {
        enclaves: 3,
        usage: ResourceVector::new(20146, 1171, 22735, 102, 9, 2, 4),
        printed_percent: ["28.55", "4.0", "16.11", "47.22", "2.5", "2.43", "2."],
    },
    MeasuredRow {
        enclaves: 4,
        usage: ResourceVector::new(24963, 1355, 28026, 136, 12, 2, 4),
        printed_percent: ["35.37", "4.7", "19.85", "62.96", "3.3", "2.4", "2"],
    },
];

/// Average cost of one additional enclave.
pub const ENCLAVE_DELTA: ResourceVector = ResourceVector::new(5000, 180, 5500, 34, 3, 0, 0);

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub enclaves: u32,
    pub usage: ResourceVector,
    /// `usage / capacity * 100`, per resource in `Resource::ALL` order.
    pub percent: [f64; 7],
    /// Printed percentages, only for measured rows on the ZU3EG.
    pub printed_percent: Option<[&'static str; 7]>,
}

impl Utilization {
    pub fn percent_of(&self, r: Resource) -> f64 {
        self.percent[Resource::ALL.iter().position(|x| *x == r).unwrap()]
    }

    /// Percentage text for one resource: the printed figure when one
    /// exists, otherwise two decimals.
    pub fn percent_text(&self, r: Resource) -> String {
        let idx = Resource::ALL.iter().position(|x| *x == r).unwrap();
        match self.printed_percent {
            Some(p) => String::from(p[idx]),
            None => format!("{:.2}", self.percent[idx]),
        }
    }
}

/// Resource usage of a design with `n` enclaves.
pub fn design_usage(n: u32) -> Result<ResourceVector, ResourceError> {
    match n {
        0 => Err(ResourceError::InvalidN(0)),
        1..=4 => Ok(MEASURED_ROWS[n as usize - 1].usage),
        _ => Ok(MEASURED_ROWS[3].usage + ENCLAVE_DELTA * (u64::from(n) - 4)),
    }
}

pub fn utilization(n: u32, device: &DeviceProfile) -> Result<Utilization, ResourceError> {
    let usage = design_usage(n)?;
    let percent = Resource::ALL.map(|r| {
        let cap = device.capacity.get(r);
        if cap == 0 {
            f64::INFINITY
        } else {
            usage.get(r) as f64 / cap as f64 * 100.0
        }
    });
    let printed_percent = (n <= 4 && device.capacity == ZU3EG_CAPACITY)
        .then(|| MEASURED_ROWS[n as usize - 1].printed_percent);
    Ok(Utilization {
        enclaves: n,
        usage,
        percent,
        printed_percent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveCeiling {
    pub count: u32,
    /// Resource that overflows first at `count + 1` enclaves.
    pub binding: Resource,
}

pub fn max_enclaves(device: &DeviceProfile) -> EnclaveCeiling {
    let mut n = 0u32;
    loop {
        let next = design_usage(n + 1).expect("n + 1 >= 1");
        if let Some(binding) = next.first_overflow(&device.capacity) {
            return EnclaveCeiling { count: n, binding };
        }
        n += 1;
    }
}

/// Warning text when the device cannot host the two concurrent TAs a
/// GlobalPlatform-compliant TEE must support.
pub fn gp_floor_warning(device: &DeviceProfile) -> Option<String> {
    let ceiling = max_enclaves(device);
    (ceiling.count < 2).then(|| {
        format!(
            "warning: {} fits only {} enclave(s) (limited by {}); GlobalPlatform requires hosting two TAs at the same time",
            device.name,
            ceiling.count,
            ceiling.binding.label()
        )
    })
}

/// Renders a utilization table for `n` enclaves.
pub fn report(n: u32, device: &DeviceProfile) -> Result<String, ResourceError> {
    let u = utilization(n, device)?;
    let mut out = String::new();
    let source = if u.enclaves <= 4 { "measured" } else { "extrapolated" };
    let _ = writeln!(
        out,
        "{:<10}{} Enclave{} ({}, {})",
        "Resources",
        n,
        if n == 1 { "" } else { "s" },
        device.name,
        source
    );
    for r in Resource::ALL {
        let _ = writeln!(
            out,
            "{:<10}{} ({}%)",
            r.label(),
            u.usage.get(r),
            u.percent_text(r)
        );
    }
    let fits = u.usage.fits(&device.capacity);
    let _ = writeln!(out, "fits: {}", if fits { "yes" } else { "no" });
    let _ = writeln!(out, "note: IO and BUFG are reported but excluded from the fit check");
    Ok(out)
}
