//! Latency scenarios: cold open, warm open, raw invoke, shared-memory
//! invoke and close. Scenarios are interleaved per iteration so host noise
//! spreads evenly, and a few warm-up rounds are discarded.

use std::fmt;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context as _};

use crate::client::{Context, Direction, ImageSource, Operation, Param};
use crate::host::HostFabric;
use crate::images;

pub const DEFAULT_ITERATIONS: usize = 100;
const WARMUP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ColdOpen,
    WarmOpen,
    RawInvoke,
    ShmInvoke,
    Close,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::ColdOpen,
        Scenario::WarmOpen,
        Scenario::RawInvoke,
        Scenario::ShmInvoke,
        Scenario::Close,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ColdOpen => "cold_open",
            Scenario::WarmOpen => "warm_open",
            Scenario::RawInvoke => "raw_invoke",
            Scenario::ShmInvoke => "shm_invoke",
            Scenario::Close => "close",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioStats {
    pub scenario: Scenario,
    pub samples: Vec<Duration>,
    /// Loader copies observed across all timed samples.
    pub loads: u64,
}

impl ScenarioStats {
    fn new(scenario: Scenario) -> Self {
        ScenarioStats {
            scenario,
            samples: Vec::new(),
            loads: 0,
        }
    }

    pub fn mean(&self) -> Duration {
        let total: u128 = self.samples.iter().map(Duration::as_nanos).sum();
        Duration::from_nanos((total / self.samples.len().max(1) as u128) as u64)
    }

    pub fn min(&self) -> Duration {
        self.samples.iter().copied().min().unwrap_or_default()
    }

    pub fn max(&self) -> Duration {
        self.samples.iter().copied().max().unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub iterations: usize,
    pub dma: String,
    pub scenarios: Vec<ScenarioStats>,
}

fn ratio(a: Duration, b: Duration) -> f64 {
    a.as_nanos() as f64 / (b.as_nanos().max(1)) as f64
}

impl BenchReport {
    pub fn get(&self, s: Scenario) -> &ScenarioStats {
        self.scenarios
            .iter()
            .find(|x| x.scenario == s)
            .expect("every scenario is measured")
    }

    pub fn cold_warm_ratio(&self) -> f64 {
        ratio(self.get(Scenario::ColdOpen).mean(), self.get(Scenario::WarmOpen).mean())
    }

    pub fn shm_raw_ratio(&self) -> f64 {
        ratio(self.get(Scenario::ShmInvoke).mean(), self.get(Scenario::RawInvoke).mean())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} iterations per scenario, dma model {}", self.iterations, self.dma)?;
        for s in &self.scenarios {
            writeln!(
                f,
                "scenario={} samples={} mean_ns={} min_ns={} max_ns={} loads={}",
                s.scenario.name(),
                s.samples.len(),
                s.mean().as_nanos(),
                s.min().as_nanos(),
                s.max().as_nanos(),
                s.loads
            )?;
        }
        write!(
            f,
            "ratio cold_warm={:.1} shm_raw={:.3}",
            self.cold_warm_ratio(),
            self.shm_raw_ratio()
        )
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

/// Runs every scenario `iterations` times. Needs two free slots. Fails if
/// a structural fact is violated: every cold open loads exactly once and
/// nothing else loads at all.
pub fn run(fabric: &HostFabric, iterations: usize) -> anyhow::Result<BenchReport> {
    ensure!(iterations >= 1, "iterations must be at least 1");
    ensure!(fabric.enclave_count() >= 2, "bench needs at least two enclaves");
    fabric.quiesce();
    let state = fabric.state();
    ensure!(
        (0..fabric.enclave_count()).all(|s| !state.is_taken(s)),
        "bench needs an idle fabric"
    );
    let ctx = Context::new(fabric);
    // The holder of the warm-open slot is a second client.
    let holder_ctx = Context::new(fabric);
    let (inc_uuid, inc_img) = images::increment();
    let (shm_uuid, shm_img) = images::shmem16();

    let mut shm_session = ctx
        .open_session(shm_uuid, ImageSource::Bytes(&shm_img))
        .context("opening shmem16")?;
    let mut shm = ctx.allocate_shared_memory(&shm_session, 16, Direction::Out)?;

    let mut stats: Vec<ScenarioStats> = Scenario::ALL.into_iter().map(ScenarioStats::new).collect();
    for round in 0..WARMUP + iterations {
        let keep = round >= WARMUP;
        let mut record = |s: Scenario, d: Duration, loads: u64| {
            if keep {
                let st = &mut stats[s as usize];
                st.samples.push(d);
                st.loads += loads;
            }
        };
        fabric.quiesce();

        let before = fabric.load_count();
        let (holder, d) = timed(|| holder_ctx.open_session(inc_uuid, ImageSource::Bytes(&inc_img)));
        let mut holder = holder.context("cold open")?;
        record(Scenario::ColdOpen, d, fabric.load_count() - before);

        let before = fabric.load_count();
        let (second, d) = timed(|| ctx.open_session(inc_uuid, ImageSource::Bytes(&inc_img)));
        let mut second = second.context("warm open")?;
        record(Scenario::WarmOpen, d, fabric.load_count() - before);
        ensure!(second.slot == holder.slot, "warm open landed on another slot");
        ctx.close_session(&mut second)?;

        let input = round as u32;
        let mut op = Operation::new([Param::value_inout(input, 0), Param::None, Param::None, Param::None]);
        let before = fabric.load_count();
        let (r, d) = timed(|| holder_ctx.invoke_command(&holder, 0, &mut op));
        r.context("raw invoke")?;
        record(Scenario::RawInvoke, d, fabric.load_count() - before);
        ensure!(op.params[0].value() == Some((input.wrapping_add(1), 0)), "increment returned a wrong value");

        let mut op = Operation::new([Param::Memref(&mut shm), Param::None, Param::None, Param::None]);
        let before = fabric.load_count();
        let (r, d) = timed(|| ctx.invoke_command(&shm_session, 0, &mut op));
        r.context("shared-memory invoke")?;
        record(Scenario::ShmInvoke, d, fabric.load_count() - before);

        let before = fabric.load_count();
        let (r, d) = timed(|| holder_ctx.close_session(&mut holder));
        r.context("close")?;
        record(Scenario::Close, d, fabric.load_count() - before);
    }
    ctx.release_shared_memory(shm);
    ctx.close_session(&mut shm_session)?;
    fabric.quiesce();

    let report = BenchReport {
        iterations,
        dma: fabric.dma_model().describe(),
        scenarios: stats,
    };
    ensure!(
        report.get(Scenario::ColdOpen).loads == iterations as u64,
        "cold opens performed {} loads over {iterations} iterations",
        report.get(Scenario::ColdOpen).loads
    );
    for s in &report.scenarios[1..] {
        ensure!(s.loads == 0, "{} triggered {} loads", s.scenario.name(), s.loads);
    }
    Ok(report)
}
