//! Threaded fabric: one execution context per enclave, a communication
//! agent that serializes each mailbox, a manager lock for open/close and a
//! background scrubber that zeroizes released slots.
//!
//! Lock order is manager, then slot queue, then slot core. The enclave
//! threads and the scrubber never hold two of them at once.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use teeod_core::enclave::{EnclaveRuntime, EnclaveState, ResetLine, TaRegistry};
use teeod_core::fabric::{
    AuditError, Block, CmRegion, EnclaveBus, FabricEvent, FabricState, FirstFit, CM_CAPACITY,
};
use teeod_core::internal_api::{
    MemoryBackend, ObjectDigest, Rng, SealedStore, SoftServices, StorageError, TeeServices,
};
use teeod_core::protocol::{
    MailboxFrame, OperationId, ReplyFrame, ReturnCode, Uuid, FRAME_WORDS, SHM_SIZE, TCM_SIZE,
};
use teeod_core::tas::BuiltinRegistry;

use crate::config::{DmaModel, SimConfig};
use crate::storage::{Backend, FileBackend};

/// Alignment of shared-memory blocks inside an enclave window.
pub const WINDOW_ALIGN: usize = 8;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn wait<'a, T>(cv: &Condvar, g: MutexGuard<'a, T>) -> MutexGuard<'a, T> {
    cv.wait(g).unwrap_or_else(|e| e.into_inner())
}

/// Busy-waits short delays and sleeps long ones.
pub fn dma_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    if d >= Duration::from_millis(1) {
        thread::sleep(d);
        return;
    }
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

/// Timestamped key=value event lines.
#[derive(Debug)]
pub struct EventLog {
    start: Instant,
    lines: Mutex<Vec<String>>,
    file: Option<Mutex<BufWriter<File>>>,
}

impl EventLog {
    fn new(path: Option<&PathBuf>) -> std::io::Result<Self> {
        let file = match path {
            Some(p) => Some(Mutex::new(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(p)?,
            ))),
            None => None,
        };
        Ok(EventLog {
            start: Instant::now(),
            lines: Mutex::new(Vec::new()),
            file,
        })
    }

    fn record(&self, event: FabricEvent, duration: Option<Duration>) {
        let mut line = format!("{event} elapsed_ns={}", self.start.elapsed().as_nanos());
        if let Some(d) = duration {
            line.push_str(&format!(" duration_ns={}", d.as_nanos()));
        }
        if let Some(f) = &self.file {
            let mut f = lock(f);
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        lock(&self.lines).push(line);
    }

    pub fn lines(&self) -> Vec<String> {
        lock(&self.lines).clone()
    }
}

/// Everything that crossed the REE/enclave boundary for one request.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub slot: usize,
    pub request: [u32; FRAME_WORDS],
    pub reply: [u32; FRAME_WORDS],
    /// Shared window as the enclave left it.
    pub window: Vec<u8>,
    pub copied_out: Vec<Vec<u8>>,
}

/// Per-call locking view of the shared services, so enclaves only
/// serialize on the storage and RNG calls themselves.
struct ServicesHandle(Arc<Mutex<SoftServices<Backend>>>);

impl TeeServices for ServicesHandle {
    fn random_bytes(&mut self, out: &mut [u8]) {
        lock(&self.0).random_bytes(out)
    }
    fn storage_put(&mut self, ta: &Uuid, id: &[u8], payload: &[u8]) -> Result<(), StorageError> {
        lock(&self.0).storage_put(ta, id, payload)
    }
    fn storage_get(&mut self, ta: &Uuid, id: &[u8]) -> Result<Vec<u8>, StorageError> {
        lock(&self.0).storage_get(ta, id)
    }
    fn storage_delete(&mut self, ta: &Uuid, id: &[u8]) -> Result<(), StorageError> {
        lock(&self.0).storage_delete(ta, id)
    }
    fn storage_list(&mut self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        lock(&self.0).storage_list(ta)
    }
    fn monotonic_tick(&mut self) -> u64 {
        lock(&self.0).monotonic_tick()
    }
}

struct SlotCore {
    rt: EnclaveRuntime,
    /// Taken as far as the communication agent is concerned.
    occupied: bool,
    /// Bumped on every load and every scrub; stale sessions carry an old one.
    generation: u64,
    uart: Vec<String>,
}

struct Window {
    alloc: FirstFit,
    generation: u64,
}

#[derive(Default)]
struct Queue {
    next: u64,
    serving: u64,
}

struct Slot {
    core: Mutex<SlotCore>,
    cv: Condvar,
    reset: ResetLine,
    queue: Mutex<Queue>,
    queue_cv: Condvar,
    window: Mutex<Window>,
}

/// Holds a place in a slot's FIFO; releasing it admits the next ticket.
struct Ticket<'a>(&'a Slot);

impl<'a> Ticket<'a> {
    fn take(slot: &'a Slot) -> Self {
        let mut q = lock(&slot.queue);
        let mine = q.next;
        q.next += 1;
        while q.serving != mine {
            q = wait(&slot.queue_cv, q);
        }
        Ticket(slot)
    }
}

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        lock(&self.0.queue).serving += 1;
        self.0.queue_cv.notify_all();
    }
}

struct Manager {
    state: FabricState,
    cm: CmRegion,
}

struct Shared {
    manager: Mutex<Manager>,
    manager_cv: Condvar,
    slots: Vec<Slot>,
    services: Arc<Mutex<SoftServices<Backend>>>,
    registry: Box<dyn TaRegistry>,
    dma: DmaModel,
    log: EventLog,
    trace: Option<Mutex<Vec<TraceRecord>>>,
    uart_dir: Option<PathBuf>,
    shutdown: AtomicBool,
    scrub_tx: Mutex<Option<mpsc::Sender<usize>>>,
}

struct HostBus<'a>(&'a [Slot]);

impl EnclaveBus for HostBus<'_> {
    fn with_runtime<R>(&mut self, slot: usize, f: impl FnOnce(&mut EnclaveRuntime) -> R) -> R {
        f(&mut lock(&self.0[slot].core).rt)
    }
}

/// Result of a successful manager open plus OPEN frame.
#[derive(Debug, Clone, Copy)]
pub struct Opened {
    pub slot: usize,
    pub generation: u64,
    pub fresh_load: bool,
    pub reply: ReplyFrame,
}

/// A running fabric. Dropping it stops every enclave thread.
pub struct HostFabric {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for HostFabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostFabric")
            .field("enclaves", &self.shared.slots.len())
            .field("dma", &self.shared.dma)
            .finish_non_exhaustive()
    }
}

impl HostFabric {
    /// Boots a fabric with the built-in TAs.
    pub fn boot(config: &SimConfig) -> anyhow::Result<Self> {
        Self::boot_with_registry(config, Box::new(BuiltinRegistry))
    }

    pub fn boot_with_registry(config: &SimConfig, registry: Box<dyn TaRegistry>) -> anyhow::Result<Self> {
        config.validate()?;
        config.prepare_dirs()?;
        let backend = match &config.storage_dir {
            Some(dir) => Backend::File(FileBackend::open(dir)?),
            None => Backend::Memory(MemoryBackend::new()),
        };
        let rng = match config.rng_seed {
            Some(seed) => Rng::from_seed(seed),
            None => Rng::from_entropy(os_entropy()),
        };
        let services = SoftServices::new(rng, SealedStore::new(config.huk.device_key(), backend));
        let count = config.enclave_count as usize;
        let slots = (0..count)
            .map(|_| {
                let rt = EnclaveRuntime::new(config.quarantine_on_fault);
                Slot {
                    reset: rt.reset_line(),
                    core: Mutex::new(SlotCore {
                        rt,
                        occupied: false,
                        generation: 0,
                        uart: Vec::new(),
                    }),
                    cv: Condvar::new(),
                    queue: Mutex::new(Queue::default()),
                    queue_cv: Condvar::new(),
                    window: Mutex::new(Window {
                        alloc: FirstFit::new(SHM_SIZE, WINDOW_ALIGN),
                        generation: 0,
                    }),
                }
            })
            .collect();
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            manager: Mutex::new(Manager {
                state: FabricState::new(count),
                cm: CmRegion::new(CM_CAPACITY),
            }),
            manager_cv: Condvar::new(),
            slots,
            services: Arc::new(Mutex::new(services)),
            registry,
            dma: config.dma,
            log: EventLog::new(config.event_log.as_ref())?,
            trace: config.trace.then(|| Mutex::new(Vec::new())),
            uart_dir: config.uart_dir.clone(),
            shutdown: AtomicBool::new(false),
            scrub_tx: Mutex::new(Some(tx)),
        });
        let mut threads = Vec::with_capacity(count + 1);
        for slot in 0..count {
            let s = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("enclave-{slot}"))
                    .spawn(move || enclave_loop(&s, slot))?,
            );
        }
        let s = shared.clone();
        threads.push(thread::Builder::new().name("scrubber".into()).spawn(move || scrub_loop(&s, rx))?);
        Ok(HostFabric { shared, threads })
    }

    pub fn enclave_count(&self) -> usize {
        self.shared.slots.len()
    }

    pub fn dma_model(&self) -> DmaModel {
        self.shared.dma
    }

    /// Copies an image into the staging region.
    pub fn stage(&self, image: &[u8]) -> Result<Block, ReturnCode> {
        lock(&self.shared.manager)
            .cm
            .stage(image)
            .map_err(|e| e.return_code())
    }

    pub fn release_staged(&self, offset: usize) -> bool {
        lock(&self.shared.manager).cm.release(offset)
    }

    /// Manager open followed by the OPEN frame, under the manager lock.
    /// Waits for scrubbing slots when nothing else is free.
    pub fn open(&self, uuid: Uuid, staged: Block, frame: &MailboxFrame) -> Result<Opened, ReturnCode> {
        let sh = &*self.shared;
        let mut mgr = lock(&sh.manager);
        while mgr.state.slot_of(&uuid).is_none() && !mgr.state.has_free_slot() && mgr.state.has_scrubbing_slot() {
            mgr = wait(&sh.manager_cv, mgr);
        }
        let started = Instant::now();
        let before = mgr.state.load_count();
        let Manager { state, cm } = &mut *mgr;
        let outcome = state.manager_open(
            &mut HostBus(&sh.slots),
            cm,
            &*sh.registry,
            uuid,
            staged.offset as u32,
            staged.len as u32,
        );
        if state.load_count() != before {
            // The loader writes the whole TCM: image plus zero fill.
            dma_wait(sh.dma.cost(TCM_SIZE));
        }
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                sh.log.record(FabricEvent::OpenFailed { uuid, rc: e.return_code() }, None);
                return Err(e.return_code());
            }
        };
        let slot = outcome.slot;
        let generation = {
            let mut core = lock(&sh.slots[slot].core);
            if outcome.fresh_load {
                core.occupied = true;
                core.generation += 1;
                lock(&sh.slots[slot].window).generation = core.generation;
            }
            core.generation
        };
        if outcome.fresh_load {
            sh.log.record(
                FabricEvent::Load { slot, uuid, bytes: staged.len as u32 },
                Some(started.elapsed()),
            );
        }
        sh.log.record(
            FabricEvent::Open { slot, uuid, fresh: outcome.fresh_load },
            Some(started.elapsed()),
        );
        let reply = self.dispatch(slot, Some(generation), frame, &[], &[]);
        self.release_if_idle(&mut mgr, slot, generation);
        let (reply, _) = reply?;
        Ok(Opened {
            slot,
            generation,
            fresh_load: outcome.fresh_load,
            reply,
        })
    }

    /// CLOSE frame, then release of the slot if no session is left. The
    /// release returns before the slot is scrubbed.
    pub fn close(&self, slot: usize, generation: u64, session: u32) -> Result<ReplyFrame, ReturnCode> {
        let mut mgr = lock(&self.shared.manager);
        let reply = self.dispatch(
            slot,
            Some(generation),
            &MailboxFrame::new(OperationId::Close, session),
            &[],
            &[],
        );
        self.release_if_idle(&mut mgr, slot, generation);
        reply.map(|(r, _)| r)
    }

    fn release_if_idle(&self, mgr: &mut Manager, slot: usize, generation: u64) {
        let sh = &*self.shared;
        {
            let mut core = lock(&sh.slots[slot].core);
            if !core.occupied || core.generation != generation || core.rt.session_count() != 0 {
                return;
            }
            core.occupied = false;
            sh.slots[slot].reset.assert();
        }
        sh.slots[slot].cv.notify_all();
        if let Some(uuid) = mgr.state.begin_close(slot) {
            sh.log.record(FabricEvent::Close { slot, uuid }, None);
        }
        let tx = lock(&sh.scrub_tx);
        match tx.as_ref().map(|tx| tx.send(slot)) {
            Some(Ok(())) => {}
            _ => {
                drop(tx);
                scrub(sh, slot, Some(mgr));
            }
        }
    }

    /// Mailbox round trip. `shm_in` is written into the window before INT is
    /// raised and `shm_out` ranges are read back after it clears. Requests to
    /// one slot are served in arrival order.
    pub fn dispatch(
        &self,
        slot: usize,
        generation: Option<u64>,
        frame: &MailboxFrame,
        shm_in: &[(usize, &[u8])],
        shm_out: &[(usize, usize)],
    ) -> Result<(ReplyFrame, Vec<Vec<u8>>), ReturnCode> {
        let sh = &*self.shared;
        let s = sh.slots.get(slot).ok_or(ReturnCode::ERROR_ACCESS_DENIED)?;
        let words = frame.encode().map_err(|_| ReturnCode::ERROR_BAD_PARAMETERS)?;
        let _ticket = Ticket::take(s);
        let started = Instant::now();
        let mut core = lock(&s.core);
        if !core.occupied {
            return Err(ReturnCode::ERROR_ACCESS_DENIED);
        }
        let gen = core.generation;
        if generation.is_some_and(|g| g != gen) {
            return Err(ReturnCode::ERROR_ACCESS_DENIED);
        }
        let mut copied = 0;
        for (off, data) in shm_in {
            core.rt
                .shm_write(*off, data)
                .map_err(|_| ReturnCode::ERROR_BAD_PARAMETERS)?;
            copied += data.len();
        }
        dma_wait(sh.dma.cost(copied));
        core.rt.raise_int(words).map_err(|_| ReturnCode::ERROR_GENERIC)?;
        s.cv.notify_all();
        while core.rt.int_line() && !s.reset.is_asserted() && core.generation == gen {
            core = wait(&s.cv, core);
        }
        if s.reset.is_asserted() || core.generation != gen || core.rt.state() != EnclaveState::Wfi {
            return Err(ReturnCode::ERROR_GENERIC);
        }
        let reply = ReplyFrame::decode(core.rt.mailbox());
        let mut outs = Vec::with_capacity(shm_out.len());
        for (off, len) in shm_out {
            let bytes = core
                .rt
                .shm_read(*off, *len)
                .map_err(|_| ReturnCode::ERROR_BAD_PARAMETERS)?;
            outs.push(bytes.to_vec());
        }
        dma_wait(sh.dma.cost(outs.iter().map(Vec::len).sum()));
        if let Some(trace) = &sh.trace {
            lock(trace).push(TraceRecord {
                slot,
                request: words,
                reply: *core.rt.mailbox(),
                window: core.rt.shm().to_vec(),
                copied_out: outs.clone(),
            });
        }
        drop(core);
        let session = if frame.operation == OperationId::Open {
            reply.session_id
        } else {
            frame.session_id
        };
        sh.log.record(
            FabricEvent::Dispatch {
                slot,
                op: frame.operation,
                session,
                rc: reply.return_code,
            },
            Some(started.elapsed()),
        );
        Ok((reply, outs))
    }

    /// Reserves a block of `len` bytes in the window of `slot`.
    pub fn alloc_shared(&self, slot: usize, generation: u64, len: usize) -> Result<Block, ReturnCode> {
        let s = self.shared.slots.get(slot).ok_or(ReturnCode::ERROR_BAD_PARAMETERS)?;
        let mut w = lock(&s.window);
        if w.generation != generation {
            return Err(ReturnCode::ERROR_BAD_PARAMETERS);
        }
        w.alloc.allocate(len).map_err(|e| e.return_code())
    }

    pub fn free_shared(&self, slot: usize, generation: u64, offset: usize) -> bool {
        let Some(s) = self.shared.slots.get(slot) else {
            return false;
        };
        let mut w = lock(&s.window);
        w.generation == generation && w.alloc.release(offset)
    }

    /// Blocks until no slot is waiting for zeroization.
    pub fn quiesce(&self) {
        let mut mgr = lock(&self.shared.manager);
        while mgr.state.has_scrubbing_slot() {
            mgr = wait(&self.shared.manager_cv, mgr);
        }
    }

    /// Snapshot of the manager state.
    pub fn state(&self) -> FabricState {
        lock(&self.shared.manager).state.clone()
    }

    pub fn load_count(&self) -> u64 {
        lock(&self.shared.manager).state.load_count()
    }

    /// Runs the state auditor after waiting for pending scrubs.
    pub fn audit(&self) -> Result<(), AuditError> {
        self.quiesce();
        let mgr = lock(&self.shared.manager);
        mgr.state.audit(&mut HostBus(&self.shared.slots))
    }

    /// Read access to one enclave, e.g. for hygiene scans.
    pub fn inspect<R>(&self, slot: usize, f: impl FnOnce(&EnclaveRuntime) -> R) -> R {
        f(&lock(&self.shared.slots[slot].core).rt)
    }

    pub fn uart_lines(&self, slot: usize) -> Vec<String> {
        lock(&self.shared.slots[slot].core).uart.clone()
    }

    pub fn events(&self) -> Vec<String> {
        self.shared.log.lines()
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.shared.trace.as_ref().map(|t| lock(t).clone()).unwrap_or_default()
    }

    /// Direct access to the shared services (storage, RNG).
    pub fn with_services<R>(&self, f: impl FnOnce(&mut SoftServices<Backend>) -> R) -> R {
        f(&mut lock(&self.shared.services))
    }
}

impl Drop for HostFabric {
    fn drop(&mut self) {
        let sh = &*self.shared;
        sh.shutdown.store(true, Ordering::SeqCst);
        lock(&sh.scrub_tx).take();
        for s in &sh.slots {
            let _g = lock(&s.core);
            s.cv.notify_all();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn os_entropy() -> [u8; 32] {
    let mut seed = [0u8; 32];
    getrandom::getrandom(&mut seed).expect("OS entropy source unavailable");
    seed
}

fn append_uart(sh: &Shared, slot: usize, lines: &[String]) {
    let Some(dir) = &sh.uart_dir else { return };
    let path = dir.join(format!("enclave{slot}.log"));
    let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) else {
        return;
    };
    for l in lines {
        let _ = writeln!(f, "{l}");
    }
}

fn enclave_loop(sh: &Shared, slot: usize) {
    let s = &sh.slots[slot];
    let mut services = ServicesHandle(sh.services.clone());
    let mut core = lock(&s.core);
    loop {
        while !sh.shutdown.load(Ordering::SeqCst)
            && !(core.rt.int_line() && core.rt.state() == EnclaveState::Wfi && !s.reset.is_asserted())
        {
            core = wait(&s.cv, core);
        }
        if sh.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| core.rt.service_interrupt(&mut services)));
        if outcome.is_err() {
            core.rt.abort_isr(ReturnCode::ERROR_GENERIC);
        }
        let lines = core.rt.uart().drain();
        if !lines.is_empty() {
            append_uart(sh, slot, &lines);
            core.uart.extend(lines);
        }
        for ev in core.rt.drain_events() {
            if let Some(ev) = FabricEvent::from_enclave(slot, ev) {
                sh.log.record(ev, None);
            }
        }
        s.cv.notify_all();
    }
}

fn scrub(sh: &Shared, slot: usize, mgr: Option<&mut Manager>) {
    let s = &sh.slots[slot];
    {
        let mut core = lock(&s.core);
        core.rt.assert_reset();
        core.generation += 1;
        let mut w = lock(&s.window);
        w.alloc = FirstFit::new(SHM_SIZE, WINDOW_ALIGN);
        w.generation = core.generation;
    }
    s.cv.notify_all();
    match mgr {
        Some(m) => m.state.finish_close(slot),
        None => lock(&sh.manager).state.finish_close(slot),
    }
    sh.manager_cv.notify_all();
    sh.log.record(FabricEvent::Scrubbed { slot }, None);
}

fn scrub_loop(sh: &Shared, rx: mpsc::Receiver<usize>) {
    while let Ok(slot) = rx.recv() {
        scrub(sh, slot, None);
    }
}

/// Removes earlier `<dir>/enclave<slot>.log` files so a run starts clean.
pub fn reset_uart_logs(dir: &std::path::Path, count: usize) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for slot in 0..count {
        let _ = fs::remove_file(dir.join(format!("enclave{slot}.log")));
    }
    Ok(())
}
