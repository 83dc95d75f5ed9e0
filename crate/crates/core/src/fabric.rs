//! Programmable-logic agents: manager bookkeeping (`enclaves_list`,
//! `loaded_tas`, register block), the contiguous staging region, the loader
//! copy and frame routing.
//!
//! [`FabricState`] reaches enclaves only through an [`EnclaveBus`], so the
//! same bookkeeping drives both the single-context [`Fabric`] below and a
//! threaded host where every slot sits behind its own lock.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::enclave::{EnclaveEvent, EnclaveRuntime, IsrOutcome, TaRegistry};
use crate::internal_api::{DeviceKey, MemoryBackend, Rng, SealedStore, SoftServices};
use crate::protocol::{
    LoadStatus, MailboxFrame, ManagerRegisters, OperationId, ReplyFrame, ReturnCode, TaImage, Uuid,
    TCM_SIZE,
};
use crate::tas::BuiltinRegistry;

/// Default size of the contiguous staging region.
pub const CM_CAPACITY: usize = 16 * 1024 * 1024;
pub const CM_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no free range of {0} bytes")]
pub struct OutOfMemory(pub usize);

impl OutOfMemory {
    pub fn return_code(&self) -> ReturnCode {
        ReturnCode::ERROR_OUT_OF_MEMORY
    }
}

/// A reserved range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
}

/// First-fit range allocator with aligned start offsets. Zero-length blocks
/// are valid and reserve nothing.
#[derive(Debug, Clone)]
pub struct FirstFit {
    capacity: usize,
    align: usize,
    allocations: BTreeMap<usize, usize>,
}

fn align_up(x: usize, align: usize) -> usize {
    x.div_ceil(align) * align
}

impl FirstFit {
    pub fn new(capacity: usize, align: usize) -> Self {
        assert!(align.is_power_of_two());
        FirstFit {
            capacity,
            align,
            allocations: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn allocate(&mut self, len: usize) -> Result<Block, OutOfMemory> {
        if len == 0 {
            return Ok(Block { offset: 0, len: 0 });
        }
        let mut cursor = 0;
        for (&off, &l) in &self.allocations {
            if off >= cursor && off - cursor >= len {
                break;
            }
            cursor = align_up(off + l, self.align);
        }
        if cursor > self.capacity || self.capacity - cursor < len {
            return Err(OutOfMemory(len));
        }
        self.allocations.insert(cursor, len);
        Ok(Block { offset: cursor, len })
    }

    /// Frees the block starting at `offset`; false if there was none.
    pub fn release(&mut self, offset: usize) -> bool {
        self.allocations.remove(&offset).is_some()
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.allocations.iter().map(|(o, l)| Block { offset: *o, len: *l })
    }

    pub fn used(&self) -> usize {
        self.allocations.values().sum()
    }
}

/// Physically contiguous memory where the REE stages TA images.
#[derive(Debug, Clone)]
pub struct CmRegion {
    data: Vec<u8>,
    alloc: FirstFit,
}

impl Default for CmRegion {
    fn default() -> Self {
        Self::new(CM_CAPACITY)
    }
}

impl CmRegion {
    pub fn new(capacity: usize) -> Self {
        CmRegion {
            data: vec![0; capacity],
            alloc: FirstFit::new(capacity, CM_ALIGN),
        }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn stage(&mut self, bytes: &[u8]) -> Result<Block, OutOfMemory> {
        let block = self.alloc.allocate(bytes.len())?;
        self.data[block.offset..block.offset + block.len].copy_from_slice(bytes);
        Ok(block)
    }

    /// Frees and clears a staged range.
    pub fn release(&mut self, offset: usize) -> bool {
        let Some(len) = self.alloc.allocations.get(&offset).copied() else {
            return false;
        };
        self.data[offset..offset + len].fill(0);
        self.alloc.release(offset)
    }

    pub fn read(&self, offset: usize, len: usize) -> Option<&[u8]> {
        let end = offset.checked_add(len)?;
        self.data.get(offset..end)
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.alloc.blocks()
    }
}

/// One DMA job of the loader agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadRequest {
    pub addr_src: u32,
    pub size: u32,
    pub slot: usize,
}

/// Copies `req.size` bytes from CM into `tcm` and zeroes the rest of it.
pub fn loader_copy(cm: &CmRegion, req: &LoadRequest, tcm: &mut [u8]) -> Result<(), LoadStatus> {
    let size = req.size as usize;
    if size > tcm.len() {
        return Err(LoadStatus::ErrSize);
    }
    let src = cm.read(req.addr_src as usize, size).ok_or(LoadStatus::ErrSize)?;
    tcm[..size].copy_from_slice(src);
    tcm[size..].fill(0);
    Ok(())
}

/// Access to enclave runtimes by slot index.
pub trait EnclaveBus {
    fn with_runtime<R>(&mut self, slot: usize, f: impl FnOnce(&mut EnclaveRuntime) -> R) -> R;
}

impl EnclaveBus for [EnclaveRuntime] {
    fn with_runtime<R>(&mut self, slot: usize, f: impl FnOnce(&mut EnclaveRuntime) -> R) -> R {
        f(&mut self[slot])
    }
}

impl EnclaveBus for Vec<EnclaveRuntime> {
    fn with_runtime<R>(&mut self, slot: usize, f: impl FnOnce(&mut EnclaveRuntime) -> R) -> R {
        f(&mut self[slot])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Taken,
    /// Released by the manager, zeroization not yet finished.
    Scrubbing,
}

/// Entry of `enclaves_list`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRecord {
    pub slot_index: usize,
    pub tcm_base: u32,
    pub state: SlotState,
}

impl SlotRecord {
    pub fn taken(&self) -> bool {
        self.state == SlotState::Taken
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum OpenError {
    #[error("no free enclave")]
    Full,
    #[error("image does not fit the TCM or the staging region")]
    Size,
    #[error("staged image is malformed or does not carry the requested UUID")]
    Format,
}

impl OpenError {
    pub fn status(self) -> LoadStatus {
        match self {
            OpenError::Full => LoadStatus::ErrFull,
            OpenError::Size => LoadStatus::ErrSize,
            OpenError::Format => LoadStatus::ErrFormat,
        }
    }

    pub fn return_code(self) -> ReturnCode {
        match self {
            OpenError::Full => ReturnCode::ERROR_OUT_OF_ENCLAVES,
            OpenError::Size => ReturnCode::ERROR_EXCESS_DATA,
            OpenError::Format => ReturnCode::ERROR_BAD_FORMAT,
        }
    }

    fn from_status(status: LoadStatus) -> Self {
        match status {
            LoadStatus::ErrSize => OpenError::Size,
            LoadStatus::ErrFull => OpenError::Full,
            _ => OpenError::Format,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenOutcome {
    pub slot: usize,
    pub fresh_load: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("fabric audit failed: {0}")]
pub struct AuditError(pub String);

/// Manager agent state.
#[derive(Debug, Clone)]
pub struct FabricState {
    enclaves_list: Vec<SlotRecord>,
    loaded_tas: BTreeMap<Uuid, usize>,
    regs: ManagerRegisters,
    last_status: LoadStatus,
    load_count: u64,
}

impl FabricState {
    pub fn new(enclave_count: usize) -> Self {
        FabricState {
            enclaves_list: (0..enclave_count)
                .map(|i| SlotRecord {
                    slot_index: i,
                    tcm_base: (i * TCM_SIZE) as u32,
                    state: SlotState::Free,
                })
                .collect(),
            loaded_tas: BTreeMap::new(),
            regs: ManagerRegisters::default(),
            last_status: LoadStatus::Idle,
            load_count: 0,
        }
    }

    pub fn enclave_count(&self) -> usize {
        self.enclaves_list.len()
    }

    pub fn enclaves_list(&self) -> &[SlotRecord] {
        &self.enclaves_list
    }

    pub fn loaded_tas(&self) -> &BTreeMap<Uuid, usize> {
        &self.loaded_tas
    }

    pub fn slot_of(&self, uuid: &Uuid) -> Option<usize> {
        self.loaded_tas.get(uuid).copied()
    }

    pub fn slot_state(&self, slot: usize) -> Option<SlotState> {
        self.enclaves_list.get(slot).map(|r| r.state)
    }

    pub fn is_taken(&self, slot: usize) -> bool {
        self.slot_state(slot) == Some(SlotState::Taken)
    }

    pub fn registers(&self) -> &ManagerRegisters {
        &self.regs
    }

    /// Terminal status of the most recent cold load.
    pub fn last_status(&self) -> LoadStatus {
        self.last_status
    }

    pub fn load_count(&self) -> u64 {
        self.load_count
    }

    pub fn has_free_slot(&self) -> bool {
        self.enclaves_list.iter().any(|r| r.state == SlotState::Free)
    }

    pub fn has_scrubbing_slot(&self) -> bool {
        self.enclaves_list.iter().any(|r| r.state == SlotState::Scrubbing)
    }

    /// Finds or loads the enclave hosting `uuid`. A UUID that is already
    /// loaded returns its slot without touching the loader.
    pub fn manager_open<B: EnclaveBus + ?Sized>(
        &mut self,
        bus: &mut B,
        cm: &CmRegion,
        registry: &dyn TaRegistry,
        uuid: Uuid,
        addr: u32,
        size: u32,
    ) -> Result<OpenOutcome, OpenError> {
        if let Some(slot) = self.slot_of(&uuid) {
            return Ok(OpenOutcome {
                slot,
                fresh_load: false,
            });
        }
        self.regs.uuid = uuid;
        self.regs.addr = addr;
        self.regs.size = size;
        self.set_status(LoadStatus::Loading);
        let result = self.cold_load(bus, cm, registry, uuid, addr, size);
        let status = match result {
            Ok(_) => LoadStatus::Loaded,
            Err(status) => status,
        };
        self.set_status(status);
        self.last_status = status;
        self.set_status(LoadStatus::Idle);
        result
            .map(|slot| OpenOutcome {
                slot,
                fresh_load: true,
            })
            .map_err(OpenError::from_status)
    }

    fn set_status(&mut self, next: LoadStatus) {
        self.regs
            .set_status(next)
            .expect("manager drives the status register in order");
    }

    fn cold_load<B: EnclaveBus + ?Sized>(
        &mut self,
        bus: &mut B,
        cm: &CmRegion,
        registry: &dyn TaRegistry,
        uuid: Uuid,
        addr: u32,
        size: u32,
    ) -> Result<usize, LoadStatus> {
        if size as usize > TCM_SIZE {
            return Err(LoadStatus::ErrSize);
        }
        let slot = self
            .enclaves_list
            .iter()
            .find(|r| r.state == SlotState::Free)
            .map(|r| r.slot_index)
            .ok_or(LoadStatus::ErrFull)?;
        let req = LoadRequest {
            addr_src: addr,
            size,
            slot,
        };
        let (copied, result) = bus.with_runtime(slot, |rt| {
            rt.assert_reset();
            let port = rt.loader_port().expect("slot held in reset");
            if let Err(status) = loader_copy(cm, &req, port) {
                return (false, Err(status));
            }
            let verified = matches!(
                TaImage::decode_prefix(&port[..size as usize]),
                Ok((image, _)) if image.uuid == uuid
            );
            if verified {
                rt.release_reset(registry).expect("slot held in reset");
            }
            if !verified || !rt.has_ta() {
                rt.assert_reset();
                return (true, Err(LoadStatus::ErrFormat));
            }
            (true, Ok(()))
        });
        if copied {
            self.load_count += 1;
        }
        result?;
        self.enclaves_list[slot].state = SlotState::Taken;
        self.loaded_tas.insert(uuid, slot);
        Ok(slot)
    }

    /// Releases a taken slot: it leaves `loaded_tas` and waits for
    /// zeroization in [`SlotState::Scrubbing`]. Returns the UUID it hosted,
    /// or `None` when the slot was not taken.
    pub fn begin_close(&mut self, slot: usize) -> Option<Uuid> {
        let record = self.enclaves_list.get_mut(slot)?;
        if record.state != SlotState::Taken {
            return None;
        }
        record.state = SlotState::Scrubbing;
        let uuid = self
            .loaded_tas
            .iter()
            .find(|(_, s)| **s == slot)
            .map(|(u, _)| *u)?;
        self.loaded_tas.remove(&uuid);
        Some(uuid)
    }

    /// Marks a scrubbed slot free again.
    pub fn finish_close(&mut self, slot: usize) {
        if let Some(record) = self.enclaves_list.get_mut(slot) {
            if record.state == SlotState::Scrubbing {
                record.state = SlotState::Free;
            }
        }
    }

    /// Synchronous close: release, reset and zeroize, free. No-op on a slot
    /// that is not taken.
    pub fn manager_close<B: EnclaveBus + ?Sized>(&mut self, bus: &mut B, slot: usize) -> Option<Uuid> {
        let uuid = self.begin_close(slot)?;
        bus.with_runtime(slot, EnclaveRuntime::assert_reset);
        self.finish_close(slot);
        Some(uuid)
    }

    /// Cross-checks bookkeeping against the enclaves themselves.
    pub fn audit<B: EnclaveBus + ?Sized>(&self, bus: &mut B) -> Result<(), AuditError> {
        let fail = |msg: String| Err(AuditError(msg));
        for (uuid, slot) in &self.loaded_tas {
            if self.loaded_tas.iter().filter(|(_, s)| *s == slot).count() != 1 {
                return fail(format!("slot {slot} is mapped by more than one UUID"));
            }
            if !self.is_taken(*slot) {
                return fail(format!("{uuid} maps to slot {slot}, which is not taken"));
            }
        }
        for record in &self.enclaves_list {
            let slot = record.slot_index;
            let mapped = self.loaded_tas.iter().find(|(_, s)| **s == slot).map(|(u, _)| *u);
            match (record.state, mapped) {
                (SlotState::Taken, Some(uuid)) => {
                    let (running, hosted) = bus.with_runtime(slot, |rt| {
                        (rt.state() != crate::enclave::EnclaveState::Reset, rt.ta_uuid())
                    });
                    if !running || hosted != uuid {
                        return fail(format!("slot {slot} should host {uuid}, enclave reports {hosted}"));
                    }
                }
                (SlotState::Taken, None) => return fail(format!("slot {slot} is taken but hosts no UUID")),
                (SlotState::Free, None) => {
                    let clean = bus.with_runtime(slot, |rt| {
                        rt.is_zeroized() && rt.state() == crate::enclave::EnclaveState::Reset
                    });
                    if !clean {
                        return fail(format!("free slot {slot} is not zeroized and in reset"));
                    }
                }
                (SlotState::Scrubbing, None) => {}
                (_, Some(uuid)) => return fail(format!("{uuid} maps to non-taken slot {slot}")),
            }
        }
        Ok(())
    }
}

/// One state transition, rendered as a key=value log line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FabricEvent {
    Open { slot: usize, uuid: Uuid, fresh: bool },
    OpenFailed { uuid: Uuid, rc: ReturnCode },
    Load { slot: usize, uuid: Uuid, bytes: u32 },
    Dispatch { slot: usize, op: OperationId, session: u32, rc: ReturnCode },
    Destroy { slot: usize },
    Fault { slot: usize, rc: ReturnCode },
    Close { slot: usize, uuid: Uuid },
    Scrubbed { slot: usize },
}

impl FabricEvent {
    pub fn name(&self) -> &'static str {
        match self {
            FabricEvent::Open { .. } => "OPEN",
            FabricEvent::OpenFailed { .. } => "OPEN_FAILED",
            FabricEvent::Load { .. } => "LOAD",
            FabricEvent::Dispatch { .. } => "DISPATCH",
            FabricEvent::Destroy { .. } => "DESTROY",
            FabricEvent::Fault { .. } => "FAULT",
            FabricEvent::Close { .. } => "CLOSE",
            FabricEvent::Scrubbed { .. } => "SCRUBBED",
        }
    }

    pub fn slot(&self) -> Option<usize> {
        match *self {
            FabricEvent::OpenFailed { .. } => None,
            FabricEvent::Open { slot, .. }
            | FabricEvent::Load { slot, .. }
            | FabricEvent::Dispatch { slot, .. }
            | FabricEvent::Destroy { slot }
            | FabricEvent::Fault { slot, .. }
            | FabricEvent::Close { slot, .. }
            | FabricEvent::Scrubbed { slot } => Some(slot),
        }
    }

    /// Lifts events reported by the enclave in `slot`.
    pub fn from_enclave(slot: usize, event: EnclaveEvent) -> Option<Self> {
        match event {
            EnclaveEvent::Destroyed => Some(FabricEvent::Destroy { slot }),
            EnclaveEvent::Faulted(rc) => Some(FabricEvent::Fault { slot, rc }),
            EnclaveEvent::BootFailed => None,
        }
    }
}

impl fmt::Display for FabricEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event={}", self.name())?;
        match self {
            FabricEvent::Open { slot, uuid, fresh } => {
                write!(f, " slot={slot} uuid={uuid} fresh={}", u8::from(*fresh))
            }
            FabricEvent::OpenFailed { uuid, rc } => write!(f, " uuid={uuid} rc={rc}"),
            FabricEvent::Load { slot, uuid, bytes } => write!(f, " slot={slot} uuid={uuid} bytes={bytes}"),
            FabricEvent::Dispatch { slot, op, session, rc } => {
                write!(f, " slot={slot} op={op:?} session={session} rc={rc}")
            }
            FabricEvent::Fault { slot, rc } => write!(f, " slot={slot} rc={rc}"),
            FabricEvent::Close { slot, uuid } => write!(f, " slot={slot} uuid={uuid}"),
            FabricEvent::Destroy { slot } | FabricEvent::Scrubbed { slot } => write!(f, " slot={slot}"),
        }
    }
}

/// Single-context fabric configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FabricConfig {
    pub enclave_count: usize,
    pub cm_capacity: usize,
    pub seed: u64,
    pub quarantine_on_fault: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            enclave_count: 4,
            cm_capacity: CM_CAPACITY,
            seed: 0,
            quarantine_on_fault: false,
        }
    }
}

/// The whole fabric driven from one execution context: every dispatch runs
/// the target ISR to completion before returning.
pub struct Fabric<R: TaRegistry = BuiltinRegistry> {
    state: FabricState,
    cm: CmRegion,
    enclaves: Vec<EnclaveRuntime>,
    services: SoftServices<MemoryBackend>,
    registry: R,
    events: Vec<FabricEvent>,
}

impl Fabric<BuiltinRegistry> {
    pub fn with_builtins(config: FabricConfig) -> Self {
        Fabric::new(config, BuiltinRegistry)
    }
}

impl<R: TaRegistry> Fabric<R> {
    pub fn new(config: FabricConfig, registry: R) -> Self {
        let store = SealedStore::new(DeviceKey::from_seed(config.seed), MemoryBackend::new());
        Fabric {
            state: FabricState::new(config.enclave_count),
            cm: CmRegion::new(config.cm_capacity),
            enclaves: (0..config.enclave_count)
                .map(|_| EnclaveRuntime::new(config.quarantine_on_fault))
                .collect(),
            services: SoftServices::new(Rng::from_seed(config.seed), store),
            registry,
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> &FabricState {
        &self.state
    }

    pub fn cm(&self) -> &CmRegion {
        &self.cm
    }

    pub fn enclave(&self, slot: usize) -> &EnclaveRuntime {
        &self.enclaves[slot]
    }

    pub fn enclave_mut(&mut self, slot: usize) -> &mut EnclaveRuntime {
        &mut self.enclaves[slot]
    }

    pub fn services_mut(&mut self) -> &mut SoftServices<MemoryBackend> {
        &mut self.services
    }

    pub fn events(&self) -> &[FabricEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<FabricEvent> {
        core::mem::take(&mut self.events)
    }

    pub fn cm_stage(&mut self, image: &[u8]) -> Result<Block, OutOfMemory> {
        self.cm.stage(image)
    }

    pub fn cm_release(&mut self, offset: usize) -> bool {
        self.cm.release(offset)
    }

    pub fn manager_open(&mut self, uuid: Uuid, addr: u32, size: u32) -> Result<OpenOutcome, OpenError> {
        let before = self.state.load_count();
        let result = self
            .state
            .manager_open(&mut self.enclaves, &self.cm, &self.registry, uuid, addr, size);
        match result {
            Ok(OpenOutcome { slot, fresh_load }) => {
                if self.state.load_count() != before {
                    self.events.push(FabricEvent::Load { slot, uuid, bytes: size });
                }
                self.events.push(FabricEvent::Open {
                    slot,
                    uuid,
                    fresh: fresh_load,
                });
            }
            Err(e) => self.events.push(FabricEvent::OpenFailed {
                uuid,
                rc: e.return_code(),
            }),
        }
        result
    }

    /// Mailbox round trip with the enclave in `slot`.
    pub fn comm_dispatch(&mut self, slot: usize, frame: &MailboxFrame) -> ReplyFrame {
        let denied = ReplyFrame::to_request_shape(frame, ReturnCode::ERROR_ACCESS_DENIED);
        if !self.state.is_taken(slot) {
            return denied;
        }
        let Ok(words) = frame.encode() else {
            return ReplyFrame::to_request_shape(frame, ReturnCode::ERROR_BAD_PARAMETERS);
        };
        let rt = &mut self.enclaves[slot];
        if rt.raise_int(words).is_err() {
            return denied;
        }
        let reply = match rt.service_interrupt(&mut self.services) {
            IsrOutcome::Replied(_) => ReplyFrame::decode(rt.mailbox()),
            _ => ReplyFrame::to_request_shape(frame, ReturnCode::ERROR_GENERIC),
        };
        self.events.push(FabricEvent::Dispatch {
            slot,
            op: frame.operation,
            session: if frame.operation == OperationId::Open {
                reply.session_id
            } else {
                frame.session_id
            },
            rc: reply.return_code,
        });
        for ev in self.enclaves[slot].drain_events() {
            self.events.extend(FabricEvent::from_enclave(slot, ev));
        }
        reply
    }

    pub fn manager_close(&mut self, slot: usize) {
        if let Some(uuid) = self.state.manager_close(&mut self.enclaves, slot) {
            self.events.push(FabricEvent::Close { slot, uuid });
            self.events.push(FabricEvent::Scrubbed { slot });
        }
    }

    /// Manager open followed by the OPEN frame. A slot whose TA ends up
    /// with no session is closed again.
    pub fn open_session(&mut self, uuid: Uuid, block: Block, frame: &MailboxFrame) -> Result<(usize, ReplyFrame), ReturnCode> {
        let outcome = self
            .manager_open(uuid, block.offset as u32, block.len as u32)
            .map_err(OpenError::return_code)?;
        let reply = self.comm_dispatch(outcome.slot, frame);
        self.close_if_idle(outcome.slot);
        Ok((outcome.slot, reply))
    }

    /// CLOSE frame, then manager close if it was the last session.
    pub fn close_session(&mut self, slot: usize, session: u32) -> ReplyFrame {
        let reply = self.comm_dispatch(slot, &MailboxFrame::new(OperationId::Close, session));
        self.close_if_idle(slot);
        reply
    }

    fn close_if_idle(&mut self, slot: usize) {
        if self.state.is_taken(slot) && self.enclaves[slot].session_count() == 0 {
            self.manager_close(slot);
        }
    }

    pub fn audit(&mut self) -> Result<(), AuditError> {
        self.state.audit(&mut self.enclaves)
    }
}
