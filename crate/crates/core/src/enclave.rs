//! One enclave: private TCM, shared window, mailbox, RST/INT lines and the
//! interrupt service routine that runs the hosted TA.
//!
//! The runtime never blocks. A host drives it: the communication agent
//! calls [`EnclaveRuntime::raise_int`], the enclave's own execution context
//! calls [`EnclaveRuntime::service_interrupt`] and the manager calls
//! [`EnclaveRuntime::assert_reset`]. TA code only runs inside the ISR and
//! only touches memory through a [`MemoryContext`].

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

use crate::internal_api::{ObjectDigest, StorageError, TeeServices};
use crate::protocol::{
    MailboxFrame, OperationId, Param, ParamKind, ReplyFrame, ReturnCode, TaImage, Uuid,
    FRAME_WORDS, MAX_PARAMS, SHM_SIZE, TCM_SIZE,
};

/// Reset line shared between the manager and one enclave. Asserting it is
/// lock-free so a handler stuck in the ISR observes it on its next access.
#[derive(Debug, Clone, Default)]
pub struct ResetLine(Arc<AtomicBool>);

impl ResetLine {
    pub fn asserted() -> Self {
        ResetLine(Arc::new(AtomicBool::new(true)))
    }

    pub fn assert(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    fn deassert(&self) {
        self.0.store(false, Ordering::SeqCst);
    }

    pub fn is_asserted(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Reset,
    Wfi,
    Isr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Tcm,
    Shm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemFault {
    #[error("{space:?} access {offset:#x}+{len:#x} outside the granted range")]
    OutOfRange { space: Space, offset: usize, len: usize },
    #[error("reset asserted during access")]
    Reset,
}

/// Bounded view of enclave memory handed to TA code for one request.
pub struct MemoryContext<'a> {
    tcm: &'a mut [u8],
    shm: &'a mut [u8],
    grants: [Option<(usize, usize)>; MAX_PARAMS],
    reset: &'a ResetLine,
}

impl<'a> MemoryContext<'a> {
    pub fn new(
        tcm: &'a mut [u8],
        shm: &'a mut [u8],
        grants: [Option<(usize, usize)>; MAX_PARAMS],
        reset: &'a ResetLine,
    ) -> Self {
        MemoryContext {
            tcm,
            shm,
            grants,
            reset,
        }
    }

    /// MEMREF grant (offset, len) of parameter `index`, if any.
    pub fn grant(&self, index: usize) -> Option<(usize, usize)> {
        self.grants.get(index).copied().flatten()
    }

    fn check(&self, space: Space, offset: usize, len: usize) -> Result<(), MemFault> {
        if self.reset.is_asserted() {
            return Err(MemFault::Reset);
        }
        let fault = MemFault::OutOfRange { space, offset, len };
        let end = offset.checked_add(len).ok_or(fault)?;
        let allowed = match space {
            Space::Tcm => end <= self.tcm.len(),
            Space::Shm => self
                .grants
                .iter()
                .flatten()
                .any(|(g_off, g_len)| offset >= *g_off && end <= g_off + g_len),
        };
        if allowed {
            Ok(())
        } else {
            Err(fault)
        }
    }

    pub fn read(&self, space: Space, offset: usize, out: &mut [u8]) -> Result<(), MemFault> {
        self.check(space, offset, out.len())?;
        let src = match space {
            Space::Tcm => &self.tcm[offset..offset + out.len()],
            Space::Shm => &self.shm[offset..offset + out.len()],
        };
        out.copy_from_slice(src);
        Ok(())
    }

    pub fn read_vec(&self, space: Space, offset: usize, len: usize) -> Result<Vec<u8>, MemFault> {
        self.check(space, offset, len)?;
        let mut out = vec![0u8; len];
        self.read(space, offset, &mut out)?;
        Ok(out)
    }

    pub fn write(&mut self, space: Space, offset: usize, data: &[u8]) -> Result<(), MemFault> {
        self.check(space, offset, data.len())?;
        let dst = match space {
            Space::Tcm => &mut self.tcm[offset..offset + data.len()],
            Space::Shm => &mut self.shm[offset..offset + data.len()],
        };
        dst.copy_from_slice(data);
        Ok(())
    }

    /// Whole buffer behind MEMREF parameter `index`.
    pub fn memref_read(&self, index: usize) -> Result<Vec<u8>, TaError> {
        let (off, len) = self.grant(index).ok_or(TaError::BAD_PARAMETERS)?;
        Ok(self.read_vec(Space::Shm, off, len)?)
    }

    /// Writes `data` at the start of MEMREF parameter `index`.
    pub fn memref_write(&mut self, index: usize, data: &[u8]) -> Result<(), TaError> {
        let (off, len) = self.grant(index).ok_or(TaError::BAD_PARAMETERS)?;
        if data.len() > len {
            return Err(TaError::Code(ReturnCode::ERROR_SHORT_BUFFER));
        }
        Ok(self.write(Space::Shm, off, data)?)
    }
}

/// Why a TA handler did not complete normally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaError {
    /// TA-chosen return code, passed to the client verbatim.
    Code(ReturnCode),
    /// Mediated memory access fault.
    Fault(MemFault),
    /// The TA itself crashed.
    Crash,
}

impl TaError {
    pub const BAD_PARAMETERS: TaError = TaError::Code(ReturnCode::ERROR_BAD_PARAMETERS);
}

impl From<MemFault> for TaError {
    fn from(f: MemFault) -> Self {
        TaError::Fault(f)
    }
}

impl From<ReturnCode> for TaError {
    fn from(rc: ReturnCode) -> Self {
        TaError::Code(rc)
    }
}

impl From<StorageError> for TaError {
    fn from(e: StorageError) -> Self {
        TaError::Code(e.return_code())
    }
}

pub type TaResult<T> = Result<T, TaError>;

/// Parameters of one request as the TA sees them. Value outputs written
/// here travel back in the reply frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Params {
    kinds: [ParamKind; MAX_PARAMS],
    words: [(u32, u32); MAX_PARAMS],
}

impl Params {
    pub fn from_frame(frame: &MailboxFrame) -> Self {
        Params {
            kinds: frame.param_type.kinds(),
            words: core::array::from_fn(|i| (frame.gp[2 * i], frame.gp[2 * i + 1])),
        }
    }

    pub fn kinds(&self) -> [ParamKind; MAX_PARAMS] {
        self.kinds
    }

    pub fn expect(&self, kinds: [ParamKind; MAX_PARAMS]) -> TaResult<()> {
        if self.kinds == kinds {
            Ok(())
        } else {
            Err(TaError::BAD_PARAMETERS)
        }
    }

    /// Input value of parameter `index` (VALUE_IN or VALUE_INOUT).
    pub fn value(&self, index: usize) -> TaResult<(u32, u32)> {
        match self.kinds[index] {
            ParamKind::ValueIn | ParamKind::ValueInout => Ok(self.words[index]),
            _ => Err(TaError::BAD_PARAMETERS),
        }
    }

    pub fn set_value(&mut self, index: usize, a: u32, b: u32) -> TaResult<()> {
        if !self.kinds[index].is_output() {
            return Err(TaError::BAD_PARAMETERS);
        }
        self.words[index] = (a, b);
        Ok(())
    }

    fn apply_outputs(&self, gp: &mut [u32; 8]) {
        for i in 0..MAX_PARAMS {
            if self.kinds[i].is_output() {
                gp[2 * i] = self.words[i].0;
                gp[2 * i + 1] = self.words[i].1;
            }
        }
    }
}

/// Append-only text sink of the enclave's UART peripheral.
#[derive(Debug, Default, Clone)]
pub struct Uart {
    lines: Vec<String>,
}

impl Uart {
    pub fn print(&mut self, line: &str) {
        self.lines.push(String::from(line));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn drain(&mut self) -> Vec<String> {
        core::mem::take(&mut self.lines)
    }
}

/// Everything a TA handler may touch.
pub struct TaEnv<'a> {
    pub mem: MemoryContext<'a>,
    services: &'a mut dyn TeeServices,
    uart: &'a mut Uart,
    uuid: Uuid,
}

impl<'a> TaEnv<'a> {
    pub fn new(mem: MemoryContext<'a>, services: &'a mut dyn TeeServices, uart: &'a mut Uart, uuid: Uuid) -> Self {
        TaEnv {
            mem,
            services,
            uart,
            uuid,
        }
    }

    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn random_bytes(&mut self, out: &mut [u8]) {
        self.services.random_bytes(out);
    }

    pub fn storage_put(&mut self, object_id: &[u8], payload: &[u8]) -> Result<(), StorageError> {
        self.services.storage_put(&self.uuid, object_id, payload)
    }

    pub fn storage_get(&mut self, object_id: &[u8]) -> Result<Vec<u8>, StorageError> {
        self.services.storage_get(&self.uuid, object_id)
    }

    pub fn storage_delete(&mut self, object_id: &[u8]) -> Result<(), StorageError> {
        self.services.storage_delete(&self.uuid, object_id)
    }

    pub fn storage_list(&mut self) -> Result<Vec<ObjectDigest>, StorageError> {
        self.services.storage_list(&self.uuid)
    }

    pub fn monotonic_tick(&mut self) -> u64 {
        self.services.monotonic_tick()
    }

    pub fn uart(&mut self, line: &str) {
        self.uart.print(line);
    }
}

/// Entry points every TA implements.
pub trait TrustedApp: Send {
    fn open_session(&mut self, _env: &mut TaEnv<'_>, _session: u32, _params: &mut Params) -> TaResult<()> {
        Ok(())
    }

    fn invoke_command(
        &mut self,
        env: &mut TaEnv<'_>,
        session: u32,
        cmd_id: u32,
        params: &mut Params,
    ) -> TaResult<()>;

    fn close_session(&mut self, _env: &mut TaEnv<'_>, _session: u32) {}

    /// Called once, after the last session closes.
    fn destroy(&mut self, _env: &mut TaEnv<'_>) {}
}

/// Resolves the `ta_kind` of a loaded image to a TA implementation.
pub trait TaRegistry: Send + Sync {
    fn instantiate(&self, image: &TaImage) -> Option<Box<dyn TrustedApp>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveEvent {
    BootFailed,
    Destroyed,
    Faulted(ReturnCode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RaiseError {
    #[error("enclave is not waiting for an interrupt ({0:?})")]
    NotWaiting(EnclaveState),
    #[error("interrupt already pending")]
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("TCM is only writable by the loader while the enclave is held in reset")]
pub struct NotInReset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsrOutcome {
    /// No interrupt was pending.
    Idle,
    /// Reply written, INT cleared.
    Replied(ReturnCode),
    /// Reset arrived while the handler ran; nothing was written back.
    Abandoned,
}

/// Number of core registers modeled per soft processor.
pub const CORE_REGISTERS: usize = 16;

pub struct EnclaveRuntime {
    tcm: Vec<u8>,
    shm: Vec<u8>,
    mailbox: [u32; FRAME_WORDS],
    int_line: bool,
    rst: ResetLine,
    state: EnclaveState,
    registers: [u32; CORE_REGISTERS],
    ta: Option<Box<dyn TrustedApp>>,
    ta_uuid: Uuid,
    destroyed: bool,
    sessions: BTreeSet<u32>,
    next_session: u32,
    quarantine_on_fault: bool,
    quarantined: bool,
    uart: Uart,
    events: Vec<EnclaveEvent>,
}

impl core::fmt::Debug for EnclaveRuntime {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EnclaveRuntime")
            .field("state", &self.state)
            .field("int_line", &self.int_line)
            .field("rst", &self.rst.is_asserted())
            .field("ta_uuid", &self.ta_uuid)
            .field("sessions", &self.sessions)
            .finish_non_exhaustive()
    }
}

impl Default for EnclaveRuntime {
    fn default() -> Self {
        Self::new(false)
    }
}

impl EnclaveRuntime {
    pub fn new(quarantine_on_fault: bool) -> Self {
        EnclaveRuntime {
            tcm: vec![0; TCM_SIZE],
            shm: vec![0; SHM_SIZE],
            mailbox: [0; FRAME_WORDS],
            int_line: false,
            rst: ResetLine::asserted(),
            state: EnclaveState::Reset,
            registers: [0; CORE_REGISTERS],
            ta: None,
            ta_uuid: Uuid::NIL,
            destroyed: false,
            sessions: BTreeSet::new(),
            next_session: 0,
            quarantine_on_fault,
            quarantined: false,
            uart: Uart::default(),
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> EnclaveState {
        self.state
    }

    pub fn int_line(&self) -> bool {
        self.int_line
    }

    pub fn reset_line(&self) -> ResetLine {
        self.rst.clone()
    }

    pub fn mailbox(&self) -> &[u32; FRAME_WORDS] {
        &self.mailbox
    }

    pub fn tcm(&self) -> &[u8] {
        &self.tcm
    }

    pub fn shm(&self) -> &[u8] {
        &self.shm
    }

    pub fn registers(&self) -> &[u32; CORE_REGISTERS] {
        &self.registers
    }

    pub fn ta_uuid(&self) -> Uuid {
        self.ta_uuid
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn has_ta(&self) -> bool {
        self.ta.is_some()
    }

    pub fn uart(&mut self) -> &mut Uart {
        &mut self.uart
    }

    pub fn drain_events(&mut self) -> Vec<EnclaveEvent> {
        core::mem::take(&mut self.events)
    }

    /// Holds the core in reset and scrubs every piece of enclave state.
    pub fn assert_reset(&mut self) {
        self.rst.assert();
        self.tcm.fill(0);
        self.shm.fill(0);
        self.mailbox = [0; FRAME_WORDS];
        self.registers = [0; CORE_REGISTERS];
        self.int_line = false;
        self.ta = None;
        self.ta_uuid = Uuid::NIL;
        self.destroyed = false;
        self.sessions.clear();
        self.next_session = 0;
        self.quarantined = false;
        self.state = EnclaveState::Reset;
    }

    /// True when TCM, shared window, mailbox and register state hold nothing.
    pub fn is_zeroized(&self) -> bool {
        self.tcm.iter().all(|b| *b == 0)
            && self.shm.iter().all(|b| *b == 0)
            && self.mailbox.iter().all(|w| *w == 0)
            && self.registers.iter().all(|w| *w == 0)
            && !self.int_line
            && self.sessions.is_empty()
            && self.next_session == 0
            && self.ta.is_none()
            && self.ta_uuid == Uuid::NIL
    }

    /// Destination port of the loader's copy.
    pub fn loader_port(&mut self) -> Result<&mut [u8], NotInReset> {
        if self.state == EnclaveState::Reset {
            Ok(&mut self.tcm)
        } else {
            Err(NotInReset)
        }
    }

    /// Releases RST: the core boots the image in its TCM and parks in WFI.
    /// A TCM that does not hold a runnable image leaves the enclave in WFI
    /// answering every request with ERROR_BAD_FORMAT.
    pub fn release_reset(&mut self, registry: &dyn TaRegistry) -> Result<(), NotInReset> {
        if self.state != EnclaveState::Reset {
            return Err(NotInReset);
        }
        self.rst.deassert();
        match TaImage::decode_prefix(&self.tcm) {
            Ok((image, _)) => {
                self.ta_uuid = image.uuid;
                self.ta = registry.instantiate(&image);
            }
            Err(_) => self.ta = None,
        }
        if self.ta.is_none() {
            self.events.push(EnclaveEvent::BootFailed);
        }
        self.state = EnclaveState::Wfi;
        Ok(())
    }

    /// Communication-agent side: copy a request into the mailbox and raise INT.
    pub fn raise_int(&mut self, words: [u32; FRAME_WORDS]) -> Result<(), RaiseError> {
        if self.state != EnclaveState::Wfi || self.rst.is_asserted() {
            return Err(RaiseError::NotWaiting(self.state));
        }
        if self.int_line {
            return Err(RaiseError::Pending);
        }
        self.mailbox = words;
        self.int_line = true;
        Ok(())
    }

    /// REE-side access to the shared window.
    pub fn shm_write(&mut self, offset: usize, data: &[u8]) -> Result<(), MemFault> {
        let end = offset.checked_add(data.len()).filter(|e| *e <= SHM_SIZE).ok_or(
            MemFault::OutOfRange {
                space: Space::Shm,
                offset,
                len: data.len(),
            },
        )?;
        self.shm[offset..end].copy_from_slice(data);
        Ok(())
    }

    pub fn shm_read(&self, offset: usize, len: usize) -> Result<&[u8], MemFault> {
        let end = offset
            .checked_add(len)
            .filter(|e| *e <= SHM_SIZE)
            .ok_or(MemFault::OutOfRange {
                space: Space::Shm,
                offset,
                len,
            })?;
        Ok(&self.shm[offset..end])
    }

    /// Enclave side: one pass through the ISR if INT is pending.
    pub fn service_interrupt(&mut self, services: &mut dyn TeeServices) -> IsrOutcome {
        if !self.int_line || self.state != EnclaveState::Wfi || self.rst.is_asserted() {
            return IsrOutcome::Idle;
        }
        self.state = EnclaveState::Isr;
        self.registers[..FRAME_WORDS].copy_from_slice(&self.mailbox);
        let reply = self.handle_request(services);
        if self.rst.is_asserted() {
            return IsrOutcome::Abandoned;
        }
        let rc = match reply {
            Some(reply) => {
                self.mailbox = reply.encode();
                reply.return_code
            }
            None => {
                self.mailbox[0] = ReturnCode::ERROR_BAD_PARAMETERS.0;
                ReturnCode::ERROR_BAD_PARAMETERS
            }
        };
        self.registers[CORE_REGISTERS - 1] = self.registers[CORE_REGISTERS - 1].wrapping_add(1);
        self.int_line = false;
        self.state = EnclaveState::Wfi;
        IsrOutcome::Replied(rc)
    }

    /// Finishes an ISR whose handler died abnormally (e.g. a host-caught
    /// panic): replies `rc`, clears INT, returns to WFI.
    pub fn abort_isr(&mut self, rc: ReturnCode) {
        if self.rst.is_asserted() {
            return;
        }
        self.mailbox[0] = rc.0;
        self.int_line = false;
        self.state = EnclaveState::Wfi;
        self.events.push(EnclaveEvent::Faulted(rc));
        if self.quarantine_on_fault {
            self.quarantined = true;
        }
    }

    fn allocate_session_id(&mut self) -> u32 {
        loop {
            self.next_session = self.next_session.wrapping_add(1);
            if self.next_session != 0 && !self.sessions.contains(&self.next_session) {
                return self.next_session;
            }
        }
    }

    fn handle_request(&mut self, services: &mut dyn TeeServices) -> Option<ReplyFrame> {
        let frame = MailboxFrame::decode(&self.mailbox).ok()?;
        let reply = |rc| Some(ReplyFrame::to_request_shape(&frame, rc));
        if self.quarantined || self.destroyed {
            return reply(ReturnCode::ERROR_GENERIC);
        }
        if self.ta.is_none() {
            return reply(ReturnCode::ERROR_BAD_FORMAT);
        }
        let session = match frame.operation {
            OperationId::Open => self.allocate_session_id(),
            _ if !self.sessions.contains(&frame.session_id) => {
                return reply(ReturnCode::ERROR_BAD_PARAMETERS)
            }
            _ => frame.session_id,
        };

        let mut params = Params::from_frame(&frame);
        let grants = core::array::from_fn(|i| match frame.param(i) {
            Param::Memref { offset, len } => Some((offset as usize, len as usize)),
            _ => None,
        });
        let EnclaveRuntime {
            tcm,
            shm,
            rst,
            ta,
            ta_uuid,
            uart,
            sessions,
            destroyed,
            events,
            quarantine_on_fault,
            quarantined,
            ..
        } = self;
        let ta = ta.as_mut().expect("checked above");
        let mut env = TaEnv::new(MemoryContext::new(tcm, shm, grants, rst), services, uart, *ta_uuid);

        let result = match frame.operation {
            OperationId::Open => {
                let r = ta.open_session(&mut env, session, &mut params);
                if r.is_ok() {
                    sessions.insert(session);
                }
                r
            }
            OperationId::Invoke => ta.invoke_command(&mut env, session, frame.cmd_id, &mut params),
            OperationId::Close => {
                sessions.remove(&session);
                ta.close_session(&mut env, session);
                Ok(())
            }
        };
        if sessions.is_empty() && !rst.is_asserted() && frame.operation != OperationId::Invoke {
            ta.destroy(&mut env);
            *destroyed = true;
            events.push(EnclaveEvent::Destroyed);
        }

        let rc = match result {
            Ok(()) => ReturnCode::SUCCESS,
            Err(TaError::Code(rc)) => rc,
            Err(TaError::Fault(_)) => {
                events.push(EnclaveEvent::Faulted(ReturnCode::ERROR_ACCESS_DENIED));
                *quarantined |= *quarantine_on_fault;
                ReturnCode::ERROR_ACCESS_DENIED
            }
            Err(TaError::Crash) => {
                events.push(EnclaveEvent::Faulted(ReturnCode::ERROR_GENERIC));
                *quarantined |= *quarantine_on_fault;
                ReturnCode::ERROR_GENERIC
            }
        };
        let mut out = ReplyFrame::to_request_shape(&frame, rc);
        if frame.operation == OperationId::Open {
            out.session_id = if rc.is_success() { session } else { 0 };
        }
        if rc.is_success() {
            params.apply_outputs(&mut out.gp);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::internal_api::{DeviceKey, MemoryBackend, Rng, SealedStore, SoftServices};
    use crate::protocol::ParamType;
    use crate::tas::{BuiltinRegistry, EchoTa, IncrementTa};
    use alloc::sync::Arc;
    use core::sync::atomic::AtomicUsize;
    use proptest::prelude::*;
    use std::sync::Mutex;

    const U: Uuid = Uuid::from_bytes([7; 16]);

    struct FnRegistry<F>(F);

    impl<F: Fn() -> Box<dyn TrustedApp> + Send + Sync> TaRegistry for FnRegistry<F> {
        fn instantiate(&self, _image: &TaImage) -> Option<Box<dyn TrustedApp>> {
            Some((self.0)())
        }
    }

    fn services() -> SoftServices<MemoryBackend> {
        SoftServices::new(Rng::from_seed(1), SealedStore::new(DeviceKey::from_seed(1), MemoryBackend::new()))
    }

    fn boot(rt: &mut EnclaveRuntime, registry: &dyn TaRegistry) {
        let image = TaImage::new(U, 1, vec![0xAB; 16]).encode().unwrap();
        rt.loader_port().unwrap()[..image.len()].copy_from_slice(&image);
        rt.release_reset(registry).unwrap();
    }

    fn booted<T: TrustedApp + Default + 'static>(quarantine: bool) -> EnclaveRuntime {
        let mut rt = EnclaveRuntime::new(quarantine);
        boot(&mut rt, &FnRegistry(|| Box::new(T::default()) as Box<dyn TrustedApp>));
        rt
    }

    fn send(rt: &mut EnclaveRuntime, svc: &mut SoftServices<MemoryBackend>, frame: &MailboxFrame) -> ReplyFrame {
        rt.raise_int(frame.encode().unwrap()).unwrap();
        assert!(matches!(rt.service_interrupt(svc), IsrOutcome::Replied(_)));
        assert!(!rt.int_line());
        ReplyFrame::decode(rt.mailbox())
    }

    fn open(rt: &mut EnclaveRuntime, svc: &mut SoftServices<MemoryBackend>) -> ReplyFrame {
        send(rt, svc, &MailboxFrame::new(OperationId::Open, 0))
    }

    fn close(rt: &mut EnclaveRuntime, svc: &mut SoftServices<MemoryBackend>, session: u32) -> ReplyFrame {
        send(rt, svc, &MailboxFrame::new(OperationId::Close, session))
    }

    fn increment(session: u32, a: u32) -> MailboxFrame {
        let mut f = MailboxFrame::new(OperationId::Invoke, session);
        f.param_type = ParamType::new([ParamKind::ValueInout, ParamKind::None, ParamKind::None, ParamKind::None]);
        f.set_param(0, Param::Value { kind: ParamKind::ValueInout, a, b: 0 });
        f
    }

    #[derive(Default)]
    struct Counting {
        destroys: Arc<AtomicUsize>,
    }

    impl TrustedApp for Counting {
        fn invoke_command(&mut self, _: &mut TaEnv<'_>, _: u32, _: u32, _: &mut Params) -> TaResult<()> {
            Ok(())
        }
        fn destroy(&mut self, _: &mut TaEnv<'_>) {
            self.destroys.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[test]
    fn starts_in_reset_and_boots_to_wfi() {
        let mut rt = EnclaveRuntime::default();
        assert_eq!(rt.state(), EnclaveState::Reset);
        assert!(rt.is_zeroized());
        assert_eq!(rt.raise_int([0; FRAME_WORDS]), Err(RaiseError::NotWaiting(EnclaveState::Reset)));
        boot(&mut rt, &BuiltinRegistry);
        assert_eq!(rt.state(), EnclaveState::Wfi);
        assert!(rt.loader_port().is_err());
        assert_eq!(&rt.tcm()[..4], b"TEOD");
    }

    #[test]
    fn session_ids_are_monotonic_from_one() {
        let mut svc = services();
        let mut rt = booted::<EchoTa>(false);
        let a = open(&mut rt, &mut svc);
        let b = open(&mut rt, &mut svc);
        assert_eq!((a.return_code, a.session_id), (ReturnCode::SUCCESS, 1));
        assert_eq!((b.return_code, b.session_id), (ReturnCode::SUCCESS, 2));
        assert_eq!(rt.session_count(), 2);
    }

    #[test]
    fn unknown_sessions_are_bad_parameters() {
        let mut svc = services();
        let mut rt = booted::<IncrementTa>(false);
        assert_eq!(send(&mut rt, &mut svc, &increment(1, 5)).return_code, ReturnCode::ERROR_BAD_PARAMETERS);
        let s = open(&mut rt, &mut svc).session_id;
        assert_eq!(send(&mut rt, &mut svc, &increment(s + 1, 5)).return_code, ReturnCode::ERROR_BAD_PARAMETERS);
        assert_eq!(close(&mut rt, &mut svc, 0).return_code, ReturnCode::ERROR_BAD_PARAMETERS);
        let r = send(&mut rt, &mut svc, &increment(s, u32::MAX));
        assert_eq!((r.return_code, r.gp[0]), (ReturnCode::SUCCESS, 0));
    }

    #[test]
    fn destroy_fires_once_after_last_close() {
        let destroys = Arc::new(AtomicUsize::new(0));
        let d = destroys.clone();
        let registry = FnRegistry(move || Box::new(Counting { destroys: d.clone() }) as Box<dyn TrustedApp>);
        let mut svc = services();
        let mut rt = EnclaveRuntime::new(false);
        boot(&mut rt, &registry);
        let a = open(&mut rt, &mut svc).session_id;
        let b = open(&mut rt, &mut svc).session_id;
        close(&mut rt, &mut svc, a);
        assert_eq!(destroys.load(Ordering::SeqCst), 0);
        close(&mut rt, &mut svc, b);
        assert_eq!(destroys.load(Ordering::SeqCst), 1);
        assert_eq!(rt.drain_events(), [EnclaveEvent::Destroyed]);
        // A destroyed TA answers nothing further and is never destroyed again.
        assert_eq!(open(&mut rt, &mut svc).return_code, ReturnCode::ERROR_GENERIC);
        assert_eq!(close(&mut rt, &mut svc, b).return_code, ReturnCode::ERROR_GENERIC);
        assert_eq!(destroys.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn boot_without_runnable_image_reports_bad_format() {
        let mut svc = services();
        let mut rt = EnclaveRuntime::default();
        rt.release_reset(&BuiltinRegistry).unwrap();
        assert_eq!(rt.drain_events(), [EnclaveEvent::BootFailed]);
        assert_eq!(open(&mut rt, &mut svc).return_code, ReturnCode::ERROR_BAD_FORMAT);
    }

    #[test]
    fn malformed_mailbox_is_bad_parameters() {
        let mut svc = services();
        let mut rt = booted::<EchoTa>(false);
        let mut words = [0u32; FRAME_WORDS];
        words[0] = 9;
        rt.raise_int(words).unwrap();
        assert_eq!(rt.service_interrupt(&mut svc), IsrOutcome::Replied(ReturnCode::ERROR_BAD_PARAMETERS));
        assert_eq!(rt.mailbox()[0], ReturnCode::ERROR_BAD_PARAMETERS.0);
        assert_eq!(rt.state(), EnclaveState::Wfi);
    }

    #[derive(Default)]
    struct Rogue;

    impl TrustedApp for Rogue {
        fn invoke_command(&mut self, env: &mut TaEnv<'_>, _: u32, cmd: u32, _: &mut Params) -> TaResult<()> {
            match cmd {
                1 => env.mem.write(Space::Shm, 100, &[1]).map_err(Into::into),
                2 => Err(TaError::Crash),
                3 => env.mem.write(Space::Tcm, TCM_SIZE - 1, &[1, 2]).map_err(Into::into),
                _ => Ok(()),
            }
        }
    }

    fn rogue(session: u32, cmd: u32) -> MailboxFrame {
        let mut f = MailboxFrame::new(OperationId::Invoke, session);
        f.cmd_id = cmd;
        f
    }

    #[test]
    fn faults_poison_only_the_request() {
        let mut svc = services();
        let mut rt = booted::<Rogue>(false);
        let s = open(&mut rt, &mut svc).session_id;
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 1)).return_code, ReturnCode::ERROR_ACCESS_DENIED);
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 3)).return_code, ReturnCode::ERROR_ACCESS_DENIED);
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 2)).return_code, ReturnCode::ERROR_GENERIC);
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 0)).return_code, ReturnCode::SUCCESS);
        assert!(rt.shm().iter().all(|b| *b == 0));
    }

    #[test]
    fn quarantine_blocks_after_fault() {
        let mut svc = services();
        let mut rt = booted::<Rogue>(true);
        let s = open(&mut rt, &mut svc).session_id;
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 1)).return_code, ReturnCode::ERROR_ACCESS_DENIED);
        assert_eq!(send(&mut rt, &mut svc, &rogue(s, 0)).return_code, ReturnCode::ERROR_GENERIC);
    }

    #[test]
    fn abort_isr_replies_and_returns_to_wfi() {
        let mut rt = booted::<EchoTa>(false);
        rt.raise_int(MailboxFrame::new(OperationId::Open, 0).encode().unwrap()).unwrap();
        rt.abort_isr(ReturnCode::ERROR_GENERIC);
        assert_eq!(rt.mailbox()[0], ReturnCode::ERROR_GENERIC.0);
        assert!(!rt.int_line());
        assert_eq!(rt.state(), EnclaveState::Wfi);
    }

    /// Asserts the reset line from inside its handler, as the manager would
    /// from another context, then keeps touching memory.
    struct ResetMidway(ResetLine);

    impl TrustedApp for ResetMidway {
        fn invoke_command(&mut self, env: &mut TaEnv<'_>, _: u32, _: u32, _: &mut Params) -> TaResult<()> {
            self.0.assert();
            env.mem.write(Space::Tcm, 0, &[0xFF; 8])?;
            Ok(())
        }
    }

    #[test]
    fn reset_mid_isr_abandons_handler() {
        let mut svc = services();
        let mut rt = EnclaveRuntime::new(false);
        let line = rt.reset_line();
        boot(&mut rt, &FnRegistry(move || Box::new(ResetMidway(line.clone())) as Box<dyn TrustedApp>));
        let s = open(&mut rt, &mut svc).session_id;
        rt.raise_int(rogue(s, 0).encode().unwrap()).unwrap();
        assert_eq!(rt.service_interrupt(&mut svc), IsrOutcome::Abandoned);
        assert_eq!(&rt.tcm()[..4], b"TEOD");
        rt.assert_reset();
        assert!(rt.is_zeroized());
        assert_eq!(rt.state(), EnclaveState::Reset);
        rt.assert_reset();
        assert!(rt.is_zeroized());
    }

    #[test]
    fn reset_zeroizes_everything() {
        let mut svc = services();
        let mut rt = booted::<IncrementTa>(false);
        let s = open(&mut rt, &mut svc).session_id;
        send(&mut rt, &mut svc, &increment(s, 41));
        rt.shm_write(0, &[9; 64]).unwrap();
        assert!(!rt.is_zeroized());
        rt.assert_reset();
        assert!(rt.is_zeroized());
        assert!(rt.tcm().iter().chain(rt.shm()).all(|b| *b == 0));
    }

    /// Performs a fixed list of shared-memory writes and records which ones
    /// the mediation layer let through.
    struct Scribbler {
        writes: Vec<(usize, usize)>,
        allowed: Arc<Mutex<Vec<bool>>>,
    }

    impl TrustedApp for Scribbler {
        fn invoke_command(&mut self, env: &mut TaEnv<'_>, _: u32, _: u32, _: &mut Params) -> TaResult<()> {
            let mut log = self.allowed.lock().unwrap();
            for (off, len) in &self.writes {
                log.push(env.mem.write(Space::Shm, *off, &vec![0xC3; *len]).is_ok());
                let _ = env.mem.write(Space::Tcm, *off, &vec![0x3C; *len]);
            }
            Ok(())
        }
    }

    fn grant_strategy() -> impl Strategy<Value = Vec<(u32, u32)>> {
        proptest::collection::vec((0u32..SHM_SIZE as u32, 0u32..512), 0..=MAX_PARAMS).prop_map(|v| {
            v.into_iter()
                .map(|(o, l)| (o, l.min(SHM_SIZE as u32 - o)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn writes_stay_inside_grants(
            grants in grant_strategy(),
            writes in proptest::collection::vec((0usize..SHM_SIZE + 64, 0usize..300), 1..40),
        ) {
            let allowed = Arc::new(Mutex::new(Vec::new()));
            let (w, a) = (writes.clone(), allowed.clone());
            let registry = FnRegistry(move || Box::new(Scribbler { writes: w.clone(), allowed: a.clone() }) as Box<dyn TrustedApp>);
            let mut svc = services();
            let mut rt = EnclaveRuntime::new(false);
            boot(&mut rt, &registry);
            let s = open(&mut rt, &mut svc).session_id;
            let mut frame = MailboxFrame::new(OperationId::Invoke, s);
            let mut kinds = [ParamKind::None; MAX_PARAMS];
            for (i, (o, l)) in grants.iter().enumerate() {
                kinds[i] = ParamKind::Memref;
                frame.param_type = ParamType::new(kinds);
                frame.set_param(i, Param::Memref { offset: *o, len: *l });
            }
            let before = rt.shm().to_vec();
            send(&mut rt, &mut svc, &frame);
            let inside = |i: usize| grants.iter().any(|(o, l)| i >= *o as usize && i < (*o + *l) as usize);
            for (i, (old, new)) in before.iter().zip(rt.shm()).enumerate() {
                prop_assert!(old == new || inside(i), "byte {} changed outside every grant", i);
            }
            let fits = |off: usize, len: usize| grants.iter().any(|(o, l)| off >= *o as usize && off + len <= (*o + *l) as usize);
            let log = allowed.lock().unwrap();
            for ((off, len), ok) in writes.iter().zip(log.iter()) {
                prop_assert_eq!(*ok, fits(*off, *len));
            }
        }
    }
}
