//! Client side of the TEE: contexts, sessions, operations and shared
//! memory, marshalled into mailbox frames for a [`HostFabric`].
//!
//! Shared memory is copy-in/copy-out. `In` and `Inout` buffers are written
//! into the slot's window before the request, `Out` blocks are zero-filled
//! instead, and `Out`/`Inout` blocks are read back after the reply.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use teeod_core::fabric::Block;
use teeod_core::protocol::{
    ImageError, MailboxFrame, OperationId, Param as WireParam, ParamKind, ReplyFrame, ReturnCode, TaImage, Uuid,
    MAX_PARAMS,
};

use crate::host::HostFabric;

/// Which layer produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Rejected by this library before reaching the fabric.
    Api,
    /// Manager, loader or communication agent.
    Fabric,
    /// The trusted application itself.
    TrustedApp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeecError {
    pub code: ReturnCode,
    pub origin: Origin,
}

impl TeecError {
    fn api(code: ReturnCode) -> Self {
        TeecError { code, origin: Origin::Api }
    }

    fn fabric(code: ReturnCode) -> Self {
        TeecError { code, origin: Origin::Fabric }
    }
}

impl fmt::Display for TeecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (origin {:?})", self.code, self.origin)
    }
}

impl std::error::Error for TeecError {}

/// Where a TA image comes from.
#[derive(Debug, Clone, Copy)]
pub enum ImageSource<'a> {
    Path(&'a Path),
    Bytes(&'a [u8]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
    Inout,
}

/// A block of an enclave's shared window plus its REE-side buffer.
#[derive(Debug)]
pub struct SharedMemory {
    slot: usize,
    generation: u64,
    offset: usize,
    direction: Direction,
    pub buffer: Vec<u8>,
}

impl SharedMemory {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }
}

/// One logical parameter of an operation.
#[derive(Debug, Default)]
pub enum Param<'a> {
    #[default]
    None,
    Value { kind: ParamKind, a: u32, b: u32 },
    Memref(&'a mut SharedMemory),
}

impl Param<'_> {
    pub fn value_in(a: u32, b: u32) -> Self {
        Param::Value { kind: ParamKind::ValueIn, a, b }
    }

    pub fn value_out() -> Self {
        Param::Value { kind: ParamKind::ValueOut, a: 0, b: 0 }
    }

    pub fn value_inout(a: u32, b: u32) -> Self {
        Param::Value { kind: ParamKind::ValueInout, a, b }
    }

    /// `(a, b)` of a value parameter.
    pub fn value(&self) -> Option<(u32, u32)> {
        match self {
            Param::Value { a, b, .. } => Some((*a, *b)),
            _ => None,
        }
    }
}

#[derive(Debug, Default)]
pub struct Operation<'a> {
    pub params: [Param<'a>; MAX_PARAMS],
}

impl<'a> Operation<'a> {
    pub fn new(params: [Param<'a>; MAX_PARAMS]) -> Self {
        Operation { params }
    }
}

/// An open session. `session_id` is zero once closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub uuid: Uuid,
    pub slot: usize,
    pub session_id: u32,
    generation: u64,
}

impl Session {
    pub fn is_open(&self) -> bool {
        self.session_id != 0
    }
}

/// A connection to one fabric. Images staged through it stay in the
/// contiguous region until the context is dropped.
pub struct Context<'f> {
    fabric: &'f HostFabric,
    staged: Mutex<HashMap<Uuid, Block>>,
}

impl fmt::Debug for Context<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Context").field("fabric", self.fabric).finish_non_exhaustive()
    }
}

fn image_error_code(e: &ImageError) -> ReturnCode {
    match e {
        ImageError::TooLarge(_) => ReturnCode::ERROR_EXCESS_DATA,
        _ => ReturnCode::ERROR_BAD_FORMAT,
    }
}

impl<'f> Context<'f> {
    pub fn new(fabric: &'f HostFabric) -> Self {
        Context {
            fabric,
            staged: Mutex::new(HashMap::new()),
        }
    }

    pub fn fabric(&self) -> &'f HostFabric {
        self.fabric
    }

    fn stage(&self, uuid: Uuid, bytes: &[u8]) -> Result<Block, TeecError> {
        let mut staged = self.staged.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(block) = staged.get(&uuid) {
            return Ok(*block);
        }
        let block = self.fabric.stage(bytes).map_err(TeecError::fabric)?;
        staged.insert(uuid, block);
        Ok(block)
    }

    pub fn open_session(&self, uuid: Uuid, image: ImageSource<'_>) -> Result<Session, TeecError> {
        self.open_session_with(uuid, image, &mut Operation::default())
    }

    /// Open with parameters for the TA's open entry point.
    pub fn open_session_with(
        &self,
        uuid: Uuid,
        image: ImageSource<'_>,
        op: &mut Operation<'_>,
    ) -> Result<Session, TeecError> {
        let owned;
        let bytes = match image {
            ImageSource::Bytes(b) => b,
            ImageSource::Path(p) => {
                owned = std::fs::read(p).map_err(|_| TeecError::api(ReturnCode::ERROR_ITEM_NOT_FOUND))?;
                &owned[..]
            }
        };
        let decoded = TaImage::decode(bytes).map_err(|e| TeecError::api(image_error_code(&e)))?;
        if decoded.uuid != uuid {
            return Err(TeecError::api(ReturnCode::ERROR_BAD_FORMAT));
        }
        if op.params.iter().any(|p| matches!(p, Param::Memref(_))) {
            // No slot is known before the open, so no window block can exist.
            return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
        }
        let block = self.stage(uuid, bytes)?;
        let mut frame = MailboxFrame::new(OperationId::Open, 0);
        for (i, p) in op.params.iter().enumerate() {
            if let Param::Value { kind, a, b } = p {
                frame.set_param(i, WireParam::Value { kind: *kind, a: *a, b: *b });
            }
        }
        let opened = self.fabric.open(uuid, block, &frame).map_err(TeecError::fabric)?;
        unmarshal_values(&opened.reply, op);
        if !opened.reply.return_code.is_success() {
            return Err(TeecError {
                code: opened.reply.return_code,
                origin: Origin::TrustedApp,
            });
        }
        Ok(Session {
            uuid,
            slot: opened.slot,
            session_id: opened.reply.session_id,
            generation: opened.generation,
        })
    }

    pub fn invoke_command(&self, session: &Session, cmd_id: u32, op: &mut Operation<'_>) -> Result<(), TeecError> {
        if !session.is_open() {
            return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
        }
        let mut frame = MailboxFrame::new(OperationId::Invoke, session.session_id);
        frame.cmd_id = cmd_id;
        let mut shm_in: Vec<(usize, Vec<u8>)> = Vec::new();
        let mut shm_out = Vec::new();
        let mut out_params = Vec::new();
        for (i, p) in op.params.iter().enumerate() {
            match p {
                Param::None => {}
                Param::Value { kind, a, b } => {
                    if !kind.is_value() {
                        return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
                    }
                    frame.set_param(i, WireParam::Value { kind: *kind, a: *a, b: *b });
                }
                Param::Memref(shm) => {
                    if shm.slot != session.slot || shm.generation != session.generation {
                        return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
                    }
                    frame.set_param(
                        i,
                        WireParam::Memref {
                            offset: shm.offset as u32,
                            len: shm.buffer.len() as u32,
                        },
                    );
                    match shm.direction {
                        Direction::In | Direction::Inout => shm_in.push((shm.offset, shm.buffer.clone())),
                        Direction::Out => shm_in.push((shm.offset, vec![0; shm.buffer.len()])),
                    }
                    if shm.direction != Direction::In {
                        shm_out.push((shm.offset, shm.buffer.len()));
                        out_params.push(i);
                    }
                }
            }
        }
        if frame.validate().is_err() {
            return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
        }
        let shm_in: Vec<(usize, &[u8])> = shm_in.iter().map(|(o, d)| (*o, &d[..])).collect();
        let (reply, outs) = self
            .fabric
            .dispatch(session.slot, Some(session.generation), &frame, &shm_in, &shm_out)
            .map_err(TeecError::fabric)?;
        for (i, bytes) in out_params.into_iter().zip(outs) {
            if let Param::Memref(shm) = &mut op.params[i] {
                shm.buffer.copy_from_slice(&bytes);
            }
        }
        unmarshal_values(&reply, op);
        if reply.return_code.is_success() {
            Ok(())
        } else {
            Err(TeecError {
                code: reply.return_code,
                origin: Origin::TrustedApp,
            })
        }
    }

    /// Closing a closed session does nothing.
    pub fn close_session(&self, session: &mut Session) -> Result<(), TeecError> {
        if !session.is_open() {
            return Ok(());
        }
        let id = std::mem::take(&mut session.session_id);
        self.fabric
            .close(session.slot, session.generation, id)
            .map(|_| ())
            .map_err(TeecError::fabric)
    }

    pub fn allocate_shared_memory(
        &self,
        session: &Session,
        len: usize,
        direction: Direction,
    ) -> Result<SharedMemory, TeecError> {
        if !session.is_open() {
            return Err(TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
        }
        let block = self
            .fabric
            .alloc_shared(session.slot, session.generation, len)
            .map_err(TeecError::fabric)?;
        Ok(SharedMemory {
            slot: session.slot,
            generation: session.generation,
            offset: block.offset,
            direction,
            buffer: vec![0; len],
        })
    }

    pub fn release_shared_memory(&self, shm: SharedMemory) {
        if !shm.buffer.is_empty() {
            self.fabric.free_shared(shm.slot, shm.generation, shm.offset);
        }
    }
}

impl Drop for Context<'_> {
    fn drop(&mut self) {
        let staged = self.staged.get_mut().unwrap_or_else(|e| e.into_inner());
        for (_, block) in staged.drain() {
            self.fabric.release_staged(block.offset);
        }
    }
}

fn unmarshal_values(reply: &ReplyFrame, op: &mut Operation<'_>) {
    for (i, p) in op.params.iter_mut().enumerate() {
        if let Param::Value { kind, a, b } = p {
            if kind.is_output() {
                if let WireParam::Value { a: ra, b: rb, .. } = reply.param(i) {
                    *a = ra;
                    *b = rb;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use teeod_core::protocol::SHM_SIZE;
    use teeod_core::tas::{kind, SHMEM16_PATTERN};

    pub(crate) fn image(n: u8, ta_kind: u32) -> (Uuid, Vec<u8>) {
        let uuid = Uuid::from_bytes([n; 16]);
        (uuid, TaImage::new(uuid, ta_kind, vec![n; 24]).encode().unwrap())
    }

    fn fabric(n: u32) -> HostFabric {
        HostFabric::boot(&SimConfig {
            enclave_count: n,
            rng_seed: Some(1),
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn increment_and_shmem16() {
        let f = fabric(2);
        let ctx = Context::new(&f);
        let (u, img) = image(1, kind::INCREMENT);
        let mut s = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        assert_eq!((s.slot, s.session_id), (0, 1));
        let mut op = Operation::new([Param::value_inout(41, 7), Param::None, Param::None, Param::None]);
        ctx.invoke_command(&s, 0, &mut op).unwrap();
        assert_eq!(op.params[0].value(), Some((42, 7)));

        let (u2, img2) = image(2, kind::SHMEM16);
        let mut s2 = ctx.open_session(u2, ImageSource::Bytes(&img2)).unwrap();
        assert_eq!(s2.slot, 1);
        let mut shm = ctx.allocate_shared_memory(&s2, 16, Direction::Out).unwrap();
        assert_eq!(shm.offset(), 0);
        shm.buffer.fill(0xEE);
        let mut op = Operation::new([Param::Memref(&mut shm), Param::None, Param::None, Param::None]);
        ctx.invoke_command(&s2, 0, &mut op).unwrap();
        assert_eq!(shm.buffer, SHMEM16_PATTERN);
        ctx.release_shared_memory(shm);
        ctx.close_session(&mut s).unwrap();
        ctx.close_session(&mut s2).unwrap();
        f.audit().unwrap();
    }

    #[test]
    fn closed_sessions_and_double_close() {
        let f = fabric(1);
        let ctx = Context::new(&f);
        let (u, img) = image(1, kind::INCREMENT);
        let mut s = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        ctx.close_session(&mut s).unwrap();
        let events = f.events().len();
        let mut op = Operation::new([Param::value_inout(1, 0), Param::None, Param::None, Param::None]);
        let err = ctx.invoke_command(&s, 0, &mut op).unwrap_err();
        assert_eq!(err, TeecError::api(ReturnCode::ERROR_BAD_PARAMETERS));
        ctx.close_session(&mut s).unwrap();
        assert_eq!(f.events().len(), events);
    }

    #[test]
    fn window_exhaustion_and_zero_length() {
        let f = fabric(1);
        let ctx = Context::new(&f);
        let (u, img) = image(1, kind::ECHO);
        let s = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        let all = ctx.allocate_shared_memory(&s, SHM_SIZE, Direction::Inout).unwrap();
        assert_eq!(
            ctx.allocate_shared_memory(&s, 1, Direction::In).unwrap_err().code,
            ReturnCode::ERROR_OUT_OF_MEMORY
        );
        let empty = ctx.allocate_shared_memory(&s, 0, Direction::In).unwrap();
        assert!(empty.is_empty());
        ctx.release_shared_memory(all);
        assert_eq!(ctx.allocate_shared_memory(&s, 1, Direction::In).unwrap().offset(), 0);
    }

    #[test]
    fn image_checks() {
        let f = fabric(1);
        let ctx = Context::new(&f);
        let (u, img) = image(1, kind::INCREMENT);
        let other = Uuid::from_bytes([9; 16]);
        assert_eq!(
            ctx.open_session(other, ImageSource::Bytes(&img)).unwrap_err().code,
            ReturnCode::ERROR_BAD_FORMAT
        );
        let big = vec![0u8; 65537];
        assert_eq!(
            ctx.open_session(u, ImageSource::Bytes(&big)).unwrap_err().code,
            ReturnCode::ERROR_EXCESS_DATA
        );
        let (u3, unknown) = image(3, 99);
        assert_eq!(
            ctx.open_session(u3, ImageSource::Bytes(&unknown)).unwrap_err().code,
            ReturnCode::ERROR_BAD_FORMAT
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inc.ta");
        std::fs::write(&path, &img).unwrap();
        let s = ctx.open_session(u, ImageSource::Path(&path)).unwrap();
        assert!(s.is_open());
    }

    #[test]
    fn warm_open_shares_slot() {
        let f = fabric(2);
        let ctx = Context::new(&f);
        let (u, img) = image(1, kind::INCREMENT);
        let mut a = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        let mut b = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        assert_eq!(a.slot, b.slot);
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(f.load_count(), 1);
        ctx.close_session(&mut a).unwrap();
        assert!(f.state().is_taken(b.slot));
        ctx.close_session(&mut b).unwrap();
        f.quiesce();
        assert!(!f.state().is_taken(b.slot));
        let mut c = ctx.open_session(u, ImageSource::Bytes(&img)).unwrap();
        assert_eq!(f.load_count(), 2);
        // A handle from before the reload is stale.
        let mut op = Operation::new([Param::value_inout(1, 0), Param::None, Param::None, Param::None]);
        let stale = Session { session_id: 1, ..a.clone() };
        assert!(ctx.invoke_command(&stale, 0, &mut op).is_err());
        ctx.close_session(&mut c).unwrap();
    }
}
