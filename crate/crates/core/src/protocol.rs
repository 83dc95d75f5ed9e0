//! Wire-level data model shared by the fabric, the enclaves and the REE client.
//!
//! Everything here is a plain value type. The mailbox is twelve 32-bit words,
//! serialized little-endian when it has to become bytes (logs, golden files):
//!
//! ```text
//! word  0      operation_id (request) / return code (reply)
//! word  1      session_id
//! word  2      param_type   four 4-bit nibbles, upper 16 bits zero
//! words 3..=10 gp[0..8]     logical parameter i lives in gp[2i], gp[2i+1]
//! word  11     cmd_id
//! ```

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

/// Private TCM of every enclave, in bytes.
pub const TCM_SIZE: usize = 64 * 1024;
/// Shared-memory window of every enclave, in bytes.
pub const SHM_SIZE: usize = 8 * 1024;
/// Number of 32-bit words in a mailbox frame.
pub const FRAME_WORDS: usize = 12;
/// Logical parameters per frame (two gp words each).
pub const MAX_PARAMS: usize = 4;
/// Size of the fixed TA image header.
pub const IMAGE_HEADER_LEN: usize = 32;
/// Image magic, "TEOD".
pub const IMAGE_MAGIC: [u8; 4] = *b"TEOD";
pub const IMAGE_VERSION: u32 = 1;

/// 128-bit TA identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Uuid([u8; 16]);

impl Uuid {
    pub const NIL: Uuid = Uuid([0; 16]);

    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        Uuid(bytes)
    }

    pub const fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// The four big-endian words written to the manager's UUID registers.
    pub fn to_words(&self) -> [u32; 4] {
        let mut words = [0u32; 4];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u32::from_be_bytes(self.0[i * 4..i * 4 + 4].try_into().unwrap());
        }
        words
    }

    pub fn from_words(words: [u32; 4]) -> Self {
        let mut bytes = [0u8; 16];
        for (i, w) in words.iter().enumerate() {
            bytes[i * 4..i * 4 + 4].copy_from_slice(&w.to_be_bytes());
        }
        Uuid(bytes)
    }
}

impl fmt::Display for Uuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&uuid::Uuid::from_bytes(self.0).hyphenated(), f)
    }
}

impl fmt::Debug for Uuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Uuid({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed uuid")]
pub struct UuidParseError;

impl FromStr for Uuid {
    type Err = UuidParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        uuid::Uuid::parse_str(s)
            .map(|u| Uuid(*u.as_bytes()))
            .map_err(|_| UuidParseError)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum OperationId {
    Open = 1,
    Invoke = 2,
    Close = 3,
}

impl TryFrom<u32> for OperationId {
    type Error = FrameError;

    fn try_from(code: u32) -> Result<Self, FrameError> {
        match code {
            1 => Ok(OperationId::Open),
            2 => Ok(OperationId::Invoke),
            3 => Ok(OperationId::Close),
            other => Err(FrameError::UnknownOperation(other)),
        }
    }
}

/// Type of one logical parameter (one nibble of `param_type`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum ParamKind {
    #[default]
    None = 0,
    ValueIn = 1,
    ValueOut = 2,
    ValueInout = 3,
    Memref = 5,
}

impl ParamKind {
    pub fn from_nibble(nibble: u8) -> Option<Self> {
        match nibble {
            0 => Some(ParamKind::None),
            1 => Some(ParamKind::ValueIn),
            2 => Some(ParamKind::ValueOut),
            3 => Some(ParamKind::ValueInout),
            5 => Some(ParamKind::Memref),
            _ => None,
        }
    }

    pub fn is_value(self) -> bool {
        matches!(
            self,
            ParamKind::ValueIn | ParamKind::ValueOut | ParamKind::ValueInout
        )
    }

    /// Whether the TA's result for this parameter travels back in the reply.
    pub fn is_output(self) -> bool {
        matches!(self, ParamKind::ValueOut | ParamKind::ValueInout)
    }
}

/// Packed parameter-type word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ParamType(u32);

impl ParamType {
    pub const NONE: ParamType = ParamType(0);

    pub fn new(kinds: [ParamKind; MAX_PARAMS]) -> Self {
        let packed = kinds
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, k)| acc | ((*k as u32) << (4 * i)));
        ParamType(packed)
    }

    pub fn from_raw(raw: u32) -> Result<Self, FrameError> {
        if raw >> 16 != 0 {
            return Err(FrameError::BadParamType(raw));
        }
        for i in 0..MAX_PARAMS {
            if ParamKind::from_nibble(((raw >> (4 * i)) & 0xF) as u8).is_none() {
                return Err(FrameError::BadParamType(raw));
            }
        }
        Ok(ParamType(raw))
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    pub fn kind(self, index: usize) -> ParamKind {
        ParamKind::from_nibble(((self.0 >> (4 * index)) & 0xF) as u8).unwrap_or_default()
    }

    pub fn kinds(self) -> [ParamKind; MAX_PARAMS] {
        core::array::from_fn(|i| self.kind(i))
    }
}

/// Return codes carried in word 0 of a reply. TAs may define their own codes;
/// the fabric passes them through verbatim.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReturnCode(pub u32);

impl ReturnCode {
    pub const SUCCESS: ReturnCode = ReturnCode(0x0000_0000);
    pub const ERROR_GENERIC: ReturnCode = ReturnCode(0xFFFF_0000);
    pub const ERROR_ACCESS_DENIED: ReturnCode = ReturnCode(0xFFFF_0001);
    pub const ERROR_BAD_FORMAT: ReturnCode = ReturnCode(0xFFFF_0005);
    pub const ERROR_BAD_PARAMETERS: ReturnCode = ReturnCode(0xFFFF_0006);
    pub const ERROR_ITEM_NOT_FOUND: ReturnCode = ReturnCode(0xFFFF_0008);
    pub const ERROR_OUT_OF_MEMORY: ReturnCode = ReturnCode(0xFFFF_000C);
    pub const ERROR_BUSY: ReturnCode = ReturnCode(0xFFFF_000D);
    pub const ERROR_SHORT_BUFFER: ReturnCode = ReturnCode(0xFFFF_0010);
    pub const ERROR_TAMPERED: ReturnCode = ReturnCode(0xF010_0001);
    pub const ERROR_OUT_OF_ENCLAVES: ReturnCode = ReturnCode(0xFFFF_3001);
    pub const ERROR_EXCESS_DATA: ReturnCode = ReturnCode(0xFFFF_3002);

    pub fn is_success(self) -> bool {
        self == ReturnCode::SUCCESS
    }

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            ReturnCode::SUCCESS => "SUCCESS",
            ReturnCode::ERROR_GENERIC => "ERROR_GENERIC",
            ReturnCode::ERROR_ACCESS_DENIED => "ERROR_ACCESS_DENIED",
            ReturnCode::ERROR_BAD_FORMAT => "ERROR_BAD_FORMAT",
            ReturnCode::ERROR_BAD_PARAMETERS => "ERROR_BAD_PARAMETERS",
            ReturnCode::ERROR_ITEM_NOT_FOUND => "ERROR_ITEM_NOT_FOUND",
            ReturnCode::ERROR_OUT_OF_MEMORY => "ERROR_OUT_OF_MEMORY",
            ReturnCode::ERROR_BUSY => "ERROR_BUSY",
            ReturnCode::ERROR_SHORT_BUFFER => "ERROR_SHORT_BUFFER",
            ReturnCode::ERROR_TAMPERED => "ERROR_TAMPERED",
            ReturnCode::ERROR_OUT_OF_ENCLAVES => "ERROR_OUT_OF_ENCLAVES",
            ReturnCode::ERROR_EXCESS_DATA => "ERROR_EXCESS_DATA",
            _ => return None,
        })
    }
}

impl fmt::Debug for ReturnCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(f, "ReturnCode({:#010x})", self.0),
        }
    }
}

impl fmt::Display for ReturnCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => write!(f, "{name} ({:#010x})", self.0),
            None => write!(f, "{:#010x}", self.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("invalid frame: unknown operation id {0}")]
    UnknownOperation(u32),
    #[error("invalid frame: malformed param_type {0:#x}")]
    BadParamType(u32),
    #[error("invalid frame: memref parameter {index} ({offset:#x}+{len:#x}) exceeds the shared window")]
    MemrefOutOfBounds { index: usize, offset: u32, len: u32 },
    #[error("invalid frame: expected {FRAME_WORDS} words, got {0}")]
    WrongLength(usize),
}

/// A decoded view of one logical parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    None,
    Value { kind: ParamKind, a: u32, b: u32 },
    Memref { offset: u32, len: u32 },
}

/// Checks a shared-memory range against the window without wrapping.
pub fn memref_in_window(offset: u32, len: u32) -> bool {
    offset
        .checked_add(len)
        .is_some_and(|end| end as usize <= SHM_SIZE)
}

/// Request frame as written by the REE into the communication agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MailboxFrame {
    pub operation: OperationId,
    pub session_id: u32,
    pub param_type: ParamType,
    pub gp: [u32; 8],
    pub cmd_id: u32,
}

impl MailboxFrame {
    pub fn new(operation: OperationId, session_id: u32) -> Self {
        MailboxFrame {
            operation,
            session_id,
            param_type: ParamType::NONE,
            gp: [0; 8],
            cmd_id: 0,
        }
    }

    pub fn param(&self, index: usize) -> Param {
        param_at(self.param_type, &self.gp, index)
    }

    pub fn set_param(&mut self, index: usize, param: Param) {
        let mut kinds = self.param_type.kinds();
        let (kind, a, b) = match param {
            Param::None => (ParamKind::None, 0, 0),
            Param::Value { kind, a, b } => (kind, a, b),
            Param::Memref { offset, len } => (ParamKind::Memref, offset, len),
        };
        kinds[index] = kind;
        self.param_type = ParamType::new(kinds);
        self.gp[2 * index] = a;
        self.gp[2 * index + 1] = b;
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        ParamType::from_raw(self.param_type.raw())?;
        for index in 0..MAX_PARAMS {
            if let Param::Memref { offset, len } = self.param(index) {
                if !memref_in_window(offset, len) {
                    return Err(FrameError::MemrefOutOfBounds { index, offset, len });
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u32; FRAME_WORDS], FrameError> {
        self.validate()?;
        let mut words = [0u32; FRAME_WORDS];
        words[0] = self.operation as u32;
        words[1] = self.session_id;
        words[2] = self.param_type.raw();
        words[3..11].copy_from_slice(&self.gp);
        words[11] = self.cmd_id;
        Ok(words)
    }

    pub fn decode(words: &[u32]) -> Result<Self, FrameError> {
        if words.len() != FRAME_WORDS {
            return Err(FrameError::WrongLength(words.len()));
        }
        let frame = MailboxFrame {
            operation: OperationId::try_from(words[0])?,
            session_id: words[1],
            param_type: ParamType::from_raw(words[2])?,
            gp: words[3..11].try_into().unwrap(),
            cmd_id: words[11],
        };
        frame.validate()?;
        Ok(frame)
    }
}

fn param_at(param_type: ParamType, gp: &[u32; 8], index: usize) -> Param {
    let (a, b) = (gp[2 * index], gp[2 * index + 1]);
    match param_type.kind(index) {
        ParamKind::None => Param::None,
        ParamKind::Memref => Param::Memref { offset: a, len: b },
        kind => Param::Value { kind, a, b },
    }
}

/// Reply frame: the request storage with word 0 overwritten by the return code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplyFrame {
    pub return_code: ReturnCode,
    pub session_id: u32,
    pub param_type: ParamType,
    pub gp: [u32; 8],
    pub cmd_id: u32,
}

impl ReplyFrame {
    pub fn to_request_shape(request: &MailboxFrame, return_code: ReturnCode) -> Self {
        ReplyFrame {
            return_code,
            session_id: request.session_id,
            param_type: request.param_type,
            gp: request.gp,
            cmd_id: request.cmd_id,
        }
    }

    pub fn param(&self, index: usize) -> Param {
        param_at(self.param_type, &self.gp, index)
    }

    pub fn encode(&self) -> [u32; FRAME_WORDS] {
        let mut words = [0u32; FRAME_WORDS];
        words[0] = self.return_code.0;
        words[1] = self.session_id;
        words[2] = self.param_type.raw();
        words[3..11].copy_from_slice(&self.gp);
        words[11] = self.cmd_id;
        words
    }

    /// Replies are produced by trusted fabric blocks, so only the shape is
    /// checked; an unknown param_type nibble decays to NONE.
    pub fn decode(words: &[u32; FRAME_WORDS]) -> Self {
        ReplyFrame {
            return_code: ReturnCode(words[0]),
            session_id: words[1],
            param_type: ParamType::from_raw(words[2]).unwrap_or_default(),
            gp: words[3..11].try_into().unwrap(),
            cmd_id: words[11],
        }
    }
}

/// Little-endian byte image of a 12-word frame.
pub fn frame_bytes(words: &[u32; FRAME_WORDS]) -> [u8; FRAME_WORDS * 4] {
    let mut out = [0u8; FRAME_WORDS * 4];
    for (chunk, w) in out.chunks_exact_mut(4).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// Status register of the manager agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u32)]
pub enum LoadStatus {
    #[default]
    Idle = 0,
    Loading = 1,
    Loaded = 2,
    ErrFull = 3,
    ErrSize = 4,
    ErrFormat = 5,
}

impl LoadStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, LoadStatus::Idle | LoadStatus::Loading)
    }

    pub fn can_move_to(self, next: LoadStatus) -> bool {
        match (self, next) {
            (LoadStatus::Idle, LoadStatus::Loading) => true,
            (LoadStatus::Loading, n) => n.is_terminal(),
            (s, LoadStatus::Idle) => s.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal manager status transition {from:?} -> {to:?}")]
pub struct StatusTransitionError {
    pub from: LoadStatus,
    pub to: LoadStatus,
}

/// Register block shared between the REE and the manager agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ManagerRegisters {
    pub uuid: Uuid,
    pub addr: u32,
    pub size: u32,
    status: LoadStatus,
}

impl ManagerRegisters {
    pub fn status(&self) -> LoadStatus {
        self.status
    }

    pub fn set_status(&mut self, next: LoadStatus) -> Result<(), StatusTransitionError> {
        if !self.status.can_move_to(next) {
            return Err(StatusTransitionError {
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    /// uuid[4], addr, size, status.
    pub fn to_words(&self) -> [u32; 7] {
        let u = self.uuid.to_words();
        [u[0], u[1], u[2], u[3], self.addr, self.size, self.status as u32]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image of {0} bytes exceeds the {TCM_SIZE}-byte TCM")]
    TooLarge(usize),
    #[error("image truncated: {0} bytes")]
    Truncated(usize),
    #[error("bad image magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u32),
    #[error("payload length field {declared} does not match {actual} available bytes")]
    LengthMismatch { declared: u32, actual: usize },
}

impl ImageError {
    /// Manager status reported for this failure.
    pub fn status(&self) -> LoadStatus {
        match self {
            ImageError::TooLarge(_) => LoadStatus::ErrSize,
            _ => LoadStatus::ErrFormat,
        }
    }
}

/// TA image staged in contiguous memory and copied verbatim into a TCM.
///
/// Layout (little-endian): magic[4] "TEOD", version u32, uuid[16],
/// ta_kind u32, payload_len u32, payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaImage {
    pub uuid: Uuid,
    pub ta_kind: u32,
    pub payload: Vec<u8>,
}

impl TaImage {
    pub fn new(uuid: Uuid, ta_kind: u32, payload: Vec<u8>) -> Self {
        TaImage {
            uuid,
            ta_kind,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        IMAGE_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ImageError> {
        let total = self.encoded_len();
        if total > TCM_SIZE {
            return Err(ImageError::TooLarge(total));
        }
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        out.extend_from_slice(self.uuid.as_bytes());
        out.extend_from_slice(&self.ta_kind.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Strict decode: the buffer must be exactly one image.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() > TCM_SIZE {
            return Err(ImageError::TooLarge(bytes.len()));
        }
        let (image, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(ImageError::LengthMismatch {
                declared: image.payload.len() as u32,
                actual: bytes.len() - IMAGE_HEADER_LEN,
            });
        }
        Ok(image)
    }

    /// Decodes an image at the start of `bytes`, ignoring anything after it
    /// (a TCM holds the image followed by zero fill).
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), ImageError> {
        let header = bytes
            .get(..IMAGE_HEADER_LEN)
            .ok_or(ImageError::Truncated(bytes.len()))?;
        if header[0..4] != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let word = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != IMAGE_VERSION {
            return Err(ImageError::BadVersion(version));
        }
        let uuid = Uuid(header[8..24].try_into().unwrap());
        let ta_kind = word(24);
        let declared = word(28);
        let available = bytes.len() - IMAGE_HEADER_LEN;
        let end = IMAGE_HEADER_LEN
            .checked_add(declared as usize)
            .filter(|end| *end <= bytes.len() && *end <= TCM_SIZE)
            .ok_or(ImageError::LengthMismatch {
                declared,
                actual: available,
            })?;
        let image = TaImage {
            uuid,
            ta_kind,
            payload: bytes[IMAGE_HEADER_LEN..end].to_vec(),
        };
        Ok((image, end))
    }
}
