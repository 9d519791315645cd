//! Wire framing: fixed 28-byte message header plus raw payload bytes.
//!
//! Header fields travel big-endian. Payloads travel in the sender's native
//! byte order; the header's flags byte records that order and the receiver
//! swaps if needed ("receiver makes right"), so sends can go straight from
//! application buffers.

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 28;
pub const MAGIC: [u8; 4] = *b"GMP2";
pub const VERSION: u8 = 1;
pub const FLAG_LITTLE_ENDIAN: u8 = 0x01;

/// The four basic datatypes that may appear on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Bytes,
    Int32,
    Int64,
    Float64,
}

impl Dtype {
    pub fn code(self) -> u16 {
        match self {
            Dtype::Bytes => 0,
            Dtype::Int32 => 1,
            Dtype::Int64 => 2,
            Dtype::Float64 => 3,
        }
    }

    pub fn from_code(code: u16) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::Bytes),
            1 => Some(Dtype::Int32),
            2 => Some(Dtype::Int64),
            3 => Some(Dtype::Float64),
            _ => None,
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::Bytes => 1,
            Dtype::Int32 => 4,
            Dtype::Int64 | Dtype::Float64 => 8,
        }
    }
}

/// Rust element types that can travel as a payload.
pub trait WireData: Copy + Default + 'static {
    const DTYPE: Dtype;
}

impl WireData for u8 {
    const DTYPE: Dtype = Dtype::Bytes;
}
impl WireData for i32 {
    const DTYPE: Dtype = Dtype::Int32;
}
impl WireData for i64 {
    const DTYPE: Dtype = Dtype::Int64;
}
impl WireData for f64 {
    const DTYPE: Dtype = Dtype::Float64;
}

/// View a typed slice as raw bytes for sending.
pub fn as_bytes<T: WireData>(data: &[T]) -> &[u8] {
    // Safe for the four closed element types: all are plain-old-data.
    unsafe {
        std::slice::from_raw_parts(data.as_ptr() as *const u8, std::mem::size_of_val(data))
    }
}

/// Decode native-order payload bytes into a typed vector.
pub fn from_bytes<T: WireData>(bytes: &[u8]) -> Result<Vec<T>> {
    let size = T::DTYPE.elem_size();
    if !bytes.len().is_multiple_of(size) {
        return Err(Error::Usage(format!(
            "payload of {} bytes is not a whole number of {size}-byte elements",
            bytes.len()
        )));
    }
    let mut out = vec![T::default(); bytes.len() / size];
    unsafe {
        std::ptr::copy_nonoverlapping(
            bytes.as_ptr(),
            out.as_mut_ptr() as *mut u8,
            bytes.len(),
        );
    }
    Ok(out)
}

pub fn native_is_little_endian() -> bool {
    cfg!(target_endian = "little")
}

/// Framed message metadata. `source` is always a world rank and `tag` is
/// always concrete; wildcards never appear on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub little_endian: bool,
    pub dtype: Dtype,
    pub source_world_rank: i32,
    pub context_id: i32,
    pub tag: i32,
    pub payload_len: u64,
}

impl WireHeader {
    pub fn new(dtype: Dtype, source: usize, context_id: i32, tag: i32, len: usize) -> WireHeader {
        WireHeader {
            little_endian: native_is_little_endian(),
            dtype,
            source_world_rank: source as i32,
            context_id,
            tag,
            payload_len: len as u64,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = if self.little_endian { FLAG_LITTLE_ENDIAN } else { 0 };
        b[6..8].copy_from_slice(&self.dtype.code().to_be_bytes());
        b[8..12].copy_from_slice(&self.source_world_rank.to_be_bytes());
        b[12..16].copy_from_slice(&self.context_id.to_be_bytes());
        b[16..20].copy_from_slice(&self.tag.to_be_bytes());
        b[20..28].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }

    /// Decode and validate a header. `peer` only labels the error.
    pub fn decode(b: &[u8; HEADER_LEN], peer: usize) -> Result<WireHeader> {
        if b[0..4] != MAGIC {
            return Err(Error::Protocol { peer, detail: format!("bad magic {:02x?}", &b[0..4]) });
        }
        if b[4] != VERSION {
            return Err(Error::Protocol { peer, detail: format!("bad version {}", b[4]) });
        }
        let dtype_code = u16::from_be_bytes([b[6], b[7]]);
        let dtype = Dtype::from_code(dtype_code).ok_or_else(|| Error::Protocol {
            peer,
            detail: format!("unknown dtype code {dtype_code}"),
        })?;
        let tag = i32::from_be_bytes([b[16], b[17], b[18], b[19]]);
        if tag < 0 {
            return Err(Error::Protocol { peer, detail: format!("negative tag {tag} on wire") });
        }
        Ok(WireHeader {
            little_endian: b[5] & FLAG_LITTLE_ENDIAN != 0,
            dtype,
            source_world_rank: i32::from_be_bytes([b[8], b[9], b[10], b[11]]),
            context_id: i32::from_be_bytes([b[12], b[13], b[14], b[15]]),
            tag,
            payload_len: u64::from_be_bytes(b[20..28].try_into().unwrap()),
        })
    }
}

/// Swap a payload to native byte order in place if the sender's order
/// differs. Byte payloads are never swapped.
pub fn convert_to_native(hdr: &WireHeader, payload: &mut [u8]) {
    if hdr.dtype == Dtype::Bytes || hdr.little_endian == native_is_little_endian() {
        return;
    }
    let size = hdr.dtype.elem_size();
    for chunk in payload.chunks_exact_mut(size) {
        chunk.reverse();
    }
}
