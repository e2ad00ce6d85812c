//! Length-prefixed frames: a 4-byte big-endian length followed by the
//! canonical text of one message.

use super::{Message, WireError};

/// Largest payload a frame may carry (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const PREFIX_LEN: usize = 4;

/// Deterministic text encoding of a message: keys sorted bytewise, no
/// insignificant whitespace, shortest round-trip numbers.
pub fn canonicalize(message: &Message) -> Result<Vec<u8>, WireError> {
    // `serde_json::Map` is ordered by key, so going through `Value` sorts
    // every nested map as well.
    let doc = serde_json::to_value(message).map_err(|e| WireError::NonEncodable(e.to_string()))?;
    canonical_document(&doc)
}

/// Canonical text of an arbitrary document value.
pub fn canonical_document(doc: &serde_json::Value) -> Result<Vec<u8>, WireError> {
    serde_json::to_vec(doc).map_err(|e| WireError::NonEncodable(e.to_string()))
}

/// Wraps an already-encoded payload in a frame.
pub fn frame_payload(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge { len: payload.len() });
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn encode_frame(message: &Message) -> Result<Vec<u8>, WireError> {
    frame_payload(&canonicalize(message)?)
}

/// Decodes the first frame in `bytes`, returning the message and the bytes
/// that follow it.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, &[u8]), WireError> {
    if bytes.len() < PREFIX_LEN {
        return Err(WireError::NeedMoreBytes {
            needed: PREFIX_LEN - bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge { len });
    }
    let end = PREFIX_LEN + len;
    if bytes.len() < end {
        return Err(WireError::NeedMoreBytes {
            needed: end - bytes.len(),
        });
    }
    let message = decode_payload(&bytes[PREFIX_LEN..end])?;
    Ok((message, &bytes[end..]))
}

pub fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(payload).map_err(|e| WireError::MalformedPayload(format!("invalid utf-8: {e}")))?;
    serde_json::from_str(text).map_err(|e| WireError::MalformedPayload(e.to_string()))
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, or `None` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        match decode_frame(&self.buf) {
            Ok((message, rest)) => {
                let consumed = self.buf.len() - rest.len();
                self.buf.drain(..consumed);
                Ok(Some(message))
            }
            Err(WireError::NeedMoreBytes { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Bytes buffered but not yet decoded.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
