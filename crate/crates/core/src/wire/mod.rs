//! Framing and message vocabulary for all socket traffic.

mod codec;
mod message;

pub use codec::{
    canonical_document, canonicalize, decode_frame, decode_payload, encode_frame, frame_payload, FrameDecoder,
    MAX_FRAME_LEN,
};
pub use message::{LogStream, Message};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("value outside the document model: {0}")]
    NonEncodable(String),
    #[error("frame payload of {len} bytes exceeds the 16 MiB limit")]
    FrameTooLarge { len: usize },
    #[error("incomplete frame, {needed} more bytes required")]
    NeedMoreBytes { needed: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

/// Builds a document number, rejecting NaN and infinities.
pub fn number(x: f64) -> Result<serde_json::Value, WireError> {
    serde_json::Number::from_f64(x)
        .map(serde_json::Value::Number)
        .ok_or_else(|| WireError::NonEncodable(format!("{x} is not a finite number")))
}

/// Byte strings travel as standard base64 text.
pub(crate) mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
