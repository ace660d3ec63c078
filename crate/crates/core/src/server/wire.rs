//! Length-prefixed binary framing.
//!
//! ```text
//! length: u32 BE (payload bytes) | type: u8 | payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const HEADER_LEN: usize = 5;
pub const DEFAULT_MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Control = 0x01,
    Audio = 0x02,
    Tokens = 0x03,
    Done = 0x04,
    Error = 0x7F,
}

impl TryFrom<u8> for FrameType {
    type Error = WireError;
    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => FrameType::Control,
            0x02 => FrameType::Audio,
            0x03 => FrameType::Tokens,
            0x04 => FrameType::Done,
            0x7F => FrameType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown frame type 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame payload of {len} bytes exceeds limit {max}")]
    TooLarge { len: usize, max: usize },
    #[error("{0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
}

impl Frame {
    pub fn new(kind: FrameType, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn json<T: serde::Serialize>(kind: FrameType, value: &T) -> Self {
        Self::new(kind, serde_json::to_vec(value).expect("serializable"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decode one frame from the front of `buf`; returns it with the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8], max: usize) -> Result<(Frame, usize), WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_LEN,
                have: buf.len(),
            });
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        if len > max {
            return Err(WireError::TooLarge { len, max });
        }
        let kind = FrameType::try_from(buf[4])?;
        let total = HEADER_LEN + len;
        if buf.len() < total {
            return Err(WireError::Truncated {
                needed: total,
                have: buf.len(),
            });
        }
        Ok((Frame::new(kind, buf[HEADER_LEN..total].to_vec()), total))
    }
}

/// Read one frame; `Ok(None)` on a clean end of stream before any header
/// byte.
pub fn read_frame(r: &mut impl Read, max: usize) -> Result<Option<Frame>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER_LEN,
                    have: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
    if len > max {
        return Err(WireError::TooLarge { len, max });
    }
    let kind = FrameType::try_from(header[4])?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: HEADER_LEN + len,
            have: HEADER_LEN,
        },
        _ => e.into(),
    })?;
    Ok(Some(Frame { kind, payload }))
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind() -> impl Strategy<Value = FrameType> {
        prop_oneof![
            Just(FrameType::Control),
            Just(FrameType::Audio),
            Just(FrameType::Tokens),
            Just(FrameType::Done),
            Just(FrameType::Error),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(k in kind(), payload in prop::collection::vec(any::<u8>(), 0..2048)) {
            let f = Frame::new(k, payload);
            let bytes = f.encode();
            let (back, used) = Frame::decode(&bytes, DEFAULT_MAX_FRAME).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&back, &f);
            let streamed = read_frame(&mut bytes.as_slice(), DEFAULT_MAX_FRAME).unwrap().unwrap();
            prop_assert_eq!(streamed, f);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = Frame::decode(&bytes, 1024);
            let _ = read_frame(&mut bytes.as_slice(), 1024);
        }
    }

    #[test]
    fn header_layout() {
        let f = Frame::new(FrameType::Done, vec![9, 8, 7]);
        assert_eq!(f.encode(), vec![0, 0, 0, 3, 0x04, 9, 8, 7]);
    }

    #[test]
    fn typed_errors() {
        assert!(matches!(Frame::decode(&[0, 0], 10), Err(WireError::Truncated { .. })));
        assert!(matches!(Frame::decode(&[0, 0, 0, 1, 0x09, 0], 10), Err(WireError::UnknownType(9))));
        assert!(matches!(Frame::decode(&[0, 0, 1, 0, 0x01], 10), Err(WireError::TooLarge { len: 256, .. })));
        assert!(matches!(Frame::decode(&[0, 0, 0, 4, 0x01, 1], 10), Err(WireError::Truncated { needed: 9, have: 6 })));
        assert!(read_frame(&mut [].as_slice(), 10).unwrap().is_none());
        assert!(matches!(read_frame(&mut [0u8, 0].as_slice(), 10), Err(WireError::Truncated { .. })));
        assert!(matches!(read_frame(&mut [0u8, 0, 0, 2, 1, 5].as_slice(), 10), Err(WireError::Truncated { .. })));
    }
}
