//! DeviceFrame v1 wire codec.
//!
//! ```text
//! offset size field
//! 0      1    magic 0xA7
//! 1      1    version 0x01
//! 2      1    frame type (0x01 telemetry, 0x02 command-ack, 0x03 heartbeat, 0x81 command)
//! 3      4    device id, big-endian
//! 7      2    resource id, big-endian
//! 9      8    timestamp tick, big-endian
//! 17     1    payload kind (0x01 f64, 0x02 bool, 0x03 UTF-8 text)
//! 18     n    payload: 8 bytes f64 BE | 1 byte 0x00/0x01 | u16 BE length + bytes
//! 18+n   2    CRC-16/CCITT-FALSE over bytes [0, 18+n), big-endian
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: u8 = 0xA7;
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 18;
const CRC_LEN: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic byte 0x{0:02X}")]
    BadMagic(u8),
    #[error("unsupported version 0x{0:02X}")]
    UnsupportedVersion(u8),
    #[error("unknown frame type 0x{0:02X}")]
    UnknownFrameType(u8),
    #[error("unknown payload kind 0x{0:02X}")]
    UnknownPayloadKind(u8),
    #[error("crc mismatch: frame carries 0x{carried:04X}, computed 0x{computed:04X}")]
    CrcMismatch { carried: u16, computed: u16 },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("bool payload byte 0x{0:02X} is neither 0x00 nor 0x01")]
    InvalidBool(u8),
    #[error("text payload is not valid UTF-8")]
    InvalidUtf8,
    #[error("text payload of {0} bytes exceeds 65535")]
    PayloadTooLarge(usize),
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= u16::from(byte) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameType {
    Telemetry,
    CommandAck,
    Heartbeat,
    Command,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::Telemetry => 0x01,
            FrameType::CommandAck => 0x02,
            FrameType::Heartbeat => 0x03,
            FrameType::Command => 0x81,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, FrameError> {
        Ok(match code {
            0x01 => FrameType::Telemetry,
            0x02 => FrameType::CommandAck,
            0x03 => FrameType::Heartbeat,
            0x81 => FrameType::Command,
            other => return Err(FrameError::UnknownFrameType(other)),
        })
    }
}

/// A typed value carried by a frame. Float equality is bitwise so that NaN
/// payloads still round-trip.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Bool(bool),
    Float(f64),
    Text(String),
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::Float(a), Payload::Float(b)) => a.to_bits() == b.to_bits(),
            (Payload::Bool(a), Payload::Bool(b)) => a == b,
            (Payload::Text(a), Payload::Text(b)) => a == b,
            _ => false,
        }
    }
}

impl Payload {
    pub fn kind_code(&self) -> u8 {
        match self {
            Payload::Float(_) => 0x01,
            Payload::Bool(_) => 0x02,
            Payload::Text(_) => 0x03,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::Float(_) => "float",
            Payload::Bool(_) => "bool",
            Payload::Text(_) => "text",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Payload::Float(v) => Some(*v),
            Payload::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Payload::Text(_) => None,
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Float(v) => write!(f, "{v}"),
            Payload::Bool(b) => write!(f, "{}", if *b { "on" } else { "off" }),
            Payload::Text(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceFrame {
    pub frame_type: FrameType,
    pub device_id: u32,
    pub resource_id: u16,
    pub timestamp: u64,
    pub payload: Payload,
}

impl DeviceFrame {
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self)
    }
}

pub fn encode_frame(frame: &DeviceFrame) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 10);
    out.push(MAGIC);
    out.push(VERSION);
    out.push(frame.frame_type.code());
    out.extend_from_slice(&frame.device_id.to_be_bytes());
    out.extend_from_slice(&frame.resource_id.to_be_bytes());
    out.extend_from_slice(&frame.timestamp.to_be_bytes());
    out.push(frame.payload.kind_code());
    match &frame.payload {
        Payload::Float(v) => out.extend_from_slice(&v.to_be_bytes()),
        Payload::Bool(b) => out.push(u8::from(*b)),
        Payload::Text(s) => {
            let len = u16::try_from(s.len()).map_err(|_| FrameError::PayloadTooLarge(s.len()))?;
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    let crc = crc16_ccitt_false(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

fn need(bytes: &[u8], n: usize) -> Result<(), FrameError> {
    if bytes.len() < n {
        Err(FrameError::Truncated { needed: n, got: bytes.len() })
    } else {
        Ok(())
    }
}

pub fn decode_frame(bytes: &[u8]) -> Result<DeviceFrame, FrameError> {
    need(bytes, 1)?;
    if bytes[0] != MAGIC {
        return Err(FrameError::BadMagic(bytes[0]));
    }
    need(bytes, 2)?;
    if bytes[1] != VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[1]));
    }
    need(bytes, HEADER_LEN)?;
    let frame_type = FrameType::from_code(bytes[2])?;
    let kind = bytes[17];
    let payload_len = match kind {
        0x01 => 8,
        0x02 => 1,
        0x03 => {
            need(bytes, HEADER_LEN + 2)?;
            2 + usize::from(u16::from_be_bytes([bytes[18], bytes[19]]))
        }
        other => return Err(FrameError::UnknownPayloadKind(other)),
    };
    let body_end = HEADER_LEN + payload_len;
    let total = body_end + CRC_LEN;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(FrameError::TrailingBytes(bytes.len() - total));
    }
    let carried = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
    let computed = crc16_ccitt_false(&bytes[..body_end]);
    if carried != computed {
        return Err(FrameError::CrcMismatch { carried, computed });
    }

    let device_id = u32::from_be_bytes(bytes[3..7].try_into().expect("4 bytes"));
    let resource_id = u16::from_be_bytes([bytes[7], bytes[8]]);
    let timestamp = u64::from_be_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let raw = &bytes[HEADER_LEN..body_end];
    let payload = match kind {
        0x01 => Payload::Float(f64::from_be_bytes(raw.try_into().expect("8 bytes"))),
        0x02 => match raw[0] {
            0x00 => Payload::Bool(false),
            0x01 => Payload::Bool(true),
            other => return Err(FrameError::InvalidBool(other)),
        },
        _ => Payload::Text(String::from_utf8(raw[2..].to_vec()).map_err(|_| FrameError::InvalidUtf8)?),
    };
    Ok(DeviceFrame { frame_type, device_id, resource_id, timestamp, payload })
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn from_hex(text: &str) -> Option<Vec<u8>> {
    let clean: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    if clean.len() % 2 != 0 {
        return None;
    }
    clean
        .chunks(2)
        .map(|pair| u8::from_str_radix(std::str::from_utf8(pair).ok()?, 16).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn telemetry(payload: Payload) -> DeviceFrame {
        DeviceFrame { frame_type: FrameType::Telemetry, device_id: 1, resource_id: 1, timestamp: 0, payload }
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    #[test]
    fn float_layout() {
        let bytes = encode_frame(&telemetry(Payload::Float(0.0))).unwrap();
        assert_eq!(
            to_hex(&bytes[..bytes.len() - 2]),
            "a701010000000100010000000000000000010000000000000000"
        );
    }

    #[test]
    fn bool_payload_byte() {
        let bytes = encode_frame(&telemetry(Payload::Bool(true))).unwrap();
        assert_eq!(bytes[17], 0x02);
        assert_eq!(bytes[18], 0x01);
        assert_eq!(bytes.len(), HEADER_LEN + 1 + CRC_LEN);
    }

    #[test]
    fn empty_input_is_truncated() {
        assert!(matches!(decode_frame(&[]), Err(FrameError::Truncated { .. })));
    }

    #[test]
    fn structural_errors_are_distinct() {
        let good = encode_frame(&telemetry(Payload::Float(1.5))).unwrap();
        let mut b = good.clone();
        b[0] = 0x00;
        assert_eq!(decode_frame(&b), Err(FrameError::BadMagic(0)));
        let mut b = good.clone();
        b[1] = 0x02;
        assert_eq!(decode_frame(&b), Err(FrameError::UnsupportedVersion(2)));
        let mut b = good.clone();
        b[17] = 0x09;
        assert_eq!(decode_frame(&b), Err(FrameError::UnknownPayloadKind(9)));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(decode_frame(&b), Err(FrameError::TrailingBytes(1)));
        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(FrameError::Truncated { .. })));
        let mut b = good;
        b[20] ^= 0x10;
        assert!(matches!(decode_frame(&b), Err(FrameError::CrcMismatch { .. })));
    }

    #[test]
    fn oversized_text_rejected() {
        let big = "x".repeat(65_536);
        assert_eq!(encode_frame(&telemetry(Payload::Text(big))), Err(FrameError::PayloadTooLarge(65_536)));
        let max = "x".repeat(65_535);
        let f = telemetry(Payload::Text(max));
        assert_eq!(decode_frame(&encode_frame(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn hex_helpers() {
        assert_eq!(from_hex("a7 01\n"), Some(vec![0xa7, 0x01]));
        assert_eq!(from_hex("a"), None);
        assert_eq!(to_hex(&[0, 255]), "00ff");
    }
}
