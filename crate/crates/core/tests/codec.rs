use iotarch::device::frame::{crc16_ccitt_false, from_hex, MAGIC};
use iotarch::device::{decode_frame, encode_frame, DeviceFrame, FrameError, FrameType, Payload};
use proptest::prelude::*;

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/data/frames/{name}.hex", env!("CARGO_MANIFEST_DIR"));
    from_hex(std::fs::read_to_string(path).unwrap().trim()).unwrap()
}

#[test]
fn crc_check_value() {
    // standard check input for CRC-16/CCITT-FALSE
    assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
}

#[test]
fn decodes_golden_frame() {
    let f = decode_frame(&fixture("telemetry_22_5")).unwrap();
    assert_eq!(f.frame_type, FrameType::Telemetry);
    assert_eq!((f.device_id, f.resource_id, f.timestamp), (42, 1, 10));
    assert_eq!(f.payload, Payload::Float(22.5));
}

#[test]
fn rejects_damage() {
    let good = fixture("command_bool_on");
    assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(FrameError::Truncated { .. })));
    assert!(matches!(decode_frame(&[]), Err(FrameError::Truncated { .. })));

    let mut magic = good.clone();
    magic[0] = MAGIC ^ 0xFF;
    assert_eq!(decode_frame(&magic), Err(FrameError::BadMagic(MAGIC ^ 0xFF)));

    let mut longer = good.clone();
    longer.push(0);
    assert_eq!(decode_frame(&longer), Err(FrameError::TrailingBytes(1)));

    let mut crc = good.clone();
    let last = crc.len() - 1;
    crc[last] ^= 0x01;
    assert!(matches!(decode_frame(&crc), Err(FrameError::CrcMismatch { .. })));
}

#[test]
fn oversized_text_is_refused() {
    let f = DeviceFrame {
        frame_type: FrameType::Telemetry,
        device_id: 1,
        resource_id: 1,
        timestamp: 0,
        payload: Payload::Text("x".repeat(70_000)),
    };
    assert_eq!(encode_frame(&f), Err(FrameError::PayloadTooLarge(70_000)));
}

proptest! {
    #[test]
    fn float_roundtrip_is_bit_exact(bits in any::<u64>(), dev in any::<u32>()) {
        let f = DeviceFrame {
            frame_type: FrameType::Telemetry,
            device_id: dev,
            resource_id: 3,
            timestamp: 9,
            payload: Payload::Float(f64::from_bits(bits)),
        };
        let back = decode_frame(&encode_frame(&f).unwrap()).unwrap();
        prop_assert_eq!(back.payload.as_f64().map(f64::to_bits), Some(bits));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_frame(&bytes);
    }
}
