//! Transmission representation: float-to-integer conversion, zero-run RLE,
//! LZMA payload compression and the framed wire format.
//!
//! Wire frame layout, all little-endian:
//!
//! ```text
//! magic "AVDC" | version u8 | flags u8 | C u16 | L u16 | N u8 | tau i8
//! | omega f32 | sequence u32 | payload_len u32 | payload (LZMA(RLE(ints)))
//! ```

use crate::encoder::{Frame, LatentFrame};
use crate::error::{BitstreamError, CodecError, Result};

pub const FRAME_MAGIC: [u8; 4] = *b"AVDC";
pub const FRAME_VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 24;

/// Integer-quantized latent frame together with its coding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantFrame {
    channels: usize,
    block_len: usize,
    ints: Vec<i32>,
    tau: i8,
    omega: f64,
}

impl QuantFrame {
    pub fn from_parts(
        channels: usize,
        block_len: usize,
        ints: Vec<i32>,
        tau: i8,
        omega: f64,
    ) -> Result<Self> {
        if ints.len() != channels * block_len {
            return Err(CodecError::InvalidInput(format!(
                "{} integers do not fill a {channels} x {block_len} frame",
                ints.len()
            )));
        }
        if omega <= 0.0 || !omega.is_finite() {
            return Err(CodecError::InvalidParameter(
                "quantizer omega must be positive and finite".into(),
            ));
        }
        Ok(QuantFrame {
            channels,
            block_len,
            ints,
            tau,
            omega,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn ints(&self) -> &[i32] {
        &self.ints
    }

    pub fn tau(&self) -> i8 {
        self.tau
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }
}

/// Parsed header of a wire frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireHeader {
    pub flags: u8,
    pub channels: u16,
    pub block_len: u16,
    pub subbands: u8,
    pub tau: i8,
    pub omega: f32,
    pub sequence: u32,
    pub payload_len: u32,
}

/// Quantize a latent frame: q = Round(10^tau * y / omega), rounding half away
/// from zero.
pub fn quantize(latent: &LatentFrame, tau: i8, omega: f64) -> Result<QuantFrame> {
    if omega <= 0.0 || !omega.is_finite() {
        return Err(CodecError::InvalidParameter(
            "quantizer omega must be positive and finite".into(),
        ));
    }
    let factor = 10f64.powi(tau as i32) / omega;
    let mut ints = Vec::with_capacity(latent.data().len());
    for &y in latent.data() {
        let scaled = y * factor;
        if !scaled.is_finite() {
            return Err(CodecError::QuantizationOverflow(format!(
                "coefficient {y} scales to a non-finite value"
            )));
        }
        let rounded = scaled.round();
        if rounded > i32::MAX as f64 || rounded < i32::MIN as f64 {
            return Err(CodecError::QuantizationOverflow(format!(
                "coefficient {y} quantizes to {rounded}, outside 32-bit range"
            )));
        }
        ints.push(rounded as i32);
    }
    QuantFrame::from_parts(latent.channels(), latent.block_len(), ints, tau, omega)
}

/// Invert the integer conversion: y' = q * omega / 10^tau. The result is
/// within omega / (2 * 10^tau) of the original coefficient elementwise.
pub fn dequantize(q: &QuantFrame) -> LatentFrame {
    let factor = q.omega / 10f64.powi(q.tau as i32);
    let data = q.ints.iter().map(|&v| v as f64 * factor).collect();
    Frame::from_vec(q.channels, q.block_len, data).expect("quant frame dimensions are consistent")
}

/// Token stream: nonzero values as 32-bit little-endian literals, each
/// maximal zero run as a zero word followed by its 32-bit length.
pub fn rle_encode(ints: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ints.len() * 4);
    let mut run: u32 = 0;
    for &v in ints {
        if v == 0 {
            run += 1;
        } else {
            if run > 0 {
                out.extend_from_slice(&0i32.to_le_bytes());
                out.extend_from_slice(&run.to_le_bytes());
                run = 0;
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if run > 0 {
        out.extend_from_slice(&0i32.to_le_bytes());
        out.extend_from_slice(&run.to_le_bytes());
    }
    out
}

pub fn rle_decode(bytes: &[u8]) -> Result<Vec<i32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(BitstreamError::MalformedRun(format!(
            "stream length {} is not a multiple of 4",
            bytes.len()
        ))
        .into());
    }
    let mut out = Vec::new();
    let mut idx = 0;
    while idx < bytes.len() {
        let word = i32::from_le_bytes(bytes[idx..idx + 4].try_into().expect("4-byte slice"));
        idx += 4;
        if word != 0 {
            out.push(word);
            continue;
        }
        if idx + 4 > bytes.len() {
            return Err(BitstreamError::MalformedRun(
                "zero token truncated before its run length".into(),
            )
            .into());
        }
        let run = u32::from_le_bytes(bytes[idx..idx + 4].try_into().expect("4-byte slice"));
        idx += 4;
        if run == 0 {
            return Err(BitstreamError::MalformedRun("zero token with run length 0".into()).into());
        }
        out.resize(out.len() + run as usize, 0);
    }
    Ok(out)
}

fn lzma_compress(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    lzma_rs::lzma_compress(&mut &data[..], &mut out)
        .map_err(|e| BitstreamError::Payload(e.to_string()))?;
    Ok(out)
}

fn lzma_decompress(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    lzma_rs::lzma_decompress(&mut &data[..], &mut out)
        .map_err(|e| BitstreamError::Payload(format!("{e:?}")))?;
    Ok(out)
}

/// Serialize one quantized frame into wire bytes: fixed header plus the
/// LZMA-compressed token stream of the row-major flattened integers.
pub fn frame_serialize(q: &QuantFrame, subbands: u8, sequence: u32) -> Result<Vec<u8>> {
    if q.channels > u16::MAX as usize || q.block_len > u16::MAX as usize {
        return Err(CodecError::Configuration(
            "frame dimensions exceed the wire format's 16-bit fields".into(),
        ));
    }
    let payload = lzma_compress(&rle_encode(&q.ints))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(0); // flags
    out.extend_from_slice(&(q.channels as u16).to_le_bytes());
    out.extend_from_slice(&(q.block_len as u16).to_le_bytes());
    out.push(subbands);
    out.push(q.tau as u8);
    out.extend_from_slice(&(q.omega as f32).to_le_bytes());
    out.extend_from_slice(&sequence.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse the header fields without touching the payload.
pub fn header_parse(bytes: &[u8]) -> Result<WireHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(BitstreamError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    if bytes[0..4] != FRAME_MAGIC {
        return Err(BitstreamError::BadMagic.into());
    }
    if bytes[4] != FRAME_VERSION {
        return Err(BitstreamError::BadVersion(bytes[4]).into());
    }
    Ok(WireHeader {
        flags: bytes[5],
        channels: u16::from_le_bytes([bytes[6], bytes[7]]),
        block_len: u16::from_le_bytes([bytes[8], bytes[9]]),
        subbands: bytes[10],
        tau: bytes[11] as i8,
        omega: f32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]),
        sequence: u32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]),
        payload_len: u32::from_le_bytes([bytes[20], bytes[21], bytes[22], bytes[23]]),
    })
}

/// Exact inverse of [`frame_serialize`]: validates the payload length and the
/// decoded element count.
pub fn frame_parse(bytes: &[u8]) -> Result<(QuantFrame, WireHeader)> {
    let header = header_parse(bytes)?;
    let expected = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < expected {
        return Err(BitstreamError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let payload = &bytes[HEADER_LEN..expected];
    let ints = rle_decode(&lzma_decompress(payload)?)?;
    let want = header.channels as usize * header.block_len as usize;
    if ints.len() != want {
        return Err(BitstreamError::ElementCount {
            expected: want,
            actual: ints.len(),
        }
        .into());
    }
    let q = QuantFrame::from_parts(
        header.channels as usize,
        header.block_len as usize,
        ints,
        header.tau,
        header.omega as f64,
    )?;
    Ok((q, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn quantize_reference_points() {
        let latent = Frame::from_vec(1, 1, vec![0.5]).unwrap();
        let q = quantize(&latent, 2, 1.2).unwrap();
        assert_eq!(q.ints(), &[42]);

        let zero = Frame::from_vec(1, 1, vec![0.0]).unwrap();
        assert_eq!(quantize(&zero, 2, 1.2).unwrap().ints(), &[0]);

        let small = Frame::from_vec(1, 1, vec![0.001]).unwrap();
        assert_eq!(quantize(&small, 4, 9.3).unwrap().ints(), &[1]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let latent = Frame::from_vec(1, 4, vec![0.015, -0.015, 0.025, -0.025]).unwrap();
        let q = quantize(&latent, 2, 1.0).unwrap();
        assert_eq!(q.ints(), &[2, -2, 3, -3]);
    }

    #[test]
    fn quantize_overflow_is_detected() {
        let latent = Frame::from_vec(1, 1, vec![1e9]).unwrap();
        assert!(matches!(
            quantize(&latent, 2, 1.0),
            Err(CodecError::QuantizationOverflow(_))
        ));
        assert!(quantize(&latent, -3, 1.0).is_ok());
    }

    #[test]
    fn dequantize_round_trip_error_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let (tau, omega) = (2i8, 1.2f64);
        let bound = omega / (2.0 * 10f64.powi(tau as i32));
        for _ in 0..50 {
            let data: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
            let latent = Frame::from_vec(2, 32, data).unwrap();
            let rec = dequantize(&quantize(&latent, tau, omega).unwrap());
            for (a, b) in latent.data().iter().zip(rec.data()) {
                assert!((a - b).abs() <= bound + 1e-12);
            }
        }
        let q = QuantFrame::from_parts(1, 1, vec![42], 2, 1.2).unwrap();
        assert!((dequantize(&q).data()[0] - 0.504).abs() <= 1e-12);
    }

    #[test]
    fn rle_reference_streams() {
        let tokens = rle_encode(&[0, 0, 0, 5]);
        assert_eq!(tokens.len(), 12);
        assert_eq!(&tokens[0..4], &[0, 0, 0, 0]);
        assert_eq!(&tokens[4..8], &3u32.to_le_bytes());
        assert_eq!(&tokens[8..12], &5i32.to_le_bytes());

        assert!(rle_encode(&[]).is_empty());

        let zeros = vec![0i32; 4096];
        let enc = rle_encode(&zeros);
        assert_eq!(enc.len(), 8);
        assert_eq!(rle_decode(&enc).unwrap(), zeros);
    }

    #[test]
    fn rle_round_trips_without_zero_overhead() {
        let vals = vec![3, -1, 7, 9];
        let enc = rle_encode(&vals);
        assert_eq!(enc.len(), vals.len() * 4);
        assert_eq!(rle_decode(&enc).unwrap(), vals);
    }

    #[test]
    fn rle_rejects_malformed_streams() {
        assert!(rle_decode(&[1, 2, 3]).is_err());
        // zero token with no run length
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0i32.to_le_bytes());
        assert!(rle_decode(&bytes).is_err());
        // zero token with run length 0
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            rle_decode(&bytes),
            Err(CodecError::Bitstream(BitstreamError::MalformedRun(_)))
        ));
    }

    proptest! {
        #[test]
        fn rle_round_trip_on_sparse_sequences(seed in 0u64..5000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let len = rng.random_range(0..256usize);
            let vals: Vec<i32> = (0..len)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.7 {
                        0
                    } else {
                        rng.random_range(i32::MIN..i32::MAX)
                    }
                })
                .collect();
            prop_assert_eq!(rle_decode(&rle_encode(&vals)).unwrap(), vals);
        }

        #[test]
        fn coarser_quantization_never_loses_zeros(scale in 0.1f64..4.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(777);
            let data: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let latent = Frame::from_vec(4, 32, data).unwrap();
            let fine = quantize(&latent, 2, scale).unwrap();
            let coarse = quantize(&latent, 2, scale * 2.0).unwrap();
            let zeros = |q: &QuantFrame| q.ints().iter().filter(|v| **v == 0).count();
            prop_assert!(zeros(&coarse) >= zeros(&fine));
        }
    }

    #[test]
    fn serialize_parse_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let data: Vec<f64> = (0..64 * 64)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.7 {
                    0.0
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let latent = Frame::from_vec(64, 64, data).unwrap();
        let q = quantize(&latent, 2, 1.2).unwrap();
        let bytes = frame_serialize(&q, 3, 17).unwrap();

        assert_eq!(&bytes[0..4], b"AVDC");
        assert_eq!(bytes[4], 1);

        let (parsed, header) = frame_parse(&bytes).unwrap();
        assert_eq!(parsed.ints(), q.ints());
        assert_eq!(header.sequence, 17);
        assert_eq!(header.channels, 64);
        assert_eq!(header.block_len, 64);
        assert_eq!(header.subbands, 3);
        assert_eq!(header.tau, 2);
        // omega survives the f32 narrowing on both sides
        assert_eq!(parsed.omega(), 1.2f32 as f64);
    }

    #[test]
    fn all_zero_frame_compresses_tightly() {
        let latent = Frame::new(64, 64);
        let q = quantize(&latent, 2, 1.2).unwrap();
        let bytes = frame_serialize(&q, 3, 0).unwrap();
        assert!(
            bytes.len() < HEADER_LEN + 64,
            "all-zero frame took {} bytes",
            bytes.len()
        );
        let (parsed, _) = frame_parse(&bytes).unwrap();
        assert!(parsed.ints().iter().all(|v| *v == 0));
    }

    #[test]
    fn parse_rejects_corruption() {
        let latent = Frame::new(2, 4);
        let q = quantize(&latent, 2, 1.2).unwrap();
        let bytes = frame_serialize(&q, 3, 0).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            frame_parse(&bad_magic),
            Err(CodecError::Bitstream(BitstreamError::BadMagic))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            frame_parse(&bad_version),
            Err(CodecError::Bitstream(BitstreamError::BadVersion(9)))
        ));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            frame_parse(truncated),
            Err(CodecError::Bitstream(BitstreamError::Truncated { .. }))
        ));

        // element-count mismatch: lie about the channel count
        let mut wrong_count = bytes.clone();
        wrong_count[6..8].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(
            frame_parse(&wrong_count),
            Err(CodecError::Bitstream(BitstreamError::ElementCount { .. }))
        ));
    }

    #[test]
    fn digital_path_is_lossless() {
        let mut rng = ChaCha20Rng::seed_from_u64(102);
        for _ in 0..20 {
            let data: Vec<f64> = (0..256)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.6 {
                        0.0
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect();
            let latent = Frame::from_vec(8, 32, data).unwrap();
            let q = quantize(&latent, 2, 1.2).unwrap();
            let via_wire = frame_parse(&frame_serialize(&q, 3, 0).unwrap()).unwrap().0;
            // the digital stages are bijective: direct and through-the-wire
            // dequantization agree exactly
            assert_eq!(via_wire.ints(), q.ints());
        }
    }
}
