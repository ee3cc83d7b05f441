//! Byte-level transport between clients and server.
//!
//! Every transmitted matrix is serialized at the configured parameter width
//! (2 → IEEE half, 4 → single, 8 → double) so traffic is measured, not
//! inferred. Shapes travel out of band; only parameters count as payload.

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    Half,
    Single,
    Double,
}

impl WireFormat {
    pub fn from_bytes_per_param(bytes: usize) -> Result<Self> {
        match bytes {
            2 => Ok(Self::Half),
            4 => Ok(Self::Single),
            8 => Ok(Self::Double),
            other => Err(Error::config(
                "model.bytes_per_param",
                format!("{other} has no wire format; use 2, 4 or 8"),
            )),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::Half => 2,
            Self::Single => 4,
            Self::Double => 8,
        }
    }

    pub fn encode(self, m: &Matrix, out: &mut Vec<u8>) {
        for &x in m.as_slice() {
            match self {
                Self::Half => out.extend_from_slice(&f16::from_f64(x).to_le_bytes()),
                Self::Single => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Self::Double => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }

    pub fn decode(self, rows: usize, cols: usize, bytes: &[u8]) -> Result<Matrix> {
        let w = self.width();
        if bytes.len() != rows * cols * w {
            return Err(Error::TruncatedPayload {
                expected: rows * cols * w,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(w)
            .map(|c| match self {
                Self::Half => f16::from_le_bytes([c[0], c[1]]).to_f64(),
                Self::Single => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Self::Double => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Counts bytes in each direction for one round.
#[derive(Debug, Clone)]
pub struct Channel {
    format: WireFormat,
    quantize: bool,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

impl Channel {
    /// With `quantize`, receivers see the wire-precision values; otherwise
    /// the payload is still encoded and measured but delivered exactly.
    pub fn new(format: WireFormat, quantize: bool) -> Self {
        Self {
            format,
            quantize,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
        }
    }

    pub fn send(&mut self, dir: Direction, payload: &[&Matrix]) -> Result<Vec<Matrix>> {
        let mut bytes = Vec::new();
        for m in payload {
            self.format.encode(m, &mut bytes);
        }
        match dir {
            Direction::Up => self.uploaded_bytes += bytes.len() as u64,
            Direction::Down => self.downloaded_bytes += bytes.len() as u64,
        }
        if !self.quantize {
            return Ok(payload.iter().map(|m| (*m).clone()).collect());
        }
        let w = self.format.width();
        let mut offset = 0;
        payload
            .iter()
            .map(|m| {
                let len = m.len() * w;
                let out = self.format.decode(m.rows(), m.cols(), &bytes[offset..offset + len]);
                offset += len;
                out
            })
            .collect()
    }

    pub fn uploaded_params(&self) -> u64 {
        self.uploaded_bytes / self.format.width() as u64
    }

    pub fn downloaded_params(&self) -> u64 {
        self.downloaded_bytes / self.format.width() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_bytes_by_width() {
        let m = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.25);
        for (bpp, fmt) in [(2, WireFormat::Half), (4, WireFormat::Single), (8, WireFormat::Double)] {
            assert_eq!(WireFormat::from_bytes_per_param(bpp).unwrap(), fmt);
            let mut ch = Channel::new(fmt, true);
            let got = ch.send(Direction::Up, &[&m, &m]).unwrap();
            assert_eq!(ch.uploaded_bytes, 30 * bpp as u64);
            assert_eq!(ch.uploaded_params(), 30);
            assert_eq!(ch.downloaded_bytes, 0);
            // Quarter steps below 4 are exact in every width.
            assert_eq!(got[1], m);
        }
        assert!(WireFormat::from_bytes_per_param(3).is_err());
    }

    #[test]
    fn quantization_is_optional() {
        let m = Matrix::from_rows(&[[1.0 / 3.0]]);
        let exact = Channel::new(WireFormat::Half, false)
            .send(Direction::Down, &[&m])
            .unwrap();
        assert_eq!(exact[0], m);
        let lossy = Channel::new(WireFormat::Half, true)
            .send(Direction::Down, &[&m])
            .unwrap();
        assert_ne!(lossy[0], m);
        assert!((lossy[0].get(0, 0) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn decode_rejects_wrong_length() {
        assert!(WireFormat::Single.decode(2, 2, &[0u8; 15]).is_err());
    }
}
