use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emulator::LandMask;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FSR_MAGIC: &[u8; 4] = b"FSR1";

/// `T` monthly `H×W` frames plus an optional land/ocean mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    months: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub mask: Option<LandMask>,
    pub name: String,
    pub provenance: String,
    pub smoothed: bool,
}

#[derive(Serialize, Deserialize)]
struct FsrHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    name: String,
    smoothed: bool,
    has_mask: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

impl FieldSeries {
    pub fn new(
        months: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
        mask: Option<LandMask>,
    ) -> Result<Self> {
        if months == 0 || height == 0 || width == 0 {
            return Err(CoreError::invalid("series extents must be >= 1"));
        }
        if values.len() != months * height * width {
            return Err(CoreError::shape(format!(
                "{months}×{height}×{width} series given {} values",
                values.len()
            )));
        }
        if let Some(m) = &mask {
            if (m.height(), m.width()) != (height, width) {
                return Err(CoreError::shape(format!(
                    "mask {}×{} does not match grid {height}×{width}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(FieldSeries {
            months,
            height,
            width,
            values,
            mask,
            name: String::new(),
            provenance: String::new(),
            smoothed: false,
        })
    }

    /// Series from a `T×H×W` tensor (narrowed to 32-bit).
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, mask: Option<LandMask>) -> Result<Self> {
        let (m, h, w) = match *t.shape() {
            [m, h, w] => (m, h, w),
            [n, c, h, w] => (n * c, h, w),
            ref s => {
                return Err(CoreError::shape(format!(
                    "cannot store {s:?} as a field series"
                )))
            }
        };
        Self::new(
            m,
            h,
            w,
            t.data().iter().map(|v| v.as_f64() as f32).collect(),
            mask,
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn months(&self) -> usize {
        self.months
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }

    /// The mask, or an all-ocean one when none is stored.
    pub fn mask_or_ocean(&self) -> LandMask {
        self.mask
            .clone()
            .unwrap_or_else(|| LandMask::all_ocean(self.height, self.width))
    }

    pub fn is_ocean(&self, row: usize, col: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.is_ocean(row, col))
    }

    /// Frames `[start, start + count)` as a `count×H×W` tensor.
    pub fn frames<S: Scalar>(&self, start: usize, count: usize) -> Result<Tensor<S>> {
        if start + count > self.months {
            return Err(CoreError::invalid(format!(
                "frames {start}..{} outside a {}-month series",
                start + count,
                self.months
            )));
        }
        let n = self.height * self.width;
        let data = self.values[start * n..(start + count) * n]
            .iter()
            .map(|&v| S::from_f64_lossy(v as f64))
            .collect();
        Tensor::new(vec![count, self.height, self.width], data)
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.frames(0, self.months).expect("full range")
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = FsrHeader {
            t: self.months,
            h: self.height,
            w: self.width,
            name: self.name.clone(),
            smoothed: self.smoothed,
            has_mask: self.mask.is_some(),
            provenance: self.provenance.clone(),
        };
        let hdr = serde_json::to_vec(&header)?;
        w.write_all(FSR_MAGIC)?;
        w.write_all(&(hdr.len() as u32).to_le_bytes())?;
        w.write_all(&hdr)?;
        let mut payload = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        if let Some(m) = &self.mask {
            let bytes: Vec<u8> = m.cells().iter().map(|&o| o as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != FSR_MAGIC {
            return Err(CoreError::UnrecognizedFormat { expected: "FSR1" });
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(CoreError::TruncatedPayload {
                expected: 8 + hlen,
                found: bytes.len(),
            });
        }
        let header: FsrHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
        let n = header
            .t
            .checked_mul(header.h)
            .and_then(|v| v.checked_mul(header.w))
            .ok_or_else(|| CoreError::PayloadMismatch("header extents overflow".into()))?;
        let mask_len = if header.has_mask {
            header.h * header.w
        } else {
            0
        };
        let expected = 8 + hlen + 4 * n + mask_len;
        if bytes.len() < expected {
            return Err(CoreError::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(CoreError::PayloadMismatch(format!(
                "{} trailing bytes after {}×{}×{} payload",
                bytes.len() - expected,
                header.t,
                header.h,
                header.w
            )));
        }
        let body = &bytes[8 + hlen..];
        let values = body[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = if header.has_mask {
            let cells = &body[4 * n..];
            if cells.iter().any(|&b| b > 1) {
                return Err(CoreError::PayloadMismatch(
                    "mask bytes must be 0 or 1".into(),
                ));
            }
            Some(LandMask::new(
                header.h,
                header.w,
                cells.iter().map(|&b| b == 1).collect(),
            )?)
        } else {
            None
        };
        let mut s = FieldSeries::new(header.t, header.h, header.w, values, mask)?;
        s.name = header.name;
        s.smoothed = header.smoothed;
        s.provenance = header.provenance;
        Ok(s)
    }
}

pub fn write_series(series: &FieldSeries, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    series.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_series(path: impl AsRef<Path>) -> Result<FieldSeries> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    FieldSeries::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FieldSeries {
        let mask = LandMask::new(2, 3, vec![true, false, true, true, true, false]).unwrap();
        let mut s = FieldSeries::new(
            4,
            2,
            3,
            (0..24).map(|i| i as f32 * -0.37 + 1e-3).collect(),
            Some(mask),
        )
        .unwrap()
        .with_name("demo");
        s.smoothed = true;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = FieldSeries::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fsr");
        write_series(&s, &p).unwrap();
        assert_eq!(read_series(&p).unwrap(), s);
    }

    #[test]
    fn corrupt_magic_is_unrecognized() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            FieldSeries::from_bytes(&b),
            Err(CoreError::UnrecognizedFormat { .. })
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        let b = sample().to_bytes();
        assert!(matches!(
            FieldSeries::from_bytes(&b[..b.len() - 10]),
            Err(CoreError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn extra_payload_is_mismatch() {
        let mut b = sample().to_bytes();
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(
            FieldSeries::from_bytes(&b),
            Err(CoreError::PayloadMismatch(_))
        ));
    }

    #[test]
    fn frames_slice_months() {
        let s = sample();
        let t: Tensor<f64> = s.frames(1, 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[0], s.values()[6] as f64);
        assert!(s.frames::<f32>(3, 2).is_err());
    }
}
