//! Container format of a coded image.
//!
//! ```text
//! "LHFC" | version u8 | width u32 | height u32 | model_id u16 | lambda_index u8
//! z channels u16 | y channels u16 | (lo i16, hi i16) per channel, z then y
//! z length u32 | z payload | y length u32 | y payload
//! ```
//!
//! All integers are little-endian. Width and height are the unpadded image
//! dimensions.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LHFC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub width: u32,
    pub height: u32,
    pub model_id: u16,
    pub lambda_index: u8,
    /// Inclusive symbol window of each hyper-latent channel.
    pub z_windows: Vec<(i32, i32)>,
    /// Inclusive residual window of each latent channel.
    pub y_windows: Vec<(i32, i32)>,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.z_payload.len() + self.y_payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.push(self.lambda_index);
        for table in [&self.z_windows, &self.y_windows] {
            let n = u16::try_from(table.len()).map_err(|_| Error::invalid("too many channels for the window table"))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for &(lo, hi) in self.z_windows.iter().chain(&self.y_windows) {
            for v in [lo, hi] {
                let v = i16::try_from(v).map_err(|_| Error::invalid(format!("window bound {v} does not fit in 16 bits")))?;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for payload in [&self.z_payload, &self.y_payload] {
            let n = u32::try_from(payload.len()).map_err(|_| Error::invalid("payload larger than 4 GiB"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an LHFC bitstream (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("bitstream version {version} is not supported (expected {VERSION})")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        if width == 0 || height == 0 {
            return Err(Error::Corrupt { offset: 5, reason: "zero image size".into() });
        }
        let model_id = r.u16()?;
        let lambda_index = r.u8()?;
        let nz = r.u16()? as usize;
        let ny = r.u16()? as usize;
        let mut windows = Vec::with_capacity(nz + ny);
        for _ in 0..nz + ny {
            let at = r.pos;
            let lo = r.i16()? as i32;
            let hi = r.i16()? as i32;
            if hi < lo {
                return Err(Error::Corrupt { offset: at, reason: format!("empty window [{lo}, {hi}]") });
            }
            windows.push((lo, hi));
        }
        let y_windows = windows.split_off(nz);
        let z_payload = r.payload()?;
        let y_payload = r.payload()?;
        if r.pos != bytes.len() {
            return Err(Error::Corrupt { offset: r.pos, reason: "trailing bytes after the y payload".into() });
        }
        Ok(Self { width, height, model_id, lambda_index, z_windows: windows, y_windows, z_payload, y_payload })
    }

    /// Total size in bits, header included.
    pub fn total_bits(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len() * 8)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn payload(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            width: 7,
            height: 3,
            model_id: 0xbeef,
            lambda_index: 2,
            z_windows: vec![(-64, 63)],
            y_windows: vec![(-64, 63), (-70, 90)],
            z_payload: vec![1, 2, 3, 4],
            y_payload: vec![9; 6],
        }
    }

    #[test]
    fn roundtrip() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LHFC");
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn rejects_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Format(_))));
        for cut in 0..bytes.len() {
            assert!(Bitstream::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
