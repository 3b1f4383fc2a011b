//! NTF tensor files: `NTF1`, little-endian u32 rank and dims, then a
//! row-major f32 little-endian payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Planar;

pub const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct NtfTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl NtfTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension too large for NTF: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Rounds to f32.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_planar(p: &Planar) -> Self {
        Self::from_f64(vec![p.channels, p.height, p.width], &p.data).expect("planar shape is consistent")
    }

    /// Rank-3 tensors as `channels x height x width`; rank 2 as one channel.
    pub fn to_planar(&self) -> Result<Planar> {
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::Shape(format!("expected a rank 2 or 3 tensor, got shape {:?}", self.shape))),
        };
        Planar::new(c, h, w, self.to_f64())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(format!("NTF: {m}"));
        if bytes.len() < 8 {
            return Err(fail("file shorter than its header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let rank = word(4) as usize;
        let header = 8usize.checked_add(rank.checked_mul(4).ok_or_else(|| fail("rank overflows"))?).ok_or_else(|| fail("rank overflows"))?;
        if bytes.len() < header {
            return Err(fail("truncated dimensions"));
        }
        let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i) as usize).collect();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail("element count overflows"))?;
        let expect = n.checked_mul(4).and_then(|p| p.checked_add(header)).ok_or_else(|| fail("element count overflows"))?;
        if bytes.len() != expect {
            return Err(fail(&format!("payload is {} bytes, shape {shape:?} needs {}", bytes.len() - header, 4 * n)));
        }
        let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { shape, data })
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Domain(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        e.into()
    })
}

pub fn ntf_write(tensor: &NtfTensor, path: &Path) -> Result<()> {
    write_atomic(path, &tensor.to_bytes())
}

pub fn ntf_read(path: &Path) -> Result<NtfTensor> {
    NtfTensor::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.ntf");
        let t = NtfTensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        ntf_write(&t, &p).unwrap();
        assert_eq!(ntf_read(&p).unwrap(), t);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 4 + 4 + 8 + 24);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(NtfTensor::from_bytes(b"NTF"), Err(Error::Format(_))));
        let mut good = NtfTensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(NtfTensor::from_bytes(&bad), Err(Error::Format(_))));
        good.pop();
        assert!(matches!(NtfTensor::from_bytes(&good), Err(Error::Format(_))));
        let huge = [b"NTF1".as_slice(), &1u32.to_le_bytes(), &u32::MAX.to_le_bytes()].concat();
        assert!(matches!(NtfTensor::from_bytes(&huge), Err(Error::Format(_))));
        assert!(NtfTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn scalar_and_planar() {
        let s = NtfTensor::new(vec![], vec![7.5]).unwrap();
        assert_eq!(NtfTensor::from_bytes(&s.to_bytes()).unwrap(), s);
        let p = Planar::new(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(NtfTensor::from_planar(&p).to_planar().unwrap(), p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn bitwise_round_trip(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..4 * 64 * 128).map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff)).collect();
            let t = NtfTensor::new(vec![4, 64, 128], data).unwrap();
            let back = NtfTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.shape(), t.shape());
        }
    }
}
