//! Binary hidden-state files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MGSD"
//! 4       4           version (u32 LE) = 1
//! 8       4           L layers (u32 LE)
//! 12      4           T frames (u32 LE)
//! 16      4           D dims (u32 LE)
//! 20      4·L·T·D     f32 LE payload, layer-major, then frame, then dim
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MGSD";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// One utterance's stacked SSL hidden states, `[L][T][D]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub utt_id: String,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl HiddenStack {
    pub fn new(utt_id: impl Into<String>, layers: usize, frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "hidden stack extents must be positive, got L={layers} T={frames} D={dim}"
            )));
        }
        if values.len() != layers * frames * dim {
            return Err(Error::shape(format!(
                "L={layers} T={frames} D={dim} needs {} values, got {}",
                layers * frames * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite feature value at flat index {i}")));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            layers,
            frames,
            dim,
            values,
        })
    }

    pub fn at(&self, layer: usize, frame: usize, d: usize) -> f32 {
        self.values[(layer * self.frames + frame) * self.dim + d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.layers as u32, self.frames as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(utt_id: impl Into<String>, bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != FEATURE_MAGIC {
            return Err(FormatError::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let version = word(1);
        if version != FEATURE_VERSION {
            return Err(FormatError::Version {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let (layers, frames, dim) = (word(2) as usize, word(3) as usize, word(4) as usize);
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(FormatError::Header(format!(
                "zero extent in L={layers} T={frames} D={dim}"
            )));
        }
        let count = layers
            .checked_mul(frames)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| FormatError::Header("extent product overflows".into()))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::Header(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (index, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite { index });
            }
            values.push(v);
        }
        Ok(Self {
            utt_id: utt_id.into(),
            layers,
            frames,
            dim,
            values,
        })
    }
}

/// Writes a feature file. Refuses to overwrite an existing file.
pub fn write_features(stack: &HiddenStack, path: &Path) -> Result<()> {
    crate::io::write_new(path, &stack.to_bytes())
}

/// Reads a feature file; the utterance id is taken from the file stem.
pub fn read_features(path: &Path) -> Result<HiddenStack> {
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_features_as(path, utt_id)
}

pub fn read_features_as(path: &Path, utt_id: impl Into<String>) -> Result<HiddenStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HiddenStack::from_bytes(utt_id, &bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_value_file_is_header_plus_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.mgsd");
        let s = HiddenStack::new("u", 1, 1, 1, vec![0.0]).unwrap();
        write_features(&s, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), (HEADER_LEN + 4) as u64);
        assert_eq!(read_features(&path).unwrap(), s);
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.mgsd");
        let s = HiddenStack::new("u", 1, 1, 1, vec![1.0]).unwrap();
        write_features(&s, &path).unwrap();
        assert!(write_features(&s, &path).is_err());
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = HiddenStack::new("u", 2, 3, 2, (0..12).map(|i| i as f32).collect())
            .unwrap()
            .to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(HiddenStack::from_bytes("u", &bad), Err(FormatError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            HiddenStack::from_bytes("u", &bad),
            Err(FormatError::Version { expected: 1, found: 2 })
        );

        let bad = &good[..good.len() - 3];
        assert!(matches!(HiddenStack::from_bytes("u", bad), Err(FormatError::Truncated { .. })));

        let mut bad = good.clone();
        bad[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(HiddenStack::from_bytes("u", &bad), Err(FormatError::NonFinite { index: 2 }));

        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(HiddenStack::from_bytes("u", &bad), Err(FormatError::NonFinite { index: 0 }));

        let mut bad = good;
        bad.push(0);
        assert!(matches!(HiddenStack::from_bytes("u", &bad), Err(FormatError::Header(_))));
    }

    #[test]
    fn wrong_magic_file_yields_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mgsd");
        fs::write(&path, b"RIFF\x01\0\0\0\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        match read_features(&path) {
            Err(Error::Format {
                source: FormatError::BadMagic { .. },
                ..
            }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip(l in 1usize..4, t in 1usize..6, d in 1usize..5, seed in any::<u32>()) {
            let values: Vec<f32> = (0..l * t * d)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6 - 2000.0)
                .collect();
            let s = HiddenStack::new("x", l, t, d, values).unwrap();
            let back = HiddenStack::from_bytes("x", &s.to_bytes()).unwrap();
            prop_assert!(back.values.iter().zip(&s.values).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!((back.layers, back.frames, back.dim), (l, t, d));
        }
    }
}
