//! `KDXD` teacher dump container.
//!
//! ```text
//! 0..4   magic "KDXD"
//! u32    version (1)
//! u32    N
//! u32    feat_dim
//! u32    num_classes   (0 => no logits block)
//! u32    flags         (bit 0: labels present)
//! f32    features      N x feat_dim, row-major
//! f32    logits        N x num_classes (iff num_classes > 0)
//! u32    labels        N (iff flag bit 0)
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::FormatError;
use crate::numerics::Matrix;

pub const DUMP_MAGIC: [u8; 4] = *b"KDXD";
pub const DUMP_VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDump {
    pub features: Matrix<f32>,
    pub logits: Option<Matrix<f32>>,
    pub labels: Option<Vec<u32>>,
}

impl TeacherDump {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.as_ref().map_or(0, |l| l.cols())
    }

    fn check(&self) -> Result<(), FormatError> {
        let n = self.len();
        if let Some(l) = &self.logits {
            if l.rows() != n || l.cols() == 0 {
                return Err(FormatError::Header(format!(
                    "logits {:?} do not match {n} rows",
                    l.shape()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(FormatError::Header(format!(
                    "{} labels for {n} rows",
                    labels.len()
                )));
            }
        }
        for v in [n, self.feat_dim(), self.num_classes()] {
            if u32::try_from(v).is_err() {
                return Err(FormatError::Header(format!("{v} does not fit in u32")));
            }
        }
        Ok(())
    }

    /// Byte-exact encoding.
    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        self.check()?;
        let n = self.len();
        let c = self.num_classes();
        let mut out = Vec::with_capacity(
            HEADER_LEN + 4 * (n * self.feat_dim() + n * c + self.labels.as_ref().map_or(0, |_| n)),
        );
        out.extend_from_slice(&DUMP_MAGIC);
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        for v in [DUMP_VERSION, n as u32, self.feat_dim() as u32, c as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.features.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &self.logits {
            for v in l.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for v in labels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != DUMP_MAGIC {
            return Err(FormatError::BadMagic {
                expected: DUMP_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        let version = word(0);
        if version != DUMP_VERSION {
            return Err(FormatError::UnsupportedVersion {
                expected: DUMP_VERSION,
                found: version,
            });
        }
        let (n, dim, classes, flags) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
        if flags & !FLAG_LABELS != 0 {
            return Err(FormatError::Header(format!("unknown flag bits {flags:#x}")));
        }
        let has_labels = flags & FLAG_LABELS != 0;

        let words = (n as u128) * (dim as u128)
            + (n as u128) * (classes as u128)
            + if has_labels { n as u128 } else { 0 };
        let needed = HEADER_LEN as u128 + 4 * words;
        if needed > bytes.len() as u128 {
            return Err(FormatError::Truncated {
                needed: usize::try_from(needed).unwrap_or(usize::MAX),
                available: bytes.len(),
            });
        }
        if needed < bytes.len() as u128 {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - needed as usize,
            });
        }

        let mut pos = HEADER_LEN;
        let mut floats = |count: usize, block: &'static str| -> Result<Vec<f32>, FormatError> {
            let v: Vec<f32> = bytes[pos..pos + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * count;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::NonFinite { block });
            }
            Ok(v)
        };
        let features = Matrix::new(n, dim, floats(n * dim, "features")?).expect("sized");
        let logits = if classes > 0 {
            Some(Matrix::new(n, classes, floats(n * classes, "logits")?).expect("sized"))
        } else {
            None
        };
        let labels = if has_labels {
            let labels: Vec<u32> = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if classes > 0 {
                if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
                    return Err(FormatError::LabelOutOfRange {
                        row,
                        label,
                        num_classes: classes as u32,
                    });
                }
            }
            Some(labels)
        } else {
            None
        };
        Ok(Self {
            features,
            logits,
            labels,
        })
    }
}

pub fn write_dump(dump: &TeacherDump, path: &Path) -> Result<(), FormatError> {
    let bytes = dump.encode()?;
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dump(path: &Path) -> Result<TeacherDump, FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TeacherDump::decode(&bytes)
}
