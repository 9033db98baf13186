//! Directory-of-tensors dataset.
//!
//! Each `*.tensor` file is a header followed by the row-major little-endian
//! payload. Header layout (24 bytes, little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 0..4  | magic `FXTN`                           |
//! | 4     | dtype tag (0 = f32, 1 = u8)            |
//! | 5     | rank (1..=4)                           |
//! | 6..8  | reserved, zero                         |
//! | 8..24 | four u32 dims; unused trailing dims 0  |
//!
//! An optional `labels.tsv` (`filename<TAB>class`) is carried for reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ir::tensor::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"FXTN";
pub const HEADER_LEN: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("dataset {0} contains no tensors")]
    Empty(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub id: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    pub labels: BTreeMap<String, usize>,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    assert!(t.rank() <= 4, "dataset tensors have rank <= 4");
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * t.dtype().size_of());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().tag());
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for i in 0..4 {
        let d = t.shape().get(i).copied().unwrap_or(0) as u32;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let dtype =
        DType::from_tag(bytes[4]).ok_or_else(|| format!("unknown dtype tag {}", bytes[4]))?;
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(format!("unsupported rank {rank}"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * dtype.size_of() {
        return Err(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * dtype.size_of()
        ));
    }
    let data = match dtype {
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        let images = tensors
            .into_iter()
            .enumerate()
            .map(|(i, tensor)| DatasetImage {
                id: format!("img_{i:05}"),
                tensor,
            })
            .collect();
        Self {
            images,
            labels: BTreeMap::new(),
        }
    }

    /// Load every `*.tensor` file in `dir`, ordered by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tensor"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DatasetError::Empty(dir.to_path_buf()));
        }
        let mut images = Vec::with_capacity(files.len());
        for path in files {
            let bytes = fs::read(&path).map_err(io(&path))?;
            let tensor = decode_tensor(&bytes).map_err(|detail| DatasetError::Format {
                path: path.clone(),
                detail,
            })?;
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            images.push(DatasetImage { id, tensor });
        }
        let mut labels = BTreeMap::new();
        let label_path = dir.join("labels.tsv");
        if label_path.exists() {
            let text = fs::read_to_string(&label_path).map_err(io(&label_path))?;
            for (lineno, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let parse = || -> Option<(String, usize)> {
                    let (name, class) = line.split_once('\t')?;
                    let stem = name.trim().trim_end_matches(".tensor").to_string();
                    Some((stem, class.trim().parse().ok()?))
                };
                let (k, v) = parse().ok_or_else(|| DatasetError::Format {
                    path: label_path.clone(),
                    detail: format!("line {}: expected filename<TAB>class", lineno + 1),
                })?;
                labels.insert(k, v);
            }
        }
        Ok(Self { images, labels })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for img in &self.images {
            let p = dir.join(format!("{}.tensor", img.id));
            fs::write(&p, encode_tensor(&img.tensor)).map_err(io(&p))?;
        }
        if !self.labels.is_empty() {
            let p = dir.join("labels.tsv");
            let text: String = self
                .labels
                .iter()
                .map(|(k, v)| format!("{k}.tensor\t{v}\n"))
                .collect();
            fs::write(&p, text).map_err(io(&p))?;
        }
        Ok(())
    }
}
