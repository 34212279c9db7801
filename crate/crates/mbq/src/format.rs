//! On-disk formats: MBT1 tensors, model checkpoints and JSONL datasets.
//!
//! An MBT1 file is the magic line `MBTENS1\n`, one JSON header line
//! `{"shape":[rows,cols],"tags":[...]}` and `rows × cols` little-endian f32
//! values. `tags` (0 = vision, 1 = language, one per row) is optional.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use mbq_core::toyvlm::{ModelConfig, SyntheticSample, ToyModel};
use mbq_core::{Matrix, Modality};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MBT_MAGIC: &[u8; 8] = b"MBTENS1\n";

#[derive(Debug, Serialize, Deserialize)]
struct MbtHeader {
    shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<u8>>,
}

pub fn write_mbt(mut w: impl Write, m: &Matrix, tags: Option<&[Modality]>) -> std::io::Result<()> {
    let header = MbtHeader { shape: [m.rows(), m.cols()], tags: tags.map(|t| t.iter().map(|m| m.code()).collect()) };
    w.write_all(MBT_MAGIC)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_mbt(r: impl Read) -> Result<(Matrix, Option<Vec<Modality>>)> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Format(format!("MBT1 magic: {e}")))?;
    if &magic != MBT_MAGIC {
        return Err(Error::Format("not an MBT1 tensor".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::Format(format!("MBT1 header: {e}")))?;
    let h: MbtHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("MBT1 header: {e}")))?;
    let [rows, cols] = h.shape;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("MBT1 shape overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::Format(format!("MBT1 payload: {e}")))?;
    if payload.len() != n * 4 {
        return Err(Error::Format(format!("MBT1 payload is {} bytes, shape {}x{} needs {}", payload.len(), rows, cols, n * 4)));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let m = Matrix::new(rows, cols, data)?;
    let tags = match h.tags {
        None => None,
        Some(t) => {
            if t.len() != rows {
                return Err(Error::Format(format!("{} tags for {} rows", t.len(), rows)));
            }
            Some(t.into_iter().map(Modality::from_code).collect::<Result<_, _>>()?)
        }
    };
    Ok((m, tags))
}

pub fn save_mbt(path: &Path, m: &Matrix, tags: Option<&[Modality]>) -> Result<()> {
    let f = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    write_mbt(&mut w, m, tags).at(path)?;
    w.flush().at(path)
}

pub fn load_mbt(path: &Path) -> Result<(Matrix, Option<Vec<Modality>>)> {
    let f = fs::File::open(path).at(path)?;
    read_mbt(f).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).at(path)?;
    s.push('\n');
    fs::write(path, s).at(path)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&s).at(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

pub const MODEL_FORMAT: &str = "mbq-model/1";

/// Writes `model` as `manifest.json` plus one MBT1 file per parameter tensor.
pub fn save_model(dir: &Path, model: &ToyModel, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut tensors = Vec::new();
    for (name, m) in model.tensors() {
        let file = format!("{name}.mbt");
        save_mbt(&dir.join(&file), &m, None)?;
        tensors.push(TensorEntry { name, file, shape: [m.rows(), m.cols()] });
    }
    let manifest = ModelManifest { format: MODEL_FORMAT.into(), config: *model.config(), seed, tensors };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<(ToyModel, ModelManifest)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!("{}: unsupported model format '{}'", dir.display(), manifest.format)));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let (m, _) = load_mbt(&dir.join(&t.file))?;
        if m.shape() != (t.shape[0], t.shape[1]) {
            return Err(Error::Format(format!("{}: shape {:?} disagrees with manifest {:?}", t.file, m.shape(), t.shape)));
        }
        tensors.push((t.name.clone(), m));
    }
    Ok((ToyModel::from_tensors(manifest.config, &tensors)?, manifest))
}

/// One JSON object per line.
pub fn save_dataset(path: &Path, data: &[SyntheticSample]) -> Result<()> {
    let f = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    for s in data {
        serde_json::to_writer(&mut w, s).at(path)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    let f = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
