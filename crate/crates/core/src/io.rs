//! Binary dataset and checkpoint containers, the JSON run configuration
//! and atomic file writes.
//!
//! Dataset layout (little-endian):
//!
//! ```text
//! "PFNO" | version u32 = 1 | count u64
//! per sample: n u32 | porosity f64 | permeability_mD f64 (NaN = unlabeled) | seed u64
//!             | ceil(n^3 / 8) bytes, voxel i at bit (i % 8) of byte i / 8, 1 = pore
//! ```
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PFNC" | version u32 = 1 | json_len u64 | json {"model": ModelConfig, "normalizer": SizeNormalizer}
//! | array_count u32
//! per array: name_len u32 | name | dtype u8 (0 = f64, 1 = complex f64) | rank u32 | dims u64 x rank
//!            | values f64 (complex stored as re, im pairs)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fno_model::{DType, ModelConfig, ModelParams, TensorSpec};
use crate::grid::VoxelGrid;
use crate::porous_gen::{GenConfig, LabeledSample};
use crate::stokes_lbm::LbmConfig;
use crate::train_engine::{SizeNormalizer, TrainConfig};

pub const DATASET_MAGIC: &[u8; 4] = b"PFNO";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFNC";
pub const FORMAT_VERSION: u32 = 1;

/// Bytes of the bit-packed payload for edge `n`.
pub fn payload_len(n: usize) -> usize {
    (n * n * n).div_ceil(8)
}

pub fn pack_voxels(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = vec![0u8; payload_len(grid.edge())];
    for (i, &c) in grid.cells().iter().enumerate() {
        out[i / 8] |= c << (i % 8);
    }
    out
}

pub fn unpack_voxels(n: usize, payload: &[u8]) -> Result<VoxelGrid> {
    let len = n * n * n;
    if payload.len() != payload_len(n) {
        return Err(Error::shape(format!(
            "payload of {} bytes does not hold {len} voxels",
            payload.len()
        )));
    }
    let cells = (0..len).map(|i| (payload[i / 8] >> (i % 8)) & 1).collect();
    VoxelGrid::new(n, cells)
}

pub fn encode_dataset(samples: &[LabeledSample]) -> Vec<u8> {
    let body: usize = samples.iter().map(|s| 28 + payload_len(s.edge())).sum();
    let mut out = Vec::with_capacity(16 + body);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.edge() as u32).to_le_bytes());
        out.extend_from_slice(&s.porosity.to_le_bytes());
        out.extend_from_slice(&s.permeability.to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&pack_voxels(&s.voxels));
    }
    out
}

/// Little-endian reader that reports the offset of every failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(self.fail(
                0,
                format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(magic).unwrap()),
            ));
        }
        let at = self.pos;
        let version = self.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(self.fail(at, format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC)?;
    let count = r.u64("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let start = r.pos;
        let n = r.u32("edge length")? as usize;
        if n == 0 || n > 4096 {
            return Err(r.fail(start, format!("sample {i}: edge length {n} out of range")));
        }
        let porosity = r.f64("porosity")?;
        let permeability = r.f64("permeability")?;
        let seed = r.u64("seed")?;
        let payload_at = r.pos;
        let payload = r.take(payload_len(n), "voxel payload")?;
        let len = n * n * n;
        if !len.is_multiple_of(8) && payload[len / 8] >> (len % 8) != 0 {
            return Err(r.fail(r.pos - 1, format!("sample {i}: nonzero padding bits")));
        }
        let voxels = unpack_voxels(n, payload).map_err(|e| r.fail(payload_at, e.to_string()))?;
        let measured = voxels.porosity();
        if !((measured - porosity).abs() <= 1.0 / len as f64) {
            return Err(r.fail(
                start + 4,
                format!("sample {i}: stored porosity {porosity} disagrees with payload ({measured})"),
            ));
        }
        samples.push(LabeledSample {
            voxels,
            porosity,
            permeability,
            seed,
        });
    }
    r.finish()?;
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    normalizer: SizeNormalizer,
}

pub fn encode_checkpoint(params: &ModelParams, normalizer: &SizeNormalizer) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&CheckpointMeta {
        model: params.config().clone(),
        normalizer: normalizer.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.specs().len() as u32).to_le_bytes());
    for (spec, data) in params.specs().iter().zip(params.tensors()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(match spec.dtype {
            DType::F64 => 0,
            DType::C64 => 1,
        });
        out.extend_from_slice(&(spec.dims.len() as u32).to_le_bytes());
        for &d in &spec.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, SizeNormalizer)> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let json_len = r.u64("metadata length")? as usize;
    let json_at = r.pos;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(json_len, "metadata")?).map_err(|e| r.fail(json_at, format!("metadata: {e}")))?;
    let count = r.u32("array count")?;
    let mut named = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| r.fail(name_at, "array name is not UTF-8"))?
            .to_string();
        let tag_at = r.pos;
        let dtype = match r.u8("dtype tag")? {
            0 => DType::F64,
            1 => DType::C64,
            t => return Err(r.fail(tag_at, format!("unknown dtype tag {t}"))),
        };
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.fail(tag_at + 1, format!("array {name}: rank {rank} out of range")));
        }
        let dims = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = TensorSpec { name, dtype, dims };
        let raw = r.take(spec.real_len().saturating_mul(8), "array values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((spec, values));
    }
    r.finish()?;
    let params = ModelParams::from_named(&meta.model, named)?;
    Ok((params, meta.normalizer))
}

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_dataset(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    write_atomic(path, &encode_dataset(samples))
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, normalizer: &SizeNormalizer) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, normalizer)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, SizeNormalizer)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Edge lengths and per-size counts for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sizes: Vec<usize>,
    pub count_per_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sizes: vec![40, 48, 56],
            count_per_size: 1250,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Complete run configuration; omitted keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub corpus: CorpusConfig,
    pub lbm: LbmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.lbm.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}
