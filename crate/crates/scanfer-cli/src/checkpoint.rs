//! Checkpoint persistence.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "SCFR"
//! version  u32      currently 1
//! rng      u64      generator state word
//! config   u32 length + UTF-8 canonical config text
//! params   u32 count, then per tensor:
//!            name  u16 length + UTF-8 bytes
//!            rank  u32, dims u32 x rank
//!            data  f64 x product(dims)
//! buffers  u32 count, same record shape (batch-norm running stats)
//! opt flag u8       0 = none, 1 = optimizer state follows
//!   epoch    u32
//!   velocity u32 count + the same record shape
//! ```
//!
//! Named f64 records keep the format readable from any language; loading
//! reproduces every tensor bitwise.

use std::fmt;
use std::fs;
use std::path::Path;

use scanfer_core::model::FerModel;
use scanfer_core::optim::SgdState;
use scanfer_core::rng::Rng;

use crate::config::RunConfig;

const MAGIC: &[u8; 4] = b"SCFR";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    Truncated(&'static str),
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found}, this build reads version {expected}")
            }
            CheckpointError::Truncated(what) => write!(f, "checkpoint truncated while reading {what}"),
            CheckpointError::Malformed(d) => write!(f, "malformed checkpoint: {d}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Optimizer state as stored in a checkpoint.
pub struct SavedOptimizer {
    pub epoch: usize,
    pub velocity: Vec<(String, Vec<f64>)>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub config_text: String,
    pub model: FerModel,
    pub rng: Rng,
    pub optimizer: Option<SavedOptimizer>,
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn record(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        self.u16(name.len() as u16);
        self.bytes.extend_from_slice(name.as_bytes());
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
        for &v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(CheckpointError::Truncated(what))?;
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
        let name_len = self.u16("record name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "record name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
        let rank = self.u32("record rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("record dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = self.take(numel * 8, "record data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }
}

/// Serialize model, buffers, rng state and optional optimizer state.
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &FerModel,
    rng: &Rng,
    optimizer: Option<&SgdState>,
) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    w.bytes.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(rng.state());
    let config_text = config.to_text();
    w.u32(config_text.len() as u32);
    w.bytes.extend_from_slice(config_text.as_bytes());

    let params = model.named_params();
    w.u32(params.len() as u32);
    for (name, tensor) in &params {
        w.record(name, tensor.shape(), tensor.data());
    }

    let buffers = model.named_buffers();
    w.u32(buffers.len() as u32);
    for (name, data) in &buffers {
        w.record(name, &[data.len()], data);
    }

    // a never-stepped optimizer has no velocities worth keeping
    let velocity = optimizer.map(|state| state.velocity_snapshot(model));
    match (optimizer, velocity) {
        (Some(state), Some(velocity)) if !velocity.is_empty() => {
            w.u8(1);
            w.u32(state.epoch as u32);
            w.u32(velocity.len() as u32);
            for (name, data) in &velocity {
                w.record(name, &[data.len()], data);
            }
        }
        _ => w.u8(0),
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, w.bytes)?;
    Ok(())
}

/// Load and rebuild the model (bitwise identical parameters and buffers).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let rng_state = r.u64("rng state")?;
    let config_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(config_len, "config text")?.to_vec())
        .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?;
    let config = RunConfig::parse(&config_text)
        .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;

    // rebuild the model skeleton, then overwrite every tensor by name
    let mut init_rng = Rng::new(config.seed);
    let mut model = FerModel::new(config.model_config(), &mut init_rng)
        .map_err(|e| CheckpointError::Malformed(format!("embedded config builds no model: {e}")))?;

    let param_count = r.u32("parameter count")? as usize;
    let mut loaded_params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        loaded_params.push(r.record()?);
    }
    {
        let mut params = model.named_params_mut();
        if params.len() != loaded_params.len() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded_params.len(),
                params.len()
            )));
        }
        for (name, tensor) in params.iter_mut() {
            let (_, dims, data) = loaded_params
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing parameter {name}")))?;
            if dims != tensor.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name}: shape {dims:?} does not match {:?}",
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(data);
        }
    }

    let buffer_count = r.u32("buffer count")? as usize;
    let mut loaded_buffers = Vec::with_capacity(buffer_count);
    for _ in 0..buffer_count {
        loaded_buffers.push(r.record()?);
    }
    {
        let mut buffers = model.named_buffers_mut();
        if buffers.len() != loaded_buffers.len() {
            return Err(CheckpointError::Malformed("running-stat record count mismatch".into()));
        }
        for (name, data) in buffers.iter_mut() {
            let (_, _, loaded) = loaded_buffers
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing buffer {name}")))?;
            if loaded.len() != data.len() {
                return Err(CheckpointError::Malformed(format!("buffer {name}: length mismatch")));
            }
            data.copy_from_slice(loaded);
        }
    }

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let epoch = r.u32("optimizer epoch")? as usize;
            let count = r.u32("velocity count")? as usize;
            let mut velocity = Vec::with_capacity(count);
            for _ in 0..count {
                let (name, _, data) = r.record()?;
                velocity.push((name, data));
            }
            Some(SavedOptimizer { epoch, velocity })
        }
        other => {
            return Err(CheckpointError::Malformed(format!(
                "optimizer flag must be 0 or 1, got {other}"
            )))
        }
    };

    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        config,
        config_text,
        model,
        rng: Rng::from_state(rng_state),
        optimizer,
    })
}
