//! `KLM1` model files.
//!
//! ```text
//! magic "KLM1" | version u32 | D u32 | K u32
//! | labelCount u32 | { nameLen u16 | UTF-8 name } × labelCount
//! | tileSize u32 | scaleFactor f64 | C f64
//! | backendNameLen u16 | backend name | backend outputDim u32
//! | biases f64 × K | weights f64 × D × K   (row-major, weights[d][k])
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Acquisition, LogRegModel};
use crate::backend::BackendId;
use crate::binio::*;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"KLM1";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &LogRegModel, path: impl AsRef<Path>) -> Result<()> {
    model.check()?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_model(model: &LogRegModel, w: &mut impl Write) -> Result<()> {
    let k = model.num_classes();
    let d = model.feature_dim();
    let dims = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    w.write_all(&MODEL_MAGIC)?;
    write_u32(w, MODEL_VERSION)?;
    write_u32(w, dims(d, "feature dim")?)?;
    write_u32(w, dims(k, "class count")?)?;
    write_labels(w, &model.label_names)?;
    write_u32(w, model.acquisition.tile_size)?;
    write_f64(w, model.acquisition.scale_factor)?;
    write_f64(w, model.c)?;
    write_str(w, &model.acquisition.backend.name)?;
    write_u32(
        w,
        dims(model.acquisition.backend.output_dim, "backend dim")?,
    )?;
    for b in &model.biases {
        write_f64(w, *b)?;
    }
    for v in &model.weights {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LogRegModel> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let model = read_model(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Corrupt("trailing bytes after model".into()));
    }
    Ok(model)
}

pub(crate) fn read_model(r: &mut impl Read) -> Result<LogRegModel> {
    let magic: [u8; 4] = read_array(r, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "not a model file (magic {:?})",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let d = read_u32(r, "feature dim")? as usize;
    let k = read_u32(r, "class count")? as usize;
    let label_names = read_labels(r)?;
    if label_names.len() != k {
        return Err(Error::Format(format!(
            "{} label names for {k} classes",
            label_names.len()
        )));
    }
    let tile_size = read_u32(r, "tile size")?;
    let scale_factor = read_f64(r, "scale factor")?;
    let c = read_f64(r, "C")?;
    let backend_name = read_str(r, "backend name")?;
    let backend_dim = read_u32(r, "backend dim")? as usize;
    if backend_dim != d {
        return Err(Error::Format(format!(
            "model dim {d} disagrees with backend dim {backend_dim}"
        )));
    }
    let biases = read_f64_vec(r, k, "biases")?;
    let n = d
        .checked_mul(k)
        .ok_or_else(|| Error::Corrupt("weight count overflows".into()))?;
    let weights = read_f64_vec(r, n, "weights")?;
    let model = LogRegModel {
        weights,
        biases,
        label_names,
        c,
        acquisition: Acquisition {
            backend: BackendId {
                name: backend_name,
                output_dim: backend_dim,
            },
            tile_size,
            scale_factor,
        },
    };
    model.check().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(model)
}
