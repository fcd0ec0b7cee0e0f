//! Model checkpoints: a little-endian binary tensor container plus a JSON
//! sidecar describing the shapes and, optionally, the training state.
//!
//! The binary file carries every named parameter tensor in layout order,
//! each as `name, ndim, dims, f64 data`, and two extra flat tensors for the
//! Adam moments when a training state is included. The sidecar at
//! `<path>.json` stores the model config, the training config, the
//! completed-step count, and the random-stream word position in hex, which
//! together are enough to resume training bit for bit.

use super::train::{TrainConfig, TrainState};
use super::{build_layout, DenoiserModel, ModelConfig};
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// First four bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TRO1";
/// Format version written after the magic.
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M_NAME: &str = "train.adam_m";
const ADAM_V_NAME: &str = "train.adam_v";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    model: ModelConfig,
    train: Option<TrainSidecar>,
}

#[derive(Serialize, Deserialize)]
struct TrainSidecar {
    config: TrainConfig,
    step: u64,
    /// 128-bit generator word position, hex encoded because JSON numbers
    /// cannot hold it losslessly.
    rng_word_pos: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the model, and optionally a training state, to `path` and to the
/// JSON sidecar next to it.
pub fn save_checkpoint(
    path: &Path,
    model: &DenoiserModel,
    train: Option<(&TrainConfig, &TrainState)>,
) -> Result<()> {
    if let Some((config, state)) = train {
        config.validate()?;
        if state.adam_m.len() != model.param_count() || state.adam_v.len() != model.param_count()
        {
            return Err(Error::invalid(format!(
                "training state holds {} optimizer entries, model has {}",
                state.adam_m.len(),
                model.param_count()
            )));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let extra = if train.is_some() { 2 } else { 0 };
    w.write_u32::<LittleEndian>((model.layout().len() + extra) as u32)?;
    for tensor in model.layout() {
        let data = &model.params()[tensor.offset..tensor.offset + tensor.rows * tensor.cols];
        write_tensor(&mut w, &tensor.name, &[tensor.rows, tensor.cols], data)?;
    }
    if let Some((_, state)) = train {
        write_tensor(&mut w, ADAM_M_NAME, &[1, state.adam_m.len()], &state.adam_m)?;
        write_tensor(&mut w, ADAM_V_NAME, &[1, state.adam_v.len()], &state.adam_v)?;
    }
    w.flush()?;

    let sidecar = Sidecar {
        schema_version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        train: train.map(|(config, state)| TrainSidecar {
            config: config.clone(),
            step: state.step,
            rng_word_pos: format!("{:032x}", state.rng_word_pos),
        }),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. The tensor names and
/// shapes must match the layout implied by the sidecar's model config
/// exactly, in order.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(DenoiserModel, Option<(TrainConfig, TrainState)>)> {
    let sidecar_file = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_file)?)?;
    if sidecar.schema_version != CHECKPOINT_VERSION {
        return Err(Error::Structure(format!(
            "sidecar schema version {} is not {CHECKPOINT_VERSION}",
            sidecar.schema_version
        )));
    }
    sidecar.model.validate()?;
    let layout = build_layout(&sidecar.model);

    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Structure(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Structure(format!(
            "checkpoint version {version} is not {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let expected = layout.len() + if sidecar.train.is_some() { 2 } else { 0 };
    if count != expected {
        return Err(Error::Structure(format!(
            "checkpoint holds {count} tensors, sidecar implies {expected}"
        )));
    }

    let total: usize = layout.iter().map(|t| t.rows * t.cols).sum();
    let mut params = vec![0.0; total];
    for tensor in &layout {
        let (name, dims, data) = read_tensor(&mut r)?;
        if name != tensor.name || dims != [tensor.rows, tensor.cols] {
            return Err(Error::Structure(format!(
                "tensor {name} with shape {dims:?} where {} {:?} was expected",
                tensor.name,
                [tensor.rows, tensor.cols]
            )));
        }
        params[tensor.offset..tensor.offset + data.len()].copy_from_slice(&data);
    }

    let train = match &sidecar.train {
        Some(ts) => {
            let (m_name, m_dims, adam_m) = read_tensor(&mut r)?;
            let (v_name, v_dims, adam_v) = read_tensor(&mut r)?;
            if m_name != ADAM_M_NAME || v_name != ADAM_V_NAME {
                return Err(Error::Structure(format!(
                    "optimizer tensors named {m_name}/{v_name}"
                )));
            }
            if m_dims != [1, total] || v_dims != [1, total] {
                return Err(Error::Structure(format!(
                    "optimizer tensors shaped {m_dims:?}/{v_dims:?}, expected [1, {total}]"
                )));
            }
            if !adam_m.iter().chain(&adam_v).all(|x| x.is_finite()) {
                return Err(Error::Numerical("optimizer state contains non-finite values".into()));
            }
            let rng_word_pos = u128::from_str_radix(&ts.rng_word_pos, 16).map_err(|_| {
                Error::Structure(format!("unparseable word position {:?}", ts.rng_word_pos))
            })?;
            ts.config.validate()?;
            Some((
                ts.config.clone(),
                TrainState { step: ts.step, adam_m, adam_v, rng_word_pos },
            ))
        }
        None => None,
    };

    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Structure("trailing bytes after the final tensor".into()));
    }

    let model = DenoiserModel::from_params(sidecar.model, params)?;
    Ok((model, train))
}

fn write_tensor(w: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::invalid(format!("tensor name {name:?} is too long")));
    }
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    w.write_u8(dims.len() as u8)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    for &x in data {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Structure("tensor name is not valid UTF-8".into()))?;
    let ndim = r.read_u8()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Structure(format!("tensor {name} declares {ndim} dimensions")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total = 1usize;
    for _ in 0..ndim {
        let d = r.read_u32::<LittleEndian>()? as usize;
        total = total.checked_mul(d).ok_or_else(|| {
            Error::Structure(format!("tensor {name} has an overflowing shape"))
        })?;
        dims.push(d);
    }
    if total > 1 << 28 {
        return Err(Error::Structure(format!(
            "tensor {name} declares {total} entries, refusing to allocate"
        )));
    }
    let mut data = vec![0.0; total];
    for x in data.iter_mut() {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Ok((name, dims, data))
}
