//! Binary checkpoints for policy parameters and optimizer state.
//!
//! Format (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "FPCK"
//! version   u32      1
//! d         u32      feature dimension
//! h         u32      hidden size
//! layers    u32      LSTM layer count (always 3; validated on load)
//! flags     u32      bit 0: optimizer moments present
//! adam_t    u64      optimizer step count (0 when no optimizer state)
//! episode   u64      episodes completed when the checkpoint was written
//! n         u64      parameter count (validated against d, h)
//! theta     n × f32
//! [m        n × f32  when flags bit 0]
//! [v        n × f32  when flags bit 0]
//! ```
//!
//! Values are stored as f32. Training keeps f64 in memory but rounds
//! parameters and moments to f32 in place after every optimizer step, so
//! every checkpoint is an exact image of the live state and a run resumed
//! from disk continues bit-identically to one that never stopped, no matter
//! where it was interrupted. Writes go to a temporary file renamed into
//! place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policy::{Layout, PolicyParams, LSTM_LAYERS};

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;

/// Optimizer moments restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// First-moment estimate.
    pub m: Vec<f64>,
    /// Second-moment estimate.
    pub v: Vec<f64>,
    /// Completed optimizer steps.
    pub t: u64,
}

/// A loaded checkpoint: parameters, optional optimizer state, episode count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Policy parameters (f32-precision values widened to f64).
    pub params: PolicyParams,
    /// Adam moments, when the checkpoint carried them.
    pub optimizer: Option<OptimizerState>,
    /// Episodes completed at write time.
    pub episode: u64,
}

/// Writes a checkpoint. Callers that keep training afterwards should have
/// quantized their live state (`PolicyParams::quantize_to_f32`,
/// `Adam::quantize_to_f32`) so memory and disk agree; the trainer does this
/// after every optimizer step.
pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    optimizer: Option<&Adam>,
    episode: u64,
) -> Result<()> {
    let layout = Layout::new(params.feature_dim, params.hidden);
    if params.len() != layout.len() {
        return Err(Error::Checkpoint(format!(
            "parameter vector has {} values but the {}x{} layout needs {}",
            params.len(),
            params.feature_dim,
            params.hidden,
            layout.len()
        )));
    }
    if let Some(opt) = optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments sized {}/{} do not match {} parameters",
                opt.m.len(),
                opt.v.len(),
                params.len()
            )));
        }
    }

    let mut buf: Vec<u8> = Vec::with_capacity(44 + params.len() * 4 * 3);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(params.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(LSTM_LAYERS as u32).to_le_bytes());
    let flags = if optimizer.is_some() { FLAG_OPTIMIZER } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&optimizer.map_or(0, |o| o.t).to_le_bytes());
    buf.extend_from_slice(&episode.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &x in &params.theta {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(opt) = optimizer {
        for &x in opt.m.iter().chain(opt.v.iter()) {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads and validates a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint truncated at byte {} of {}",
                *cursor,
                bytes.len()
            )));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().expect("4 bytes")))
    };
    let read_u64 = |cursor: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(cursor, 8)?.try_into().expect("8 bytes")))
    };

    let magic = take(&mut cursor, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; not a policy checkpoint"
        )));
    }
    let version = read_u32(&mut cursor)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let d = read_u32(&mut cursor)? as usize;
    let h = read_u32(&mut cursor)? as usize;
    let layers = read_u32(&mut cursor)? as usize;
    if layers != LSTM_LAYERS {
        return Err(Error::Checkpoint(format!(
            "checkpoint built for {layers} recurrent layers; this build uses {LSTM_LAYERS}"
        )));
    }
    let flags = read_u32(&mut cursor)?;
    let adam_t = read_u64(&mut cursor)?;
    let episode = read_u64(&mut cursor)?;
    let n = read_u64(&mut cursor)? as usize;
    let layout = Layout::new(d, h);
    if d == 0 || h == 0 || n != layout.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint claims {n} parameters but a {d}x{h} policy has {}",
            layout.len()
        )));
    }

    let read_block = |cursor: &mut usize| -> Result<Vec<f64>> {
        let raw = take(cursor, n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    };
    let theta = read_block(&mut cursor)?;
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Checkpoint("checkpoint parameters contain non-finite values".into()));
    }
    let optimizer = if flags & FLAG_OPTIMIZER != 0 {
        let m = read_block(&mut cursor)?;
        let v = read_block(&mut cursor)?;
        Some(OptimizerState { m, v, t: adam_t })
    } else {
        None
    };
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cursor
        )));
    }

    Ok(Checkpoint {
        params: PolicyParams {
            feature_dim: d,
            hidden: h,
            theta,
        },
        optimizer,
        episode,
    })
}
