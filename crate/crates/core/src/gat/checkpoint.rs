//! Binary checkpoint: "GATC", version, config echo, then every tensor as f64 LE.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{GatConfig, GatError, GatParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GATC";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], GatError> {
        if self.0.len() < n {
            return Err(GatError::BadCheckpoint("truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, GatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn encode_config(cfg: &GatConfig, out: &mut Vec<u8>) {
    for v in [cfg.input_dim, cfg.hidden_dim, cfg.heads, cfg.layers] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [cfg.dropout, cfg.leaky_slope, cfg.lambda_cos, cfg.lr, cfg.weight_decay, cfg.hard_prob] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [cfg.max_epochs, cfg.patience, cfg.batch_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
}

fn decode_config(r: &mut Reader) -> Result<GatConfig, GatError> {
    let input_dim = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let dropout = r.f64()?;
    let leaky_slope = r.f64()?;
    let lambda_cos = r.f64()?;
    let lr = r.f64()?;
    let weight_decay = r.f64()?;
    let hard_prob = r.f64()?;
    let max_epochs = r.u32()? as usize;
    let patience = r.u32()? as usize;
    let batch_size = r.u32()? as usize;
    let seed = r.u64()?;
    Ok(GatConfig {
        input_dim,
        hidden_dim,
        heads,
        layers,
        dropout,
        leaky_slope,
        lambda_cos,
        lr,
        weight_decay,
        max_epochs,
        patience,
        batch_size,
        hard_prob,
        seed,
    })
}

pub fn checkpoint_bytes(cfg: &GatConfig, params: &GatParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.n_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    encode_config(cfg, &mut out);
    for (_, t) in params.named_tensors() {
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(GatConfig, GatParams), GatError> {
    let mut r = Reader(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(GatError::BadCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(GatError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let cfg = decode_config(&mut r)?;
    cfg.validate().map_err(|e| GatError::BadCheckpoint(e.to_string()))?;
    let mut params = GatParams::zeros(&cfg);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in params.tensors_mut().into_iter().zip(names) {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != t.dim() {
            return Err(GatError::BadCheckpoint(format!(
                "{name} is {rows}x{cols}, config implies {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        let values = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        *t = Array2::from_shape_vec((rows, cols), values).expect("shape checked");
    }
    if !r.0.is_empty() {
        return Err(GatError::BadCheckpoint("trailing bytes".into()));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &GatConfig, params: &GatParams) -> Result<(), GatError> {
    fs::write(path, checkpoint_bytes(cfg, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GatConfig, GatParams), GatError> {
    checkpoint_from_bytes(&fs::read(path)?)
}
