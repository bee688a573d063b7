//! Little-endian binary checkpoint.
//!
//! Layout: magic `ECGFCKPT`, `u32` version, `u32`-prefixed UTF-8 header of
//! `key = value` lines, `f64` best validation loss, `u32` epoch, `u64` model
//! seed, `u64` training seed, `u64` optimizer step, `u32` tensor count, then
//! per tensor: `u32`-prefixed UTF-8 name, `u8` rank, `u32` dims, raw `f64`s.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::{AdamHyper, AdamState};
use crate::data::{NormStats, Normalization};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ECGFCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to restore the best model of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub normalization: Normalization,
    pub norm_stats: Option<NormStats>,
    pub best_val_loss: f64,
    /// 1-based epoch at which this checkpoint was taken.
    pub epoch: usize,
    pub train_seed: u64,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        normalization: Normalization,
        norm_stats: Option<NormStats>,
        best_val_loss: f64,
        epoch: usize,
        train_seed: u64,
        optimizer: Option<AdamState>,
    ) -> Self {
        Self {
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), Tensor::new(p.value.shape().to_vec(), p.value.data().to_vec()).unwrap()))
                .collect(),
            normalization,
            norm_stats,
            best_val_loss,
            epoch,
            train_seed,
            optimizer,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::build(&self.config)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    /// Fails unless `expected` describes the same architecture.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let strip = |c: &ModelConfig| ModelConfig { seed: 0, ..c.clone() };
        if strip(&self.config) != strip(expected) {
            let diffs: Vec<String> = self
                .config
                .to_kv()
                .into_iter()
                .zip(expected.to_kv())
                .filter(|((k, a), (_, b))| *k != "seed" && a != b)
                .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, expected {b}"))
                .collect();
            return Err(Error::ConfigMismatch(diffs.join("; ")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header: Vec<String> = self
            .config
            .to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect();
        header.push(format!("normalization = {}", self.normalization.as_str()));
        if let Some(s) = &self.norm_stats {
            header.push(format!("norm_fitted_on = {}", s.fitted_on));
        }
        if let Some(o) = &self.optimizer {
            let h = o.hyper;
            header.push(format!("learning_rate = {}", h.learning_rate));
            header.push(format!("beta1 = {}", h.beta1));
            header.push(format!("beta2 = {}", h.beta2));
            header.push(format!("epsilon = {}", h.epsilon));
        }
        let header = header.join("\n");

        let mut tensors: Vec<(String, &[usize], &[f64])> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t.shape(), t.data()))
            .collect();
        if let Some(s) = &self.norm_stats {
            tensors.push(("norm/mean".into(), s.mean.shape(), s.mean.data()));
            tensors.push(("norm/std".into(), s.std.shape(), s.std.data()));
        }
        let mut moment_shapes = Vec::new();
        if let Some(o) = &self.optimizer {
            for (i, (n, _)) in self.params.iter().enumerate() {
                moment_shapes.push((format!("adam.m/{n}"), [o.m[i].len()], i, true));
                moment_shapes.push((format!("adam.v/{n}"), [o.v[i].len()], i, false));
            }
        }
        for (name, shape, i, first) in &moment_shapes {
            let o = self.optimizer.as_ref().unwrap();
            let data = if *first { &o.m[*i] } else { &o.v[*i] };
            tensors.push((name.clone(), shape, data));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &header);
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.train_seed.to_le_bytes());
        let step = self.optimizer.as_ref().map_or(0, |o| o.step);
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            put_str(&mut out, &name);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_at = r.pos;
        let header = r.string()?;
        let best_val_loss = r.f64()?;
        let epoch = r.u32()? as usize;
        let model_seed = r.u64()?;
        let train_seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank_at = r.pos;
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format {
                offset: rank_at,
                msg: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }

        let mut config = ModelConfig::default();
        let mut normalization = Normalization::PerFeature;
        let mut fitted_on = None;
        let mut hyper = AdamHyper::default();
        let bad_header = |msg: String| Error::Format {
            offset: header_at,
            msg,
        };
        for line in header.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad_header(format!("malformed header line '{line}'")))?;
            let parse_f = |v: &str| v.parse::<f64>().map_err(|_| bad_header(format!("bad {k}")));
            match k {
                "normalization" => normalization = v.parse().map_err(bad_header)?,
                "norm_fitted_on" => fitted_on = Some(v.to_string()),
                "learning_rate" => hyper.learning_rate = parse_f(v)?,
                "beta1" => hyper.beta1 = parse_f(v)?,
                "beta2" => hyper.beta2 = parse_f(v)?,
                "epsilon" => hyper.epsilon = parse_f(v)?,
                _ => {
                    if !config.set(k, v).map_err(bad_header)? {
                        return Err(bad_header(format!("unknown header key '{k}'")));
                    }
                }
            }
        }
        config.seed = model_seed;

        let mut params = Vec::new();
        let (mut mean, mut std) = (None, None);
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.push((n.to_string(), t));
            } else if name == "norm/mean" {
                mean = Some(t);
            } else if name == "norm/std" {
                std = Some(t);
            } else if name.starts_with("adam.m/") {
                m.push(t.into_data());
            } else if name.starts_with("adam.v/") {
                v.push(t.into_data());
            } else {
                return Err(Error::Format {
                    offset: header_at,
                    msg: format!("unknown tensor '{name}'"),
                });
            }
        }
        let norm_stats = match (mean, std, fitted_on) {
            (Some(mean), Some(std), Some(fitted_on)) => Some(NormStats {
                mean,
                std,
                fitted_on,
            }),
            (None, None, None) => None,
            _ => return Err(bad_header("incomplete normalization statistics".into())),
        };
        let optimizer = if m.is_empty() {
            None
        } else {
            Some(AdamState { hyper, step, m, v })
        };
        Ok(Self {
            config,
            params,
            normalization,
            norm_stats,
            best_val_loss,
            epoch,
            train_seed,
            optimizer,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(&format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }
}

/// Writes via a temporary sibling file and rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads and checks that the stored architecture matches `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_config(expected)?;
    Ok(ckpt)
}
