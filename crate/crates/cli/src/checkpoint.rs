//! Checkpoints: a text manifest (config hash, step, tensor index) ending in
//! an `end` line, followed by one contiguous little-endian `f32` payload.
//!
//! ```text
//! TRCKPT 1
//! config <sha256>
//! step <n>
//! optimizer <steps taken>          (optional)
//! param <name> <0|1> <d0xd1..> <offset> <len>
//! m1 <name> <offset> <len>           (optional, per trainable param)
//! m2 <name> <offset> <len>
//! end
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use transreid_core::numcore::{Optimizer, ParamStore, Tensor};

const MAGIC: &str = "TRCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub steps: u64,
    /// Buffers by parameter name; empty entries are omitted.
    pub first: Vec<(String, Vec<f32>)>,
    pub second: Vec<(String, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    pub params: Vec<SavedParam>,
    pub optimizer: Option<SavedOptimizer>,
}

impl Checkpoint {
    pub fn capture(config_hash: String, step: usize, store: &ParamStore, optimizer: Option<&Optimizer>) -> Self {
        let params = store.iter().map(|(_, p)| SavedParam { name: p.name.clone(), trainable: p.trainable, value: p.value.clone() }).collect();
        let optimizer = optimizer.map(|o| {
            let named = |bufs: &[Vec<f32>]| -> Vec<(String, Vec<f32>)> {
                store.iter().zip(bufs).filter(|(_, b)| !b.is_empty()).map(|((_, p), b)| (p.name.clone(), b.clone())).collect()
            };
            SavedOptimizer { steps: o.steps_taken(), first: named(o.first_moments()), second: named(o.second_moments()) }
        });
        Checkpoint { config_hash, step, params, optimizer }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nconfig {}\nstep {}\n", self.config_hash, self.step);
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |data: &[f32]| {
            let off = payload.len();
            payload.extend_from_slice(data);
            (off, data.len())
        };
        let mut lines = Vec::new();
        for p in &self.params {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let (off, len) = push(p.value.data());
            lines.push(format!("param {} {} {} {off} {len}", p.name, u8::from(p.trainable), shape.join("x")));
        }
        if let Some(o) = &self.optimizer {
            header.push_str(&format!("optimizer {}\n", o.steps));
            for (tag, bufs) in [("m1", &o.first), ("m2", &o.second)] {
                for (name, b) in bufs {
                    let (off, len) = push(b);
                    lines.push(format!("{tag} {name} {off} {len}"));
                }
            }
        }
        for l in lines {
            header.push_str(&l);
            header.push('\n');
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(payload.len() * 4);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_header_end(bytes).context("checkpoint header has no end line")?;
        let header = std::str::from_utf8(&bytes[..end]).context("checkpoint header is not UTF-8")?;
        let body = &bytes[end..];
        ensure!(body.len() % 4 == 0, "checkpoint payload is not a whole number of f32 values");
        let payload: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let slice = |off: &str, len: &str| -> Result<Vec<f32>> {
            let (off, len): (usize, usize) = (off.parse()?, len.parse()?);
            ensure!(off + len <= payload.len(), "tensor slice {off}+{len} beyond payload of {}", payload.len());
            Ok(payload[off..off + len].to_vec())
        };
        let mut lines = header.lines();
        ensure!(lines.next() == Some(MAGIC), "not a checkpoint (bad magic)");
        let mut ck = Checkpoint { config_hash: String::new(), step: 0, params: Vec::new(), optimizer: None };
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["config", h] => ck.config_hash = (*h).to_string(),
                ["step", s] => ck.step = s.parse()?,
                ["optimizer", s] => ck.optimizer = Some(SavedOptimizer { steps: s.parse()?, first: Vec::new(), second: Vec::new() }),
                ["param", name, t, shape, off, len] => {
                    let shape: Vec<usize> = shape.split('x').map(str::parse).collect::<Result<_, _>>()?;
                    let value = Tensor::new(&shape, slice(off, len)?)?;
                    ck.params.push(SavedParam { name: (*name).to_string(), trainable: *t == "1", value });
                }
                [tag @ ("m1" | "m2"), name, off, len] => {
                    let Some(o) = ck.optimizer.as_mut() else { bail!("moment entry before the optimizer line") };
                    let list = if *tag == "m1" { &mut o.first } else { &mut o.second };
                    list.push(((*name).to_string(), slice(off, len)?));
                }
                ["end"] => break,
                _ => bail!("unrecognised checkpoint line {line:?}"),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).with_context(|| format!("writing checkpoint {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("moving checkpoint into {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
    }

    /// Errors on a config-hash mismatch unless `force`.
    pub fn check_hash(&self, expected: &str, force: bool) -> Result<()> {
        if self.config_hash != expected && !force {
            bail!("checkpoint config hash {} does not match the run config {expected} (use --force to load anyway)", self.config_hash);
        }
        Ok(())
    }

    /// Writes every saved tensor into `store`, which must have exactly the
    /// same names, order and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            bail!("config error: checkpoint holds {} tensors, model has {}", self.params.len(), store.len());
        }
        for ((_, p), s) in store.iter_mut().zip(&self.params) {
            if p.name != s.name || p.value.shape() != s.value.shape() {
                bail!("config error: checkpoint tensor {} {:?} does not match model tensor {} {:?}", s.name, s.value.shape(), p.name, p.value.shape());
            }
            p.value = s.value.clone();
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, optimizer: &mut Optimizer) -> Result<()> {
        let Some(saved) = &self.optimizer else { bail!("checkpoint has no optimizer state") };
        let fill = |current: &[Vec<f32>], named: &[(String, Vec<f32>)]| -> Result<Vec<Vec<f32>>> {
            let mut out: Vec<Vec<f32>> = current.iter().map(|b| vec![0.0; b.len()]).collect();
            for (name, buf) in named {
                let Some(id) = store.find(name) else { bail!("optimizer state for unknown tensor {name}") };
                out[id.0] = buf.clone();
            }
            Ok(out)
        };
        let first = fill(optimizer.first_moments(), &saved.first)?;
        let second = fill(optimizer.second_moments(), &saved.second)?;
        optimizer.restore(saved.steps, first, second)?;
        Ok(())
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nend\n";
    bytes.windows(pat.len()).position(|w| w == pat).map(|p| p + pat.len())
}
