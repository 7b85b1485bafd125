//! Self-describing checkpoint container: JSON with every tensor stored as
//! base64 of little-endian f64 bytes.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::TrainConfig;
use crate::error::{Error, Result};
use crate::network::{Discriminator, Parameters, Segmentor};
use crate::optim::Adam;
use crate::seed;

pub const FORMAT: &str = "octave-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub len: usize,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Best validation Dice so far; absent before the first evaluation.
    pub best_dice: Option<f64>,
    pub segmentor: Vec<NamedTensor>,
    pub discriminator: Vec<NamedTensor>,
    pub segmentor_optimizer: Option<OptimizerState>,
    pub discriminator_optimizer: Option<OptimizerState>,
}

fn encode(name: &str, data: &[f64]) -> NamedTensor {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    NamedTensor {
        name: name.to_string(),
        len: data.len(),
        data: STANDARD.encode(bytes),
    }
}

fn decode(t: &NamedTensor) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD
        .decode(&t.data)
        .map_err(|e| format!("tensor {}: {e}", t.name))?;
    if bytes.len() != t.len * 8 {
        return Err(format!(
            "tensor {}: {} bytes for {} values",
            t.name,
            bytes.len(),
            t.len
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn encode_params<P: Parameters>(p: &P) -> Vec<NamedTensor> {
    p.tensors().iter().map(|(n, t)| encode(n, t)).collect()
}

fn load_params<P: Parameters>(p: &mut P, stored: &[NamedTensor]) -> std::result::Result<(), String> {
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != stored.len() {
        return Err(format!("{} tensors stored, {} expected", stored.len(), names.len()));
    }
    for ((dst, name), src) in p.tensors_mut().into_iter().zip(names).zip(stored) {
        if src.name != name {
            return Err(format!("tensor {} stored where {name} expected", src.name));
        }
        let data = decode(src)?;
        if data.len() != dst.len() {
            return Err(format!("tensor {name}: {} values, expected {}", data.len(), dst.len()));
        }
        *dst = data;
    }
    Ok(())
}

fn encode_adam<P: Parameters>(p: &P, opt: &Adam) -> OptimizerState {
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    OptimizerState {
        step: opt.step,
        m: names.iter().zip(&opt.m).map(|(n, t)| encode(n, t)).collect(),
        v: names.iter().zip(&opt.v).map(|(n, t)| encode(n, t)).collect(),
    }
}

fn load_adam(opt: &mut Adam, state: &OptimizerState) -> std::result::Result<(), String> {
    if state.m.len() != opt.m.len() || state.v.len() != opt.v.len() {
        return Err("optimizer state does not match the network".into());
    }
    opt.step = state.step;
    for (dst, src) in opt.m.iter_mut().zip(&state.m).chain(opt.v.iter_mut().zip(&state.v)) {
        let data = decode(src)?;
        if data.len() != dst.len() {
            return Err(format!("optimizer tensor {} has the wrong length", src.name));
        }
        *dst = data;
    }
    Ok(())
}

/// Networks and optimizer states restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Restored {
    pub segmentor: Segmentor,
    pub discriminator: Discriminator,
    pub segmentor_optimizer: Adam,
    pub discriminator_optimizer: Adam,
}

/// Freshly initialized networks for a config; initialization draws from the
/// run seed's "init" streams.
pub fn init_networks(cfg: &TrainConfig) -> (Segmentor, Discriminator) {
    let seg = Segmentor::new(
        cfg.depth,
        cfg.base_width,
        cfg.classes,
        &mut seed::rng(cfg.seed, "init/segmentor"),
    );
    let disc = Discriminator::new(
        cfg.depth,
        cfg.classes,
        cfg.disc_width,
        &mut seed::rng(cfg.seed, "init/discriminator"),
    );
    (seg, disc)
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        epoch: usize,
        best_dice: Option<f64>,
        seg: &Segmentor,
        disc: &Discriminator,
        optimizers: Option<(&Adam, &Adam)>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            epoch,
            best_dice,
            segmentor: encode_params(seg),
            discriminator: encode_params(disc),
            segmentor_optimizer: optimizers.map(|(s, _)| encode_adam(seg, s)),
            discriminator_optimizer: optimizers.map(|(_, d)| encode_adam(disc, d)),
        }
    }

    pub fn restore(&self) -> Result<Restored> {
        self.restore_at(Path::new("<memory>"))
    }

    fn restore_at(&self, path: &Path) -> Result<Restored> {
        let fail = |m: String| Error::format(path, m);
        self.config.validate()?;
        let (mut seg, mut disc) = init_networks(&self.config);
        load_params(&mut seg, &self.segmentor).map_err(fail)?;
        load_params(&mut disc, &self.discriminator).map_err(fail)?;
        let mut so = Adam::new(&seg, self.config.weight_decay);
        let mut dopt = Adam::new(&disc, self.config.weight_decay);
        if let Some(s) = &self.segmentor_optimizer {
            load_adam(&mut so, s).map_err(fail)?;
        }
        if let Some(s) = &self.discriminator_optimizer {
            load_adam(&mut dopt, s).map_err(fail)?;
        }
        Ok(Restored {
            segmentor: seg,
            discriminator: disc,
            segmentor_optimizer: so,
            discriminator_optimizer: dopt,
        })
    }

    /// Atomic write: the JSON goes to a sibling temp file that is then
    /// renamed over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if ck.format != FORMAT {
            return Err(Error::format(path, format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Load and restore in one go, with errors naming the file.
    pub fn load_restored(path: &Path) -> Result<(Self, Restored)> {
        let ck = Self::load(path)?;
        let r = ck.restore_at(path)?;
        Ok((ck, r))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
