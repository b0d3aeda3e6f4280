//! Binary checkpoints: magic, version, JSON header, raw little-endian f32s.
//!
//! Payload order: denoiser params, encoder params, then the first and second
//! Adam moments of the denoiser and of the encoder, each in layout order.

use std::fs;
use std::path::Path;

use groundiff_nn::ParamSet;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::train::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::text::{param_checksum, Vocabulary};

const MAGIC: &[u8; 4] = b"AGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    null_uses: u64,
    adam_steps: [u64; 2],
    vocab_hash: String,
    vocab: Vec<String>,
    unet_layout: Vec<(String, Vec<usize>)>,
    encoder_layout: Vec<(String, Vec<usize>)>,
    encoder_checksum: String,
}

/// A trained (or partially trained) model with its optimiser state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn layout(ps: &ParamSet<f32>) -> Vec<(String, Vec<usize>)> {
    ps.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
}

fn push_all(out: &mut Vec<u8>, chunks: impl IntoIterator<Item = impl AsRef<[f32]>>) {
    for c in chunks {
        for v in c.as_ref() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.context)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn like(&mut self, ps: &ParamSet<f32>) -> Result<Vec<Vec<f32>>> {
        ps.iter().map(|p| self.floats(p.data.len())).collect()
    }
}

impl Checkpoint {
    pub fn new(model: Model, train: TrainConfig) -> Self {
        let state = TrainState::new(&model, &train);
        Self { model, train, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let (su, mu, vu) = self.state.adam_unet.state();
        let (se, me, ve) = self.state.adam_encoder.state();
        let header = Header {
            model: m.config.clone(),
            train: self.train.clone(),
            step: self.state.step,
            null_uses: self.state.null_uses,
            adam_steps: [su, se],
            vocab_hash: format!("{:016x}", m.vocab.hash()),
            vocab: m.vocab.pieces().to_vec(),
            unet_layout: layout(&m.unet_params),
            encoder_layout: layout(&m.encoder_params),
            encoder_checksum: format!("{:016x}", param_checksum(&m.encoder_params)),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_all(&mut out, m.unet_params.iter().map(|p| &p.data));
        push_all(&mut out, m.encoder_params.iter().map(|p| &p.data));
        push_all(&mut out, mu.iter().chain(vu));
        push_all(&mut out, me.iter().chain(ve));
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, context: context.to_string() };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(format!("{context}: not a checkpoint (bad magic)")));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("{context}: unsupported version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("{context}: bad header: {e}")))?;
        let vocab = Vocabulary::from_lines(&header.vocab.join("\n"))?;
        if format!("{:016x}", vocab.hash()) != header.vocab_hash {
            return Err(Error::Checkpoint(format!("{context}: stored vocabulary does not match its hash")));
        }
        let mut model = Model::new(header.model.clone(), vocab, 0)?;
        if layout(&model.unet_params) != header.unet_layout || layout(&model.encoder_params) != header.encoder_layout {
            return Err(Error::Checkpoint(format!("{context}: parameter layout differs from configuration")));
        }
        let (pu, pe) = (r.like(&model.unet_params)?, r.like(&model.encoder_params)?);
        for (p, v) in model.unet_params.iter_mut().zip(pu) {
            p.data = v;
        }
        for (p, v) in model.encoder_params.iter_mut().zip(pe) {
            p.data = v;
        }
        let mut state = TrainState::new(&model, &header.train);
        let (mu, vu) = (r.like(&model.unet_params)?, r.like(&model.unet_params)?);
        let (me, ve) = (r.like(&model.encoder_params)?, r.like(&model.encoder_params)?);
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{context}: {} trailing bytes", bytes.len() - r.pos)));
        }
        state.adam_unet.restore(header.adam_steps[0], mu, vu);
        state.adam_encoder.restore(header.adam_steps[1], me, ve);
        state.step = header.step;
        state.null_uses = header.null_uses;
        Ok(Self { model, train: header.train, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Loads and refuses a checkpoint whose vocabulary differs from `vocab`.
    pub fn load_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.vocab.hash() != vocab.hash() {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary hash {:016x} differs from expected {:016x}",
                path.display(),
                ck.model.vocab.hash(),
                vocab.hash()
            )));
        }
        Ok(ck)
    }
}
