//! `BQF1` checkpoint container.
//!
//! ```text
//! b"BQF1" | version: u32 | sections: u32 | { tag: [u8; 4] | len: u64 | payload }*
//! ```
//!
//! All integers and floats are little-endian. Sections:
//!
//! * `CONF` JSON [`CheckpointHeader`]
//! * `TENS` model tensors
//! * `INIT` log init scales, one tensor per layer (optional)
//! * `OPTM` `beta1 | beta2 | eps | weight_decay` as f64, then moments `{name}.m` / `{name}.v` (optional)
//! * `CNTR` `step: u64 | optimizer_step: u64`
//! * `RNG ` `seed: [u8; 32] | stream: u64 | word_pos: u128` (optional)
//! * `METR` metrics CSV text
//!
//! A tensor block is `count: u32` followed by, per tensor,
//! `name_len: u16 | name | ndim: u32 | dims: ndim × u64 | data: f64…`,
//! sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binquant::{QuantMode, ScaleMode};
use crate::error::{Error, Result};
use crate::init_search::InitScales;
use crate::model::{ModelConfig, TinyLm};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"BQF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub quant_mode: QuantMode,
    pub scale_mode: ScaleMode,
    /// Pipeline stage that produced the checkpoint, e.g. `pretrain` or `stage2`.
    pub stage: String,
    pub train: Option<TrainConfig>,
}

/// Serialized ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: TinyLm,
    pub init_scales: Option<InitScales>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub metrics_csv: String,
}

impl Checkpoint {
    pub fn from_model(model: TinyLm, stage: &str) -> Self {
        let (quant_mode, scale_mode) = model
            .linears()
            .first()
            .map(|(_, l)| (l.mode, l.scale_mode))
            .unwrap_or_default();
        Self {
            header: CheckpointHeader {
                model: model.config,
                quant_mode,
                scale_mode,
                stage: stage.into(),
                train: None,
            },
            model,
            init_scales: None,
            optimizer: None,
            step: 0,
            rng: None,
            metrics_csv: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", serde_json::to_vec(&self.header)?));
        let tensors: BTreeMap<String, &Tensor> = self.model.named_tensors().into_iter().collect();
        sections.push((*b"TENS", encode_tensors(&tensors)));
        if let Some(init) = &self.init_scales {
            let t: BTreeMap<String, &Tensor> = init
                .log_scales()
                .iter()
                .map(|(k, v)| (k.clone(), v))
                .collect();
            sections.push((*b"INIT", encode_tensors(&t)));
        }
        let mut opt_step = 0u64;
        if let Some(opt) = &self.optimizer {
            opt_step = opt.step;
            let owned = opt.state_tensors();
            let t: BTreeMap<String, &Tensor> = owned.iter().map(|(k, v)| (k.clone(), v)).collect();
            let mut b = Vec::new();
            for h in [opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
                b.extend_from_slice(&h.to_le_bytes());
            }
            b.extend_from_slice(&encode_tensors(&t));
            sections.push((*b"OPTM", b));
        }
        let mut cntr = Vec::with_capacity(16);
        cntr.extend_from_slice(&self.step.to_le_bytes());
        cntr.extend_from_slice(&opt_step.to_le_bytes());
        sections.push((*b"CNTR", cntr));
        if let Some(rng) = &self.rng {
            let mut b = Vec::with_capacity(56);
            b.extend_from_slice(&rng.seed);
            b.extend_from_slice(&rng.stream.to_le_bytes());
            b.extend_from_slice(&rng.word_pos.to_le_bytes());
            sections.push((*b"RNG ", b));
        }
        sections.push((*b"METR", self.metrics_csv.as_bytes().to_vec()));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(&tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected BQF1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            sections.insert(tag, r.take(len)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        let need = |tag: &[u8; 4]| {
            sections.get(tag).copied().ok_or_else(|| {
                Error::Format(format!("missing section {}", String::from_utf8_lossy(tag)))
            })
        };
        let header: CheckpointHeader = serde_json::from_slice(need(b"CONF")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let tensors = decode_tensors(need(b"TENS")?)?;
        let model = rebuild_model(&header, tensors)?;
        let init_scales = sections
            .get(b"INIT")
            .map(|b| decode_tensors(b).map(InitScales::from_log_scales))
            .transpose()?;
        let mut cr = Reader {
            bytes: need(b"CNTR")?,
            pos: 0,
        };
        let step = cr.u64()?;
        let opt_step = cr.u64()?;
        let optimizer = match sections.get(b"OPTM") {
            Some(b) => {
                let mut or = Reader { bytes: b, pos: 0 };
                let mut hyper = [0.0; 4];
                for h in &mut hyper {
                    *h = f64::from_le_bytes(or.take(8)?.try_into().unwrap());
                }
                let mut opt = AdamW::new(hyper[3]);
                opt.beta1 = hyper[0];
                opt.beta2 = hyper[1];
                opt.eps = hyper[2];
                opt.load_state_tensors(&decode_tensors(&b[32..])?);
                opt.step = opt_step;
                Some(opt)
            }
            None => None,
        };
        let rng = match sections.get(b"RNG ") {
            Some(b) => {
                let mut rr = Reader { bytes: b, pos: 0 };
                let seed: [u8; 32] = rr.take(32)?.try_into().unwrap();
                let stream = rr.u64()?;
                let word_pos = u128::from_le_bytes(rr.take(16)?.try_into().unwrap());
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
            None => None,
        };
        let metrics_csv = String::from_utf8(need(b"METR")?.to_vec())
            .map_err(|_| Error::Format("metrics section is not UTF-8".into()))?;
        Ok(Self {
            header,
            model,
            init_scales,
            optimizer,
            step,
            rng,
            metrics_csv,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn rebuild_model(header: &CheckpointHeader, tensors: BTreeMap<String, Tensor>) -> Result<TinyLm> {
    header.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = TinyLm::new(header.model, &mut rng)?;
    model.set_quantization(header.quant_mode, header.scale_mode)?;
    let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in &expected {
        if !tensors.contains_key(name) {
            return Err(Error::Format(format!("checkpoint lacks tensor {name}")));
        }
    }
    for (name, t) in tensors {
        if let Some(layer) = name.strip_suffix(".input_scale") {
            let l = model
                .linear_mut(layer)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            l.input_scale = Some(t);
            continue;
        }
        let slot = model
            .tensor_mut(&name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?} does not match config {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}

fn encode_tensors(tensors: &BTreeMap<String, &Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in tensor block".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
