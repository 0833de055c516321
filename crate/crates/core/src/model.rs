//! Decoder-only byte-level transformer whose block linears are [`BinLinear`]s.
//!
//! Pre-norm blocks with rmsnorm, learned positions, SiLU MLP. The token
//! embedding and the output head always stay in full precision.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::binquant::{quantized_weight, BinLinear, QuantMode, ScaleMode};
use crate::error::{domain_err, Error, Result};
use crate::init_search::InitScales;
use crate::packed::{PackedBinaryMatrix, PackedLinear};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} smaller than d_model {}",
                self.d_ff, self.d_model
            )));
        }
        Ok(())
    }
}

/// Names of the binarized projections inside a block, in forward order.
pub const BLOCK_LINEARS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm_attn: Tensor,
    pub q: BinLinear,
    pub k: BinLinear,
    pub v: BinLinear,
    pub o: BinLinear,
    pub norm_mlp: Tensor,
    pub up: BinLinear,
    pub down: BinLinear,
}

impl Block {
    fn linear(&self, name: &str) -> Option<&BinLinear> {
        Some(match name {
            "q" => &self.q,
            "k" => &self.k,
            "v" => &self.v,
            "o" => &self.o,
            "up" => &self.up,
            "down" => &self.down,
            _ => return None,
        })
    }

    fn linear_mut(&mut self, name: &str) -> Option<&mut BinLinear> {
        Some(match name {
            "q" => &mut self.q,
            "k" => &mut self.k,
            "v" => &mut self.v,
            "o" => &mut self.o,
            "up" => &mut self.up,
            "down" => &mut self.down,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub norm_f: Tensor,
    pub head: Tensor,
}

/// Which leaves of a forward pass receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Every model parameter; `S_l` only where the scale scheme makes it learnable.
    Model,
    /// Only the log init scales supplied in [`ForwardOptions::init_scales`].
    InitScales,
}

#[derive(Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub trainable: Trainable,
    /// Progressive temperature shared by every layer.
    pub temperature: f64,
    /// Per-layer input-channel scales searched end to end.
    pub init_scales: Option<&'a InitScales>,
    /// Replaces every binarized layer by its packed form.
    pub packed: Option<&'a BTreeMap<String, PackedBinaryMatrix>>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            trainable: Trainable::Nothing,
            temperature: 1.0,
            init_scales: None,
            packed: None,
        }
    }
}

/// A recorded forward pass with the leaves that were bound as trainable.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub trainable: Vec<(String, Var)>,
}

struct Binder<'a> {
    g: Graph,
    trainable: Vec<(String, Var)>,
    opts: ForwardOptions<'a>,
}

impl Binder<'_> {
    fn bind(&mut self, name: &str, t: &Tensor, learnable: bool) -> Var {
        if learnable && self.opts.trainable == Trainable::Model {
            let v = self.g.param(t);
            self.trainable.push((name.to_string(), v));
            v
        } else {
            self.g.constant(t.clone())
        }
    }

    fn linear(&mut self, name: &str, layer: &BinLinear, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some(s) = &layer.input_scale {
            let sv = self.g.constant(s.clone());
            x = self.g.mul(x, sv)?;
        }
        if let Some(packed) = self.opts.packed.and_then(|p| p.get(name)) {
            return Ok(self.g.custom(
                x,
                Box::new(PackedLinear {
                    matrix: packed.clone(),
                }),
            ));
        }
        let mut w = self.bind(&format!("{name}.weight"), &layer.weight, true);
        if let Some(u) = self.opts.init_scales.and_then(|s| s.log_scale(name)) {
            let uv = if self.opts.trainable == Trainable::InitScales {
                let v = self.g.param(u);
                self.trainable.push((name.to_string(), v));
                v
            } else {
                self.g.constant(u.clone())
            };
            let s = self.g.exp(uv);
            let neg = self.g.scale(uv, -1.0);
            let inv = self.g.exp(neg);
            w = self.g.mul(w, inv)?;
            x = self.g.mul(x, s)?;
            if self.opts.trainable == Trainable::InitScales && layer.mode == QuantMode::SignSte {
                let wq = exact_sign_weight(&mut self.g, &layer.weight, w)?;
                return self.g.linear(x, wq);
            }
        }
        let s_l = self.bind(&format!("{name}.s_l"), &layer.s_l, layer.s_l_trainable());
        let wq = quantized_weight(
            &mut self.g,
            w,
            s_l,
            layer.mode,
            layer.scale_mode,
            self.opts.temperature,
        )?;
        self.g.linear(x, wq)
    }
}

/// `S_a(w)·sign(w)` where `w` is a positive column scaling of `weight`.
///
/// The signs do not depend on the scaling, so the analytic scale is the only
/// path through which `w` reaches the output and it is differentiated exactly.
fn exact_sign_weight(g: &mut Graph, weight: &Tensor, w: Var) -> Result<Var> {
    let cols = weight.cols();
    let signs = g.constant(weight.map(crate::binquant::sign));
    let abs = g.mul(w, signs)?;
    let mean = g.constant(Tensor::full(&[1, cols], 1.0 / cols as f64));
    let sa = g.linear(abs, mean)?;
    g.scale_rows(signs, sa)
}

fn normal_init<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl TinyLm {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal_init(&[config.vocab_size, d], std, rng);
        let pos_emb = normal_init(&[config.max_seq_len, d], std, rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm_attn: Tensor::full(&[d], 1.0),
                q: BinLinear::new(normal_init(&[d, d], std, rng)),
                k: BinLinear::new(normal_init(&[d, d], std, rng)),
                v: BinLinear::new(normal_init(&[d, d], std, rng)),
                o: BinLinear::new(normal_init(&[d, d], resid_std, rng)),
                norm_mlp: Tensor::full(&[d], 1.0),
                up: BinLinear::new(normal_init(&[config.d_ff, d], std, rng)),
                down: BinLinear::new(normal_init(&[d, config.d_ff], resid_std, rng)),
            })
            .collect();
        let norm_f = Tensor::full(&[d], 1.0);
        let head = normal_init(&[config.vocab_size, d], std, rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            norm_f,
            head,
        })
    }

    /// Names of every binarized layer, `blocks.{i}.{q,k,v,o,up,down}`.
    pub fn linear_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| BLOCK_LINEARS.iter().map(move |n| format!("blocks.{i}.{n}")))
            .collect()
    }

    fn split_name(name: &str) -> Option<(usize, &str)> {
        let rest = name.strip_prefix("blocks.")?;
        let (idx, lin) = rest.split_once('.')?;
        Some((idx.parse().ok()?, lin))
    }

    pub fn linear(&self, name: &str) -> Option<&BinLinear> {
        let (i, lin) = Self::split_name(name)?;
        self.blocks.get(i)?.linear(lin)
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut BinLinear> {
        let (i, lin) = Self::split_name(name)?;
        self.blocks.get_mut(i)?.linear_mut(lin)
    }

    pub fn linears(&self) -> Vec<(String, &BinLinear)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                BLOCK_LINEARS
                    .iter()
                    .map(move |n| (format!("blocks.{i}.{n}"), b.linear(n).unwrap()))
            })
            .collect()
    }

    /// Sets quantizer and scale scheme on every block linear.
    pub fn set_quantization(&mut self, mode: QuantMode, scale_mode: ScaleMode) -> Result<()> {
        for b in &mut self.blocks {
            for n in BLOCK_LINEARS {
                b.linear_mut(n)
                    .unwrap()
                    .set_quantization(mode, scale_mode)?;
            }
        }
        Ok(())
    }

    /// Every stored tensor by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm_attn"), &b.norm_attn));
            out.push((format!("blocks.{i}.norm_mlp"), &b.norm_mlp));
            for n in BLOCK_LINEARS {
                let l = b.linear(n).unwrap();
                out.push((format!("blocks.{i}.{n}.weight"), &l.weight));
                out.push((format!("blocks.{i}.{n}.s_l"), &l.s_l));
                if let Some(s) = &l.input_scale {
                    out.push((format!("blocks.{i}.{n}.input_scale"), s));
                }
            }
        }
        out.push(("norm_f".into(), &self.norm_f));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable access to a stored tensor by the names of [`Self::named_tensors`].
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "norm_f" => return Some(&mut self.norm_f),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, field) = rest.split_once('.')?;
        let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "norm_attn" => Some(&mut b.norm_attn),
            "norm_mlp" => Some(&mut b.norm_mlp),
            _ => {
                let (lin, part) = field.split_once('.')?;
                let l = b.linear_mut(lin)?;
                match part {
                    "weight" => Some(&mut l.weight),
                    "s_l" => Some(&mut l.s_l),
                    "input_scale" => l.input_scale.as_mut(),
                    _ => None,
                }
            }
        }
    }

    /// Records a forward pass over `batch` sequences of length `seq` laid out row-major in `ids`.
    pub fn forward_pass(
        &self,
        ids: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if ids.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "{} ids for batch {} × seq {}",
                ids.len(),
                batch,
                seq
            )));
        }
        if seq > cfg.max_seq_len {
            return Err(domain_err!(
                "sequence length {seq} exceeds {}",
                cfg.max_seq_len
            ));
        }
        let mut bd = Binder {
            g: Graph::new(),
            trainable: Vec::new(),
            opts,
        };
        let tok = bd.bind("tok_emb", &self.tok_emb, true);
        let pos = bd.bind("pos_emb", &self.pos_emb, true);
        let te = bd.g.embedding(tok, ids)?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pe = bd.g.embedding(pos, &pos_ids)?;
        let mut x = bd.g.add(te, pe)?;

        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let na = bd.bind(&format!("{p}.norm_attn"), &b.norm_attn, true);
            let h = bd.g.rmsnorm(x, na)?;
            let q = bd.linear(&format!("{p}.q"), &b.q, h)?;
            let k = bd.linear(&format!("{p}.k"), &b.k, h)?;
            let v = bd.linear(&format!("{p}.v"), &b.v, h)?;
            let a = bd.g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let o = bd.linear(&format!("{p}.o"), &b.o, a)?;
            x = bd.g.add(x, o)?;

            let nm = bd.bind(&format!("{p}.norm_mlp"), &b.norm_mlp, true);
            let h = bd.g.rmsnorm(x, nm)?;
            let u = bd.linear(&format!("{p}.up"), &b.up, h)?;
            let u = bd.g.silu(u);
            let dn = bd.linear(&format!("{p}.down"), &b.down, u)?;
            x = bd.g.add(x, dn)?;
        }
        let nf = bd.bind("norm_f", &self.norm_f, true);
        let h = bd.g.rmsnorm(x, nf)?;
        let head = bd.bind("head", &self.head, true);
        let logits = bd.g.linear(h, head)?;
        Ok(ForwardPass {
            graph: bd.g,
            logits,
            trainable: bd.trainable,
        })
    }

    /// Logits `[seq × vocab]` for one sequence.
    pub fn forward(&self, ids: &[usize], opts: ForwardOptions<'_>) -> Result<Tensor> {
        let fp = self.forward_pass(ids, 1, ids.len(), opts)?;
        Ok(fp.graph.value(fp.logits).clone())
    }

    /// Forward pass plus mean next-token cross entropy over `batch` windows of
    /// `seq + 1` tokens each.
    pub fn loss_pass(
        &self,
        windows: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<(ForwardPass, Var)> {
        if windows.len() != batch * (seq + 1) {
            return Err(Error::Dimension(format!(
                "{} tokens for {} windows of {}",
                windows.len(),
                batch,
                seq + 1
            )));
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for w in windows.chunks(seq + 1) {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        let mut fp = self.forward_pass(&inputs, batch, seq, opts)?;
        let loss = fp.graph.cross_entropy(fp.logits, &targets)?;
        Ok((fp, loss))
    }

    /// Mean next-token cross entropy over positions `1..L` of one sequence.
    pub fn autoregressive_loss(&self, ids: &[usize], opts: ForwardOptions<'_>) -> Result<f64> {
        if ids.len() < 2 {
            return Err(domain_err!("autoregressive loss needs at least two tokens"));
        }
        let (fp, loss) = self.loss_pass(ids, 1, ids.len() - 1, opts)?;
        Ok(fp.graph.value(loss).data()[0])
    }

    /// Mean stored bits per weight over the block linears.
    ///
    /// Full-precision layers count 16 bits per weight. Binarized layers count
    /// one sign bit per weight, one 16-bit scale per output row, and one
    /// 16-bit value per input channel when a folded input scale is kept.
    pub fn average_bit(&self) -> f64 {
        let mut bits = 0.0;
        let mut params = 0.0;
        for (_, l) in self.linears() {
            let (rows, cols) = (l.out_features() as f64, l.in_features() as f64);
            params += rows * cols;
            bits += layer_bits(l.mode, rows, cols, l.input_scale.is_some());
        }
        bits / params
    }

    /// Packs every binarized layer with its merged scale.
    pub fn pack_linears(&self) -> Result<BTreeMap<String, PackedBinaryMatrix>> {
        let mut out = BTreeMap::new();
        for (name, l) in self.linears() {
            if l.mode.is_binary() {
                out.insert(name, crate::binquant::merge_scales(l)?);
            }
        }
        Ok(out)
    }

    /// Divides each layer's weight columnwise by `S_t` and multiplies its input by `S_t`.
    pub fn fold_init_scales(&mut self, scales: &InitScales) -> Result<()> {
        for (name, st) in scales.scales() {
            if let Some(bad) = st.data().iter().find(|&&s| s < 1e-8) {
                return Err(domain_err!("init scale {bad} in {name} is degenerate"));
            }
            let layer = self
                .linear_mut(&name)
                .ok_or_else(|| domain_err!("no layer named {name}"))?;
            if st.numel() != layer.in_features() {
                return Err(Error::Dimension(format!(
                    "{name}: {} scales for {} inputs",
                    st.numel(),
                    layer.in_features()
                )));
            }
            let cols = layer.in_features();
            for row in layer.weight.data_mut().chunks_mut(cols) {
                row.iter_mut().zip(st.data()).for_each(|(w, s)| *w /= s);
            }
            let merged = match &layer.input_scale {
                Some(prev) => prev
                    .data()
                    .iter()
                    .zip(st.data())
                    .map(|(a, b)| a * b)
                    .collect(),
                None => st.data().to_vec(),
            };
            layer.input_scale = Some(Tensor::from_vec(merged));
        }
        Ok(())
    }

    /// Moves each output projection's input scale into the rows of the value
    /// projection feeding it, which the attention mixing passes through
    /// channel by channel. Exact whenever `S_l` does not depend on the row
    /// magnitude, i.e. for every scheme except `Learned`.
    pub fn absorb_output_input_scales(&mut self) {
        for b in &mut self.blocks {
            if let Some(s) = b.o.input_scale.take() {
                let cols = b.v.in_features();
                for (row, &sc) in b.v.weight.data_mut().chunks_mut(cols).zip(s.data()) {
                    row.iter_mut().for_each(|w| *w *= sc);
                }
            }
        }
    }

    pub fn block_linear_params(&self) -> usize {
        self.linears().iter().map(|(_, l)| l.weight.numel()).sum()
    }

    pub fn total_params(&self) -> usize {
        let lin = self.block_linear_params();
        let other = self.tok_emb.numel()
            + self.pos_emb.numel()
            + self.norm_f.numel()
            + self.head.numel()
            + self
                .blocks
                .iter()
                .map(|b| b.norm_attn.numel() + b.norm_mlp.numel())
                .sum::<usize>();
        lin + other
    }
}

/// Stored bits for one block linear under the average-bit convention.
pub fn layer_bits(mode: QuantMode, rows: f64, cols: f64, input_scale: bool) -> f64 {
    if mode.is_binary() {
        rows * cols + 16.0 * rows + if input_scale { 16.0 * cols } else { 0.0 }
    } else {
        16.0 * rows * cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 12,
        }
    }

    fn model(seed: u64) -> TinyLm {
        TinyLm::new(small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn ids(n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..32)).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.d_ff = 8;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn deterministic_full_precision_logits() {
        let a = model(1)
            .forward(&ids(10, 2), ForwardOptions::default())
            .unwrap();
        let b = model(1)
            .forward(&ids(10, 2), ForwardOptions::default())
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10, 32]);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_is_causal() {
        let m = model(3);
        let mut seq = ids(10, 4);
        let before = m.forward(&seq, ForwardOptions::default()).unwrap();
        seq[6] = (seq[6] + 1) % 32;
        let after = m.forward(&seq, ForwardOptions::default()).unwrap();
        for pos in 0..6 {
            assert_eq!(before.row(pos), after.row(pos));
        }
        assert_ne!(before.row(6), after.row(6));
    }

    #[test]
    fn token_out_of_vocab_is_index_error() {
        let m = model(1);
        assert!(matches!(
            m.forward(&[1, 40], ForwardOptions::default()),
            Err(Error::Index(_))
        ));
        assert!(m.forward(&ids(13, 1), ForwardOptions::default()).is_err());
    }

    #[test]
    fn near_linear_progressive_matches_full_precision() {
        let mut m = model(5);
        let seq = ids(10, 6);
        let fp = m.forward(&seq, ForwardOptions::default()).unwrap();
        m.set_quantization(QuantMode::Progressive, ScaleMode::Dual)
            .unwrap();
        let opts = ForwardOptions {
            temperature: 1e-4,
            ..Default::default()
        };
        let pr = m.forward(&seq, opts).unwrap();
        let rel = pr.max_abs_diff(&fp) / fp.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn sign_and_hot_progressive_agree() {
        let mut m = model(7);
        let seq = ids(10, 8);
        // keep every normalized weight away from the soft zone around 0
        for b in &mut m.blocks {
            for n in BLOCK_LINEARS {
                let l = b.linear_mut(n).unwrap();
                for w in l.weight.data_mut() {
                    if w.abs() < 0.004 {
                        *w = 0.004f64.copysign(*w);
                    }
                }
            }
        }
        m.set_quantization(QuantMode::SignSte, ScaleMode::Dual)
            .unwrap();
        let s = m.forward(&seq, ForwardOptions::default()).unwrap();
        m.set_quantization(QuantMode::Progressive, ScaleMode::Dual)
            .unwrap();
        let opts = ForwardOptions {
            temperature: 100.0,
            ..Default::default()
        };
        let p = m.forward(&seq, opts).unwrap();
        assert!(p.max_abs_diff(&s) < 1e-5, "{}", p.max_abs_diff(&s));
    }

    #[test]
    fn loss_examples() {
        let mut m = model(9);
        m.head = Tensor::zeros(m.head.shape());
        let loss = m
            .autoregressive_loss(&ids(8, 1), ForwardOptions::default())
            .unwrap();
        assert!((loss - (32f64).ln()).abs() < 1e-12);
        assert!(m
            .autoregressive_loss(&[3], ForwardOptions::default())
            .is_err());
        let m = model(9);
        let loss = m
            .autoregressive_loss(&ids(8, 1), ForwardOptions::default())
            .unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn embedding_and_head_never_binarized() {
        let mut m = model(1);
        m.set_quantization(QuantMode::SignSte, ScaleMode::Dual)
            .unwrap();
        let names: Vec<String> = m.linears().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 12);
        assert!(names
            .iter()
            .all(|n| !n.contains("emb") && !n.contains("head")));
        assert!(m
            .linears()
            .iter()
            .all(|(_, l)| l.mode == QuantMode::SignSte));
    }

    #[test]
    fn average_bit_accounting() {
        let mut m = model(1);
        assert_eq!(m.average_bit(), 16.0);
        m.set_quantization(QuantMode::Progressive, ScaleMode::Dual)
            .unwrap();
        // per block: q,k,v,o are 16×16, up is 32×16, down is 16×32
        let bits_per_block =
            4.0 * (256.0 + 16.0 * 16.0) + (512.0 + 16.0 * 32.0) + (512.0 + 16.0 * 16.0);
        let params_per_block = 4.0 * 256.0 + 512.0 + 512.0;
        assert!((m.average_bit() - bits_per_block / params_per_block).abs() < 1e-12);
        assert!(
            (layer_bits(QuantMode::SignSte, 1024.0, 1024.0, false) / (1024.0 * 1024.0)
                - (1.0 + 16.0 / 1024.0))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn mixed_average_bit_is_parameter_weighted() {
        let mut m = model(1);
        m.blocks[0]
            .up
            .set_quantization(QuantMode::SignSte, ScaleMode::Dual)
            .unwrap();
        // up: 32×16 binary → 512 + 512 bits; everything else 16 bits per weight
        let total_params = 2.0 * (4.0 * 256.0 + 1024.0);
        let bits = 16.0 * (total_params - 512.0) + 512.0 + 16.0 * 32.0;
        assert!((m.average_bit() - bits / total_params).abs() < 1e-12);
    }

    #[test]
    fn fold_and_absorb_preserve_full_precision_logits() {
        let m = model(11);
        let seq = ids(10, 12);
        let base = m.forward(&seq, ForwardOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut scales = InitScales::ones(&m);
        for name in m.linear_names() {
            let n = m.linear(&name).unwrap().in_features();
            scales.set_log_scale(&name, Tensor::uniform(&[n], -0.7, 0.7, &mut rng));
        }
        let mut folded = m.clone();
        folded.fold_init_scales(&scales).unwrap();
        let out = folded.forward(&seq, ForwardOptions::default()).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-9);

        folded.absorb_output_input_scales();
        assert!(folded.blocks.iter().all(|b| b.o.input_scale.is_none()));
        let out = folded.forward(&seq, ForwardOptions::default()).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-8);

        let mut bad = InitScales::ones(&m);
        bad.set_log_scale("blocks.0.q", Tensor::full(&[16], -30.0));
        assert!(m.clone().fold_init_scales(&bad).is_err());
    }

    #[test]
    fn tensor_names_round_trip() {
        let mut m = model(1);
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            assert!(m.tensor_mut(&n).is_some(), "{n}");
        }
        assert!(m.tensor_mut("blocks.9.q.weight").is_none());
    }
}
