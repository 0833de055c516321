//! Full-precision pretraining, chunked progressive training and the ablation runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binquant::{guarded_row_scales, QuantMode, ScaleMode};
use crate::checkpoint::{Checkpoint, CheckpointHeader, RngState};
use crate::data::{chunk_ranges, sample_windows, sequential_windows, Corpus};
use crate::error::{Error, Result};
use crate::init_search::{search_init, InitScales, SearchOutcome};
use crate::model::{ForwardOptions, ModelConfig, TinyLm, Trainable};
use crate::optim::{AdamW, CosineSchedule};
use crate::scheduler::{Family, Scheduler, DEFAULT_T_MAX, DEFAULT_T_MIN};

/// Training recipe selected by [`TrainConfig::method`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    FpPretrain,
    Vanilla1bit,
    IrnetStyle,
    #[default]
    ProgressiveFull,
}

impl TrainMethod {
    pub fn quant_mode(self) -> QuantMode {
        match self {
            TrainMethod::FpPretrain => QuantMode::FullPrecision,
            TrainMethod::Vanilla1bit => QuantMode::SignSte,
            TrainMethod::IrnetStyle => QuantMode::SignProgressiveGrad,
            TrainMethod::ProgressiveFull => QuantMode::Progressive,
        }
    }
}

mod defaults {
    use super::*;

    pub fn chunks() -> usize {
        20
    }
    pub fn steps_per_chunk() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn seq_len() -> usize {
        256
    }
    pub fn lr_start() -> f64 {
        1e-4
    }
    pub fn lr_end() -> f64 {
        2e-6
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn t_min() -> f64 {
        DEFAULT_T_MIN
    }
    pub fn t_max() -> f64 {
        DEFAULT_T_MAX
    }
    pub fn heldout_fraction() -> f64 {
        0.05
    }
    pub fn eval_windows() -> usize {
        32
    }
    pub fn log_every() -> usize {
        10
    }
    pub fn init_search_steps() -> usize {
        50
    }
    pub fn init_search_batches() -> usize {
        4
    }
    pub fn init_search_lr() -> f64 {
        crate::init_search::SEARCH_LR
    }
    pub fn yes() -> bool {
        true
    }
    pub fn vocab_size() -> usize {
        ModelConfig::default().vocab_size
    }
    pub fn d_model() -> usize {
        ModelConfig::default().d_model
    }
    pub fn n_layers() -> usize {
        ModelConfig::default().n_layers
    }
    pub fn n_heads() -> usize {
        ModelConfig::default().n_heads
    }
    pub fn d_ff() -> usize {
        ModelConfig::default().d_ff
    }
    pub fn max_seq_len() -> usize {
        ModelConfig::default().max_seq_len
    }
}

/// Flat run configuration. Only `corpus` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub method: TrainMethod,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    #[serde(default = "defaults::chunks")]
    pub chunks: usize,
    #[serde(default = "defaults::steps_per_chunk")]
    pub steps_per_chunk: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    #[serde(default = "defaults::lr_start")]
    pub lr_start: f64,
    #[serde(default = "defaults::lr_end")]
    pub lr_end: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub scheduler: Family,
    #[serde(default = "defaults::t_min")]
    pub t_min: f64,
    #[serde(default = "defaults::t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::heldout_fraction")]
    pub heldout_fraction: f64,
    /// Held-out windows of `seq_len + 1` bytes used for perplexity.
    #[serde(default = "defaults::eval_windows")]
    pub eval_windows: usize,
    /// Metric rows are written every `log_every` steps and at the end of every chunk.
    #[serde(default = "defaults::log_every")]
    pub log_every: usize,
    #[serde(default = "defaults::init_search_steps")]
    pub init_search_steps: usize,
    #[serde(default = "defaults::init_search_batches")]
    pub init_search_batches: usize,
    #[serde(default = "defaults::init_search_lr")]
    pub init_search_lr: f64,
    /// Fold searched init scales (when the input checkpoint has them) before stage 2.
    #[serde(default = "defaults::yes")]
    pub use_init_scales: bool,
    /// Layers whose weight histograms are recorded; empty means every block linear.
    #[serde(default)]
    pub monitor_layers: Vec<String>,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
}

impl TrainConfig {
    /// All defaults around the given corpus path.
    pub fn with_corpus(corpus: impl Into<PathBuf>) -> Self {
        let json = serde_json::json!({ "corpus": corpus.into() });
        serde_json::from_value(json).expect("defaults are valid")
    }

    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn scheduler(&self) -> Result<Scheduler> {
        Scheduler::with_bounds(self.scheduler, self.chunks, self.t_min, self.t_max)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn total_steps(&self) -> u64 {
        (self.chunks * self.steps_per_chunk) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.chunks < 1 {
            return cfg("chunks must be at least 1".into());
        }
        if self.steps_per_chunk < 1 || self.batch_size < 1 || self.seq_len < 1 {
            return cfg("steps_per_chunk, batch_size and seq_len must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return cfg(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(self.t_min > 0.0) {
            return cfg(format!("t_min must be positive, got {}", self.t_min));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return cfg(format!(
                "heldout_fraction {} outside (0, 1)",
                self.heldout_fraction
            ));
        }
        if self.weight_decay < 0.0 || self.eval_windows < 1 {
            return cfg("weight_decay must be >= 0 and eval_windows >= 1".into());
        }
        let m = self.model_config();
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seq_len > m.max_seq_len {
            return cfg(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, m.max_seq_len
            ));
        }
        if m.vocab_size < 256 {
            return cfg("byte-level corpora need vocab_size >= 256".into());
        }
        self.scheduler()?;
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub chunk: usize,
    pub t: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_ppl: f64,
}

pub const METRICS_HEADER: &str = "step,chunk,t,lr,train_loss,heldout_ppl";

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.chunk, r.t, r.lr, r.train_loss, r.heldout_ppl
        ));
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h == METRICS_HEADER => {}
        Some(h) => return Err(Error::Format(format!("unexpected metrics header `{h}`"))),
    }
    let bad = |l: &str| Error::Format(format!("bad metrics row `{l}`"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                chunk: f[1].parse().map_err(|_| bad(l))?,
                t: num(2)?,
                lr: num(3)?,
                train_loss: num(4)?,
                heldout_ppl: num(5)?,
            })
        })
        .collect()
}

pub const HIST_BINS: usize = 101;
pub const HIST_RANGE: f64 = 2.0;

/// 101-bin histogram of `W/S_a` over `[−2, 2]`; values outside land in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    /// Share of entries with `|W/S_a| ∈ [0.8, 1.2]`.
    pub near_unit: f64,
    pub total: u64,
}

impl Histogram {
    pub fn of_layer(weight: &crate::tensor::Tensor, name: &str) -> Result<Self> {
        let sa = guarded_row_scales(weight, name)?;
        let cols = weight.cols();
        let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
        let mut counts = vec![0u64; HIST_BINS];
        let mut near = 0u64;
        for (row, s) in weight.data().chunks(cols).zip(&sa) {
            for &w in row {
                let x = w / s;
                let bin = ((x + HIST_RANGE) / width)
                    .floor()
                    .clamp(0.0, (HIST_BINS - 1) as f64);
                counts[bin as usize] += 1;
                if (0.8..=1.2).contains(&x.abs()) {
                    near += 1;
                }
            }
        }
        let total = weight.numel() as u64;
        Ok(Self {
            counts,
            near_unit: near as f64 / total as f64,
            total,
        })
    }

    pub fn to_csv(&self) -> String {
        let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
        let mut s = String::from("bin,left,right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let left = -HIST_RANGE + i as f64 * width;
            s.push_str(&format!("{i},{left},{},{c}\n", left + width));
        }
        s
    }
}

/// Histograms of the monitored layers at the end of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkReport {
    pub chunk: usize,
    pub t: f64,
    pub histograms: BTreeMap<String, Histogram>,
}

impl ChunkReport {
    /// Pooled near-unit share over every monitored entry.
    pub fn near_unit_fraction(&self) -> f64 {
        let (near, total) = self.histograms.values().fold((0.0, 0.0), |(n, t), h| {
            (n + h.near_unit * h.total as f64, t + h.total as f64)
        });
        near / total
    }
}

pub fn layer_histograms(model: &TinyLm, layers: &[String]) -> Result<BTreeMap<String, Histogram>> {
    let names = if layers.is_empty() {
        model.linear_names()
    } else {
        layers.to_vec()
    };
    names
        .into_iter()
        .map(|n| {
            let l = model
                .linear(&n)
                .ok_or_else(|| Error::Config(format!("unknown monitored layer `{n}`")))?;
            let h = Histogram::of_layer(&l.weight, &n)?;
            Ok((n, h))
        })
        .collect()
}

/// Byte perplexity over up to `windows` consecutive held-out windows.
pub fn heldout_perplexity(
    model: &TinyLm,
    heldout: &[u8],
    seq: usize,
    windows: usize,
    batch: usize,
    opts: ForwardOptions<'_>,
) -> Result<f64> {
    let wins = sequential_windows(heldout, seq, windows);
    if wins.is_empty() {
        return Err(Error::Data(format!(
            "held-out split of {} bytes holds no window of {}",
            heldout.len(),
            seq + 1
        )));
    }
    let mut total = 0.0;
    for group in wins.chunks(batch.max(1)) {
        let flat: Vec<usize> = group.concat();
        let (fp, loss) = model.loss_pass(&flat, group.len(), seq, opts)?;
        total += fp.graph.value(loss).data()[0] * group.len() as f64;
    }
    Ok((total / wins.len() as f64).exp())
}

/// A resumable training run over one corpus.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TinyLm,
    pub optimizer: AdamW,
    pub init_scales: Option<InitScales>,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
    stage: String,
    rng: ChaCha8Rng,
    scheduler: Scheduler,
    cosine: CosineSchedule,
    train: Vec<u8>,
    heldout: Vec<u8>,
}

impl Trainer {
    pub fn new(model: TinyLm, config: TrainConfig, corpus: &Corpus, stage: &str) -> Result<Self> {
        config.validate()?;
        if model.config != config.model_config() {
            return Err(Error::Config(format!(
                "model dimensions {:?} differ from config {:?}",
                model.config,
                config.model_config()
            )));
        }
        let (train, heldout) = corpus.split(config.heldout_fraction)?;
        let min_chunk = train.len() / config.chunks;
        if min_chunk < config.seq_len + 1 || heldout.len() < config.seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus of {} bytes too small for {} chunks and windows of {}",
                corpus.len(),
                config.chunks,
                config.seq_len + 1
            )));
        }
        Ok(Self {
            optimizer: AdamW::new(config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scheduler: config.scheduler()?,
            cosine: CosineSchedule {
                start: config.lr_start,
                end: config.lr_end,
                total: config.total_steps(),
            },
            train: train.to_vec(),
            heldout: heldout.to_vec(),
            init_scales: None,
            step: 0,
            metrics: Vec::new(),
            stage: stage.into(),
            model,
            config,
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, corpus: &Corpus) -> Result<Self> {
        let config = ck
            .header
            .train
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no training config".into()))?;
        let mut tr = Self::new(ck.model, config, corpus, &ck.header.stage)?;
        tr.step = ck.step;
        tr.init_scales = ck.init_scales;
        if let Some(opt) = ck.optimizer {
            tr.optimizer = opt;
        }
        if let Some(rng) = ck.rng {
            tr.rng = rng.restore();
        }
        tr.metrics = metrics_from_csv(&ck.metrics_csv)?;
        Ok(tr)
    }

    pub fn heldout(&self) -> &[u8] {
        &self.heldout
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    pub fn current_chunk(&self) -> usize {
        (self.step / self.config.steps_per_chunk as u64) as usize
    }

    /// Temperature held fixed during `chunk`.
    pub fn temperature(&self, chunk: usize) -> Result<f64> {
        self.scheduler.temperature(chunk)
    }

    fn forward_options(&self, t: f64, trainable: Trainable) -> ForwardOptions<'static> {
        ForwardOptions {
            trainable,
            temperature: t,
            ..Default::default()
        }
    }

    /// Held-out perplexity with the in-training forward at temperature `t`.
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        heldout_perplexity(
            &self.model,
            &self.heldout,
            self.config.seq_len,
            self.config.eval_windows,
            self.config.batch_size,
            self.forward_options(t, Trainable::Nothing),
        )
    }

    /// Runs one optimizer step and returns its training loss.
    pub fn step_once(&mut self) -> Result<f64> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        let cfg = &self.config;
        let chunk = self.current_chunk();
        let t = self.temperature(chunk)?;
        let lr = self.cosine.lr(self.step);
        let range = chunk_ranges(self.train.len(), cfg.chunks)[chunk].clone();
        let windows = sample_windows(
            &self.train[range],
            cfg.batch_size,
            cfg.seq_len,
            &mut self.rng,
        )?;
        let (mut fp, loss) = self.model.loss_pass(
            &windows,
            cfg.batch_size,
            cfg.seq_len,
            self.forward_options(t, Trainable::Model),
        )?;
        let train_loss = fp.graph.value(loss).data()[0];
        if !train_loss.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite training loss at step {}",
                self.step
            )));
        }
        fp.graph.backward(loss)?;
        self.optimizer.begin_step();
        for (name, var) in &fp.trainable {
            let grad = fp
                .graph
                .grad(*var)
                .ok_or_else(|| Error::Graph(format!("{name} received no gradient")))?;
            let param = self
                .model
                .tensor_mut(name)
                .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?;
            let decay = param.ndim() == 2;
            self.optimizer
                .update(name, param.data_mut(), grad, lr, decay)?;
        }
        let log_every = self.config.log_every as u64;
        let chunk_end = (self.step + 1) % self.config.steps_per_chunk as u64 == 0;
        if self.step == 0 || chunk_end || (log_every > 0 && self.step % log_every == 0) {
            let heldout_ppl = self.evaluate(t)?;
            log::info!(
                "step {} chunk {chunk} t {t:.4} lr {lr:.3e} loss {train_loss:.4} ppl {heldout_ppl:.3}",
                self.step
            );
            self.metrics.push(MetricRow {
                step: self.step,
                chunk,
                t,
                lr,
                train_loss,
                heldout_ppl,
            });
        }
        self.step += 1;
        Ok(train_loss)
    }

    /// Finishes the current chunk and reports the monitored histograms.
    pub fn run_chunk(&mut self) -> Result<ChunkReport> {
        let chunk = self.current_chunk();
        while !self.is_done() && self.current_chunk() == chunk {
            self.step_once()?;
        }
        Ok(ChunkReport {
            chunk,
            t: self.temperature(chunk)?,
            histograms: layer_histograms(&self.model, &self.config.monitor_layers)?,
        })
    }

    pub fn run(&mut self) -> Result<Vec<ChunkReport>> {
        let mut reports = Vec::new();
        while !self.is_done() {
            reports.push(self.run_chunk()?);
        }
        Ok(reports)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_to_csv(&self.metrics)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let first = self
            .model
            .linears()
            .first()
            .map(|(_, l)| (l.mode, l.scale_mode));
        let (quant_mode, scale_mode) = first.unwrap_or_default();
        Checkpoint {
            header: CheckpointHeader {
                model: self.model.config,
                quant_mode,
                scale_mode,
                stage: self.stage.clone(),
                train: Some(self.config.clone()),
            },
            model: self.model.clone(),
            init_scales: self.init_scales.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            metrics_csv: self.metrics_csv(),
        }
    }
}

/// Trained checkpoint plus the per-chunk histograms of the run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<ChunkReport>,
}

impl TrainOutcome {
    pub fn metrics(&self) -> Result<Vec<MetricRow>> {
        metrics_from_csv(&self.checkpoint.metrics_csv)
    }
}

/// Generator used for model initialization, independent of the data stream.
pub fn model_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains a full-precision model from scratch.
pub fn pretrain_fp(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.method = TrainMethod::FpPretrain;
    let model = TinyLm::new(cfg.model_config(), &mut model_rng(cfg.seed))?;
    let mut tr = Trainer::new(model, cfg, corpus, "pretrain")?;
    let reports = tr.run()?;
    Ok(TrainOutcome {
        checkpoint: tr.checkpoint(),
        reports,
    })
}

/// Searches init scales on `init_search_batches` training batches of the model in `ck`.
pub fn search_init_scales(
    ck: &Checkpoint,
    config: &TrainConfig,
    corpus: &Corpus,
) -> Result<SearchOutcome> {
    config.validate()?;
    let (train, _) = corpus.split(config.heldout_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let batches = (0..config.init_search_batches.max(1))
        .map(|_| sample_windows(train, config.batch_size, config.seq_len, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    search_init(
        &ck.model,
        &batches,
        config.batch_size,
        config.seq_len,
        config.init_search_steps,
        config.init_search_lr,
    )
}

/// The stage-2 starting point: the checkpoint's model with init scales folded
/// (when present and enabled) and every block linear switched to `config.method`.
pub fn prepare_stage2(ck: &Checkpoint, config: &TrainConfig) -> Result<TinyLm> {
    let mut model = ck.model.clone();
    if config.use_init_scales {
        if let Some(scales) = &ck.init_scales {
            model.fold_init_scales(scales)?;
        }
    }
    model.set_quantization(config.method.quant_mode(), config.scale_mode)?;
    Ok(model)
}

/// Chunked quantization-aware training from a pretrained checkpoint.
pub fn train_stage2(
    ck: &Checkpoint,
    config: &TrainConfig,
    corpus: &Corpus,
) -> Result<TrainOutcome> {
    if config.method == TrainMethod::FpPretrain {
        return Err(Error::Config("stage 2 needs a 1-bit method".into()));
    }
    let model = prepare_stage2(ck, config)?;
    let mut tr = Trainer::new(model, config.clone(), corpus, "stage2")?;
    if config.use_init_scales {
        tr.init_scales = ck.init_scales.clone();
    }
    let reports = tr.run()?;
    Ok(TrainOutcome {
        checkpoint: tr.checkpoint(),
        reports,
    })
}

/// Held-out perplexity of the exported model: every binarized layer runs packed.
pub fn packed_perplexity(model: &TinyLm, config: &TrainConfig, corpus: &Corpus) -> Result<f64> {
    let packed = model.pack_linears()?;
    let (_, heldout) = corpus.split(config.heldout_fraction)?;
    heldout_perplexity(
        model,
        heldout,
        config.seq_len,
        config.eval_windows,
        config.batch_size,
        ForwardOptions {
            packed: Some(&packed),
            ..Default::default()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub method: TrainMethod,
    pub scale_mode: ScaleMode,
    pub use_init_scales: bool,
}

impl Variant {
    pub fn new(
        name: &str,
        method: TrainMethod,
        scale_mode: ScaleMode,
        use_init_scales: bool,
    ) -> Self {
        Self {
            name: name.into(),
            method,
            scale_mode,
            use_init_scales,
        }
    }

    /// Quantizer ablation from the plain pretrained weights, then the full
    /// method with each scale scheme on folded init scales.
    pub fn default_matrix() -> Vec<Variant> {
        use ScaleMode::*;
        use TrainMethod::*;
        vec![
            Variant::new("vanilla", Vanilla1bit, Dual, false),
            Variant::new("irnet", IrnetStyle, Dual, false),
            Variant::new("progressive", ProgressiveFull, Dual, false),
            Variant::new("progressive_init", ProgressiveFull, Dual, true),
            Variant::new("progressive_init_sa", ProgressiveFull, Analytic, true),
            Variant::new("progressive_init_sl", ProgressiveFull, Learned, true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Training loss of the first step.
    pub initial_loss: f64,
    pub final_train_loss: f64,
    /// Held-out perplexity with the training forward at the last temperature.
    pub final_training_ppl: f64,
    /// Held-out perplexity of the packed 1-bit export.
    pub final_ppl: f64,
}

pub const ABLATION_HEADER: &str =
    "variant,method,scale_mode,use_init_scales,initial_loss,final_train_loss,final_training_ppl,final_ppl";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let v = &r.variant;
        let enum_name = |x: String| x.trim_matches('"').to_string();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            v.name,
            enum_name(serde_json::to_string(&v.method).unwrap()),
            enum_name(serde_json::to_string(&v.scale_mode).unwrap()),
            v.use_init_scales,
            r.initial_loss,
            r.final_train_loss,
            r.final_training_ppl,
            r.final_ppl
        ));
    }
    s
}

/// Trains one variant from `ck` and measures it.
pub fn run_variant(
    ck: &Checkpoint,
    base: &TrainConfig,
    corpus: &Corpus,
    variant: &Variant,
) -> Result<(AblationRow, TrainOutcome)> {
    let mut cfg = base.clone();
    cfg.method = variant.method;
    cfg.scale_mode = variant.scale_mode;
    cfg.use_init_scales = variant.use_init_scales;
    let out = train_stage2(ck, &cfg, corpus)?;
    let metrics = out.metrics()?;
    let first = metrics
        .first()
        .ok_or_else(|| Error::Data("no metrics".into()))?;
    let last = metrics.last().unwrap();
    let row = AblationRow {
        variant: variant.clone(),
        initial_loss: first.train_loss,
        final_train_loss: last.train_loss,
        final_training_ppl: last.heldout_ppl,
        final_ppl: packed_perplexity(&out.checkpoint.model, &cfg, corpus)?,
    };
    log::info!("ablation {}: ppl {:.4}", variant.name, row.final_ppl);
    Ok((row, out))
}

/// Runs every variant from the same checkpoint, corpus and seed.
pub fn run_ablation(
    ck: &Checkpoint,
    base: &TrainConfig,
    corpus: &Corpus,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| run_variant(ck, base, corpus, v).map(|(row, _)| row))
        .collect()
}
