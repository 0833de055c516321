mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bqf_core::checkpoint::Checkpoint;
use bqf_core::data::{synthetic_corpus, Corpus};
use bqf_core::efficiency::{self, ArchSpec, Method};
use bqf_core::scheduler::{Family, Scheduler};
use bqf_core::train::{self, ChunkReport, TrainConfig, TrainMethod, Trainer, Variant};

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(
    name = "bqf",
    version,
    about = "Progressive 1-bit quantization of a byte-level language model"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Continue a run from one of its checkpoints.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic English-like corpus.
    GenCorpus {
        #[arg(long, default_value_t = 2_000_000)]
        bytes: usize,
    },
    /// Train the full-precision model.
    Pretrain,
    /// Search per-channel init scales on a pretrained checkpoint.
    SearchInit {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Chunked 1-bit training from a pretrained checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the quantizer and scale-scheme ablation.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write every binarized layer as a packed matrix.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Memory and cycle estimates.
    Estimate {
        /// Builtin `llama2-7b` or a JSON architecture file.
        #[arg(long, default_value = "llama2-7b")]
        arch: String,
        /// Comma-separated weight bit widths; defaults to the reference rows.
        #[arg(long, value_delimiter = ',')]
        bits: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        tokens: u64,
    },
    /// Temperature of every chunk as CSV.
    DumpSchedule {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        chunks: Option<usize>,
    },
    /// Weight histograms of a checkpoint's block linears.
    DumpHistograms {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// The metric history stored in a checkpoint.
    DumpMetrics {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::SearchInit { .. } => "search-init",
            Command::Train { .. } => "train",
            Command::Ablate { .. } => "ablate",
            Command::Export { .. } => "export",
            Command::Estimate { .. } => "estimate",
            Command::DumpSchedule { .. } => "dump-schedule",
            Command::DumpHistograms { .. } => "dump-histograms",
            Command::DumpMetrics { .. } => "dump-metrics",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg =
        TrainConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?;
    if cfg.corpus.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.corpus = dir.join(&cfg.corpus);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    Ok(Corpus::load(&cfg.corpus)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn write(out: &Path, rel: &str, bytes: impl AsRef<[u8]>, m: &mut Manifest) -> Result<()> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    m.outputs.push(rel.to_string());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut m = Manifest::start(cli.command.name());
    match &cli.command {
        Command::GenCorpus { bytes } => {
            let seed = cli.seed.unwrap_or(0);
            let text = synthetic_corpus(seed, *bytes);
            m.set_corpus(&text);
            m.extra("seed", seed);
            write(&cli.out, "corpus.txt", text, &mut m)?;
        }
        Command::Pretrain => {
            let trainer = match &cli.resume {
                Some(p) => resume(p, cli.seed)?,
                None => {
                    let cfg = load_config(cli)?;
                    let corpus = load_corpus(&cfg)?;
                    let mut cfg = cfg;
                    cfg.method = TrainMethod::FpPretrain;
                    let model = bqf_core::model::TinyLm::new(
                        cfg.model_config(),
                        &mut train::model_rng(cfg.seed),
                    )?;
                    Trainer::new(model, cfg, &corpus, "pretrain")?
                }
            };
            drive(trainer, &cli.out, "pretrain.bqf", &mut m)?;
        }
        Command::SearchInit { checkpoint } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus(&cfg)?;
            m.set_config(&cfg);
            m.set_corpus(corpus.bytes());
            let mut ck = load_checkpoint(checkpoint)?;
            let out = train::search_init_scales(&ck, &cfg, &corpus)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.step_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            m.extra("initial_objective", out.initial_objective);
            m.extra("final_objective", out.final_objective);
            println!(
                "search objective {:.6} -> {:.6} over {} steps",
                out.initial_objective,
                out.final_objective,
                out.step_losses.len()
            );
            ck.init_scales = Some(out.scales);
            write(&cli.out, "search_losses.csv", csv, &mut m)?;
            write(&cli.out, "init.bqf", ck.to_bytes()?, &mut m)?;
        }
        Command::Train { checkpoint } => {
            let trainer = match (&cli.resume, checkpoint) {
                (Some(p), _) => resume(p, cli.seed)?,
                (None, Some(p)) => {
                    let cfg = load_config(cli)?;
                    let corpus = load_corpus(&cfg)?;
                    if cfg.method == TrainMethod::FpPretrain {
                        bail!("config error: train needs a 1-bit method, got fp_pretrain");
                    }
                    let ck = load_checkpoint(p)?;
                    let model = train::prepare_stage2(&ck, &cfg)?;
                    let mut tr = Trainer::new(model, cfg.clone(), &corpus, "stage2")?;
                    if cfg.use_init_scales {
                        tr.init_scales = ck.init_scales.clone();
                    }
                    tr
                }
                (None, None) => bail!("train needs --checkpoint or --resume"),
            };
            drive(trainer, &cli.out, "stage2.bqf", &mut m)?;
        }
        Command::Ablate { checkpoint } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus(&cfg)?;
            m.set_config(&cfg);
            m.set_corpus(corpus.bytes());
            let mut ck = load_checkpoint(checkpoint)?;
            if ck.init_scales.is_none() {
                log::info!("checkpoint has no init scales; searching them first");
                ck.init_scales = Some(train::search_init_scales(&ck, &cfg, &corpus)?.scales);
            }
            let rows = train::run_ablation(&ck, &cfg, &corpus, &Variant::default_matrix())?;
            let csv = train::ablation_to_csv(&rows);
            print!("{csv}");
            write(&cli.out, "ablation.csv", csv, &mut m)?;
            write(
                &cli.out,
                "ablation.json",
                serde_json::to_string_pretty(&rows)?,
                &mut m,
            )?;
        }
        Command::Export { checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            let packed = ck.model.pack_linears()?;
            if packed.is_empty() {
                bail!("checkpoint has no binarized layers to export");
            }
            let mut layers = Vec::new();
            for (name, p) in &packed {
                let rel = format!("layers/{name}.bpm");
                let bytes = p.to_bytes();
                layers.push(serde_json::json!({
                    "name": name,
                    "file": rel,
                    "rows": p.rows(),
                    "cols": p.cols(),
                    "bytes": bytes.len(),
                    "sha256": manifest::sha256_hex(&bytes),
                    "input_scale": ck.model.linear(name).and_then(|l| l.input_scale.as_ref()).map(|s| s.data().to_vec()),
                }));
                write(&cli.out, &rel, bytes, &mut m)?;
            }
            let export = serde_json::json!({
                "format": "BPM1",
                "average_bit": ck.model.average_bit(),
                "layers": layers,
            });
            write(
                &cli.out,
                "export.json",
                serde_json::to_string_pretty(&export)?,
                &mut m,
            )?;
        }
        Command::Estimate { arch, bits, tokens } => {
            let target = if arch == "llama2-7b" {
                ArchSpec::llama2_7b()
            } else {
                let text = fs::read_to_string(arch).with_context(|| format!("reading {arch}"))?;
                serde_json::from_str::<ArchSpec>(&text).with_context(|| format!("arch {arch}"))?
            }
            .with_tokens(*tokens);
            let methods = if bits.is_empty() {
                Method::reference_rows()
            } else {
                bits.iter()
                    .map(|b| Method::new(&format!("w{b}a16"), *b))
                    .collect()
            };
            let rows = methods
                .iter()
                .map(|me| efficiency::report(&target, me))
                .collect::<bqf_core::Result<Vec<_>>>()?;
            let table = efficiency::render_table(&rows);
            print!("{table}");
            m.extra("arch", serde_json::to_value(&target)?);
            write(
                &cli.out,
                "estimate.json",
                serde_json::to_string_pretty(&rows)?,
                &mut m,
            )?;
            write(&cli.out, "estimate.txt", table, &mut m)?;
        }
        Command::DumpSchedule { family, chunks } => {
            let (fam, n, t_min, t_max) = match &cli.config {
                Some(_) => {
                    let cfg = load_config(cli)?;
                    (cfg.scheduler, cfg.chunks, cfg.t_min, cfg.t_max)
                }
                None => {
                    let d = TrainConfig::with_corpus("");
                    (d.scheduler, d.chunks, d.t_min, d.t_max)
                }
            };
            let sched =
                Scheduler::with_bounds(family.unwrap_or(fam), chunks.unwrap_or(n), t_min, t_max)?;
            m.extra("scheduler", serde_json::to_value(sched)?);
            write(&cli.out, "schedule.csv", sched.to_csv(), &mut m)?;
        }
        Command::DumpHistograms { checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            let layers = ck
                .header
                .train
                .as_ref()
                .map(|t| t.monitor_layers.clone())
                .unwrap_or_default();
            for (name, h) in train::layer_histograms(&ck.model, &layers)? {
                write(
                    &cli.out,
                    &format!("histograms/{name}.csv"),
                    h.to_csv(),
                    &mut m,
                )?;
            }
        }
        Command::DumpMetrics { checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            train::metrics_from_csv(&ck.metrics_csv)?;
            write(&cli.out, "metrics.csv", &ck.metrics_csv, &mut m)?;
        }
    }
    m.finish(&cli.out)
}

fn resume(path: &Path, seed: Option<u64>) -> Result<Trainer> {
    let ck = load_checkpoint(path)?;
    let cfg = ck
        .header
        .train
        .as_ref()
        .context("format error: checkpoint carries no training state to resume")?;
    if seed.is_some_and(|s| s != cfg.seed) {
        bail!("config error: --seed differs from the seed of the resumed run");
    }
    let corpus = load_corpus(cfg)?;
    Ok(Trainer::resume(ck, &corpus)?)
}

fn write_histograms(out: &Path, report: &ChunkReport, m: &mut Manifest) -> Result<()> {
    for (name, h) in &report.histograms {
        let rel = format!("histograms/{name}/chunk_{:02}.csv", report.chunk);
        write(out, &rel, h.to_csv(), m)?;
    }
    Ok(())
}

/// Runs the remaining chunks, checkpointing after each one.
fn drive(mut tr: Trainer, out: &Path, ck_name: &str, m: &mut Manifest) -> Result<()> {
    let corpus = Corpus::load(&tr.config.corpus)?;
    m.set_config(&tr.config);
    m.set_corpus(corpus.bytes());
    let ck_path = out.join(ck_name);
    let mut fractions = Vec::new();
    while !tr.is_done() {
        let report = tr.run_chunk()?;
        if tr.config.method != TrainMethod::FpPretrain {
            write_histograms(out, &report, m)?;
        }
        fractions.push(report.near_unit_fraction());
        tr.checkpoint()
            .save(&ck_path)
            .with_context(|| format!("writing {}", ck_path.display()))?;
        log::info!("chunk {} done, t = {}", report.chunk, report.t);
    }
    tr.checkpoint()
        .save(&ck_path)
        .with_context(|| format!("writing {}", ck_path.display()))?;
    m.outputs.push(ck_name.to_string());
    write(out, "metrics.csv", tr.metrics_csv(), m)?;
    if let Some(last) = tr.metrics.last() {
        println!(
            "step {} train_loss {:.6} heldout_ppl {:.6}",
            last.step, last.train_loss, last.heldout_ppl
        );
        m.extra("final_train_loss", last.train_loss);
        m.extra("final_heldout_ppl", last.heldout_ppl);
    }
    if tr.config.method != TrainMethod::FpPretrain {
        m.extra("near_unit_fraction_per_chunk", fractions);
    }
    Ok(())
}
