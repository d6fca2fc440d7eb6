use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pgan_core::data::ProtocolKind;
use pgan_core::synth::generate;
use pgan_core::{Metric, Split, Variant};

use pgan::checkpoint;
use pgan::config::ExperimentConfig;
use pgan::embeddings::write_embeddings;
use pgan::manifest::{write_synth, DatasetDir};
use pgan::pipeline::{self, AblationPlan, Corpus};
use pgan::report;
use pgan::runlog::RunManifest;

/// Part-guided attention for instance retrieval.
#[derive(Parser)]
#[command(name = "pgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(Common),
    /// Train a model variant on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export retrieval embeddings of a split.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Export per-image part weights and heatmaps of the test split.
    AttentionReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate every combination of the swept settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, value_delimiter = ',')]
        ds: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    protocol: Option<ProtocolKind>,
    /// Number of part regions.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(m) = self.metric {
            cfg.eval.metric = m;
        }
        if let Some(p) = self.protocol {
            cfg.eval.protocol = p;
        }
        if let Some(d) = self.d {
            cfg.train.parts = d;
            cfg.ablate.parts = vec![d];
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
            cfg.ablate.lambdas = vec![l];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration of a stored checkpoint with the evaluation flags applied.
    fn with_checkpoint(&self, header: &checkpoint::Header) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = self.resolve()?;
        cfg.train = header.train.clone();
        Ok(cfg)
    }
}

fn open_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    let d = DatasetDir::open(dir).with_context(|| format!("opening dataset {}", dir.display()))?;
    for w in &d.warnings {
        log::warn!("{w}");
    }
    Ok(d.into())
}

fn args() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            let mut run = RunManifest::start("generate", args(), &cfg);
            let data = generate(&cfg.synth)?;
            write_synth(&common.out, &data)?;
            log::info!(
                "wrote {} train and {} test images to {}",
                data.train.len(),
                data.test.len(),
                common.out.display()
            );
            run.outputs.push(common.out.clone());
            run.finish(&common.out)?;
        }
        Command::Train { common, data, resume } => {
            let mut cfg = common.resolve()?;
            let corpus = open_corpus(&data)?;
            let resume = match &resume {
                Some(p) => {
                    let mut t = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                    // The stored settings win, except for how far to train.
                    t.cfg.epochs = cfg.train.epochs;
                    cfg.train = t.cfg.clone();
                    Some(t)
                }
                None => None,
            };
            let mut run = RunManifest::start("train", args(), &cfg);
            let ckpt = common.out.join(pipeline::CHECKPOINT);
            let log_path = common.out.join(pipeline::LOSS_LOG);
            let trainer = pipeline::train(&corpus, &cfg.train, resume, |t, _| {
                checkpoint::save(&ckpt, t)?;
                report::write_text(&log_path, &report::loss_log_csv(&t.log))
            })?;
            log::info!("trained {} epochs", trainer.epoch);
            run.outputs.extend([ckpt, log_path]);
            run.finish(&common.out)?;
        }
        Command::Eval { common, checkpoint: ckpt, data } => {
            let (header, _) = checkpoint::read_header(&ckpt)?;
            let cfg = common.with_checkpoint(&header)?;
            let mut run = RunManifest::start("eval", args(), &cfg);
            let corpus = open_corpus(&data)?;
            let mut trainer = checkpoint::load(&ckpt)?;
            let emb = pipeline::embed(&mut trainer.model, &corpus, &corpus.test, cfg.eval.batch)?;
            let report = pipeline::evaluate_embeddings(&corpus.test, &emb, &cfg.eval)?;
            println!(
                "{} {}: mAP {:.4} top1 {:.4} top5 {:.4}",
                report.protocol,
                report.metric,
                report.map,
                report.top(1),
                report.top(5)
            );
            let json = common.out.join(pipeline::METRICS_JSON);
            report::write_json(&json, &report)?;
            let csv = common.out.join(pipeline::METRICS_CSV);
            report::write_text(&csv, &report::metrics_csv(std::slice::from_ref(&report)))?;
            run.outputs.extend([json, csv]);
            run.finish(&common.out)?;
        }
        Command::Embed { common, checkpoint: ckpt, data, split } => {
            let (header, _) = checkpoint::read_header(&ckpt)?;
            let cfg = common.with_checkpoint(&header)?;
            let mut run = RunManifest::start("embed", args(), &cfg);
            let corpus = open_corpus(&data)?;
            let ds = match split {
                Split::Train => &corpus.train,
                Split::Test => &corpus.test,
                other => bail!("embeddings are exported per stored split (train or test), not `{other}`"),
            };
            let mut trainer = checkpoint::load(&ckpt)?;
            let emb = pipeline::embed(&mut trainer.model, &corpus, ds, cfg.eval.batch)?;
            let names: Vec<String> = ds.samples.iter().map(|s| s.name.clone()).collect();
            let path = common.out.join(format!("{split}_embeddings.f32"));
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            write_embeddings(&path, &emb, &split.to_string(), &names, Some(&ckpt))?;
            run.outputs.extend([pgan::embeddings::sidecar_path(&path), path]);
            run.finish(&common.out)?;
        }
        Command::AttentionReport { common, checkpoint: ckpt, data } => {
            let (header, _) = checkpoint::read_header(&ckpt)?;
            let cfg = common.with_checkpoint(&header)?;
            let mut run = RunManifest::start("attention-report", args(), &cfg);
            let corpus = open_corpus(&data)?;
            let mut trainer = checkpoint::load(&ckpt)?;
            let (rows, maps) =
                pipeline::attention_rows(&mut trainer.model, &corpus, &corpus.test, cfg.eval.batch, true)?;
            if rows.first().is_some_and(|r| r.kinds.is_some()) {
                let s = report::summarize_attention(&rows);
                println!("identity {:.4} clutter {:.4} ratio {:.3}", s.identity, s.clutter, s.ratio);
            }
            run.outputs.extend(pipeline::write_attention(&common.out, &corpus.test, &rows, &maps)?);
            run.finish(&common.out)?;
        }
        Command::Ablate { common, data, variants, ds, lambdas, seeds } => {
            let mut cfg = common.resolve()?;
            if let Some(v) = variants {
                cfg.ablate.variants = v;
            }
            if let Some(d) = ds {
                cfg.ablate.parts = d;
            }
            if let Some(l) = lambdas {
                cfg.ablate.lambdas = l;
            }
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            cfg.validate()?;
            let mut run = RunManifest::start("ablate", args(), &cfg);
            let corpus = match &data {
                Some(d) => open_corpus(d)?,
                None => generate(&cfg.synth)?.into(),
            };
            let a = &cfg.ablate;
            let plan = AblationPlan {
                variants: a.variants.clone(),
                parts: a.parts.clone(),
                lambdas: a.lambdas.clone(),
                seeds: a.seeds.clone(),
            };
            let (_, rows) = pipeline::run_ablation(&corpus, &cfg, &plan, Some(&common.out), pipeline::thread_limit())?;
            print!("{}", report::ablation_csv(&rows));
            run.outputs.push(common.out.join(pipeline::ABLATION_CSV));
            run.finish(&common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
