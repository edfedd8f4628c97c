use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use genrec::config::{Overrides, RunConfig, StageName};
use genrec::decoder::{beam_search, benchmark_decode, CodeTrie};
use genrec::evaluation::{evaluate, sweep_beam};
use genrec::model::{load_checkpoint, ModelParams};
use genrec::pipeline::{self, prepare, Prepared};
use genrec::theory::{verify_lower_bound, verify_weight_program};
use genrec::trainer::{train, LossMode};

const WORKERS_ENV: &str = "GENREC_WORKERS";

#[derive(Parser)]
#[command(name = "genrec", version, about = "Generative recommendation with prefix-aware training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Ce,
    ApaoPointwise,
    ApaoPairwise,
}

impl From<ModeArg> for LossMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ce => LossMode::Ce,
            ModeArg::ApaoPointwise => LossMode::ApaoPointwise,
            ModeArg::ApaoPairwise => LossMode::ApaoPairwise,
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let ov = Overrides { mode: self.mode.map(Into::into), seed: self.seed, beta: self.beta, eta: self.eta };
        Ok(RunConfig::load(&self.config, &ov)?)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit codebooks and write item codes into a new run directory
    Tokenize(ConfigArgs),
    /// Filter and split interactions into a new run directory
    Split(ConfigArgs),
    /// Tokenize, split and train; writes checkpoint and metrics stream
    Train(ConfigArgs),
    /// Test-split metrics for a checkpoint
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        cutoffs: Vec<usize>,
        /// defaults to `eval-k<K>` next to the checkpoint
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam-decode histories given as `user_id<TAB>item item ...`
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        input: PathBuf,
    },
    /// Retention of the full-sort top items under beam search, as CSV
    Audit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        k_global: usize,
        #[arg(long, default_value_t = 20)]
        k_beam: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Beam search vs full sort latency
    Benchmark {
        /// use this config's catalog and checkpoint instead of a synthetic one
        #[arg(long, requires = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        items: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 32)]
        codebook_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Test metrics across beam sizes
    SweepBeam {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Validation-selected beta/eta over the configured grid
    Sweep(ConfigArgs),
    /// Numerical checks of the weight update and the ranking lower bound
    VerifyTheory {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Full pipeline into a new run directory
    Run(ConfigArgs),
}

fn load_model(args: &ModelArgs) -> anyhow::Result<(RunConfig, Prepared, ModelParams)> {
    let cfg = args.cfg.load()?;
    let prep = prepare(&cfg)?;
    let (params, digest) = load_checkpoint(&args.checkpoint)?;
    if digest != cfg.digest_bytes() {
        eprintln!("warning: {} was written under a different config", args.checkpoint.display());
    }
    if params.depth() != prep.tokenized.catalog.depth() || params.num_items != prep.source.embeddings.rows() {
        bail!("checkpoint shape does not match the configured catalog");
    }
    Ok((cfg, prep, params))
}

fn staged_run(args: &ConfigArgs, stages: &[StageName]) -> anyhow::Result<()> {
    let mut cfg = args.load()?;
    cfg.run.stages = stages.to_vec();
    let summary = pipeline::run_experiment(&cfg)?;
    println!("{}", summary.dir.display());
    Ok(())
}

fn read_histories(path: &Path) -> anyhow::Result<Vec<(String, Vec<u32>)>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (user, items) = line.split_once('\t').unwrap_or((line, ""));
        let items = items
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<u32>, _>>()
            .with_context(|| format!("{}:{}: bad item id", path.display(), i + 1))?;
        out.push((user.trim().to_string(), items));
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use StageName::*;
    match cli.command {
        Command::Tokenize(a) => staged_run(&a, &[Tokenize]),
        Command::Split(a) => staged_run(&a, &[Split]),
        Command::Train(a) => staged_run(&a, &[Tokenize, Split, Train]),
        Command::Run(a) => {
            let cfg = a.load()?;
            let s = pipeline::run_experiment(&cfg)?;
            println!("{}", s.dir.display());
            Ok(())
        }
        Command::Evaluate { model, k, cutoffs, out } => {
            let (cfg, prep, params) = load_model(&model)?;
            let mut report = evaluate(&params, &prep.dataset, &prep.tokenized.catalog, &prep.trie, k, &cutoffs)?;
            report.config_digest = cfg.digest();
            let out = out.unwrap_or_else(|| {
                model.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval-k{k}"))
            });
            pipeline::write_evaluation(&out, &report)?;
            print!("{}", std::fs::read_to_string(out.join("metrics.json"))?);
            Ok(())
        }
        Command::Decode { model, k, input } => {
            let (_, prep, params) = load_model(&model)?;
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            for (user, history) in read_histories(&input)? {
                let res = beam_search(&params, &history, k, &prep.trie).with_context(|| format!("user {user}"))?;
                for (r, s) in res.items.iter().enumerate() {
                    writeln!(w, "{user}\t{}\t{}\t{}", r + 1, s.item, s.score)?;
                }
            }
            w.flush()?;
            Ok(())
        }
        Command::Audit { model, k_global, k_beam, limit } => {
            let (mut cfg, prep, params) = load_model(&model)?;
            cfg.decoder.audit_k_global = k_global;
            cfg.decoder.audit_k_beam = k_beam;
            cfg.decoder.audit_limit = limit.or(cfg.decoder.audit_limit);
            let report = pipeline::audit_stage(&cfg, &params, &prep.dataset, &prep.tokenized.catalog, &prep.trie)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Benchmark { config, checkpoint, items, dim, levels, codebook_size, k_list, queries, seed } => {
            let (params, catalog) = match (config, checkpoint) {
                (Some(config), Some(checkpoint)) => {
                    let args = ModelArgs {
                        cfg: ConfigArgs { config, mode: None, seed: None, beta: None, eta: None },
                        checkpoint,
                    };
                    let (_, prep, params) = load_model(&args)?;
                    (params, prep.tokenized.catalog)
                }
                (None, _) => pipeline::benchmark_setup(items, dim, levels, codebook_size, seed)?,
                (Some(_), None) => bail!("--config needs --checkpoint"),
            };
            let trie = CodeTrie::from_catalog(&catalog)?;
            let n = catalog.num_items() as u64;
            let histories: Vec<Vec<u32>> = (0..queries as u64)
                .map(|q| (0..5).map(|j| ((q * 7919 + j * 104_729 + seed) % n) as u32).collect())
                .collect();
            let rows = benchmark_decode(&params, &histories, &k_list, &catalog, &trie)?;
            println!("method,k,median_ms,speedup");
            for r in rows {
                println!("{},{},{:.4},{:.2}", r.method, r.k, r.median_ms, r.speedup);
            }
            Ok(())
        }
        Command::SweepBeam { model, k_list } => {
            let (cfg, prep, params) = load_model(&model)?;
            let ks = k_list.unwrap_or_else(|| cfg.evaluation.sweep_k.clone());
            let cut = &cfg.evaluation.cutoffs;
            let reports = sweep_beam(&params, &prep.dataset, &prep.tokenized.catalog, &prep.trie, &ks, cut)?;
            let mut header = vec!["k".to_string()];
            header.extend(cut.iter().map(|c| format!("recall@{c}")));
            header.extend(cut.iter().map(|c| format!("ndcg@{c}")));
            println!("{}", header.join(","));
            for r in reports {
                let mut row = vec![r.k_beam.to_string()];
                row.extend(r.recall.values().map(|v| format!("{v:.6}")));
                row.extend(r.ndcg.values().map(|v| format!("{v:.6}")));
                println!("{}", row.join(","));
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = a.load()?;
            if cfg.trainer.mode == LossMode::Ce {
                bail!("sweep needs an apao mode (--mode apao_pointwise or apao_pairwise)");
            }
            let prep = prepare(&cfg)?;
            println!("beta,eta,best_valid_ndcg");
            let mut best: Option<(f64, f64, f64)> = None;
            for &beta in &cfg.sweep.betas {
                for &eta in &cfg.sweep.etas {
                    let tc = genrec::trainer::TrainConfig { beta, eta, ..cfg.trainer.clone() };
                    let out = train(&tc, &prep.dataset, &prep.tokenized.catalog)?;
                    let score = out.manifest.stages.last().map_or(0.0, |s| s.best_valid_ndcg);
                    println!("{beta},{eta},{score:.6}");
                    if best.is_none_or(|b| score > b.2) {
                        best = Some((beta, eta, score));
                    }
                }
            }
            if let Some((b, e, s)) = best {
                eprintln!("best: beta={b} eta={e} valid_ndcg={s:.6}");
            }
            Ok(())
        }
        Command::VerifyTheory { trials, seed } => {
            let weights = verify_weight_program(trials, seed)?;
            println!("{}", serde_json::to_string(&weights)?);
            let bound = verify_lower_bound(trials, seed)?;
            println!("{}", serde_json::to_string(&bound)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {WORKERS_ENV}: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
