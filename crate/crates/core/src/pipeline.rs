//! End-to-end runs and the fixed run-directory layout.
//!
//! ```text
//! <root>/<UTC timestamp>-<digest8>/
//!   config.toml              resolved configuration
//!   tokenizer/codebooks.json
//!   tokenizer/codes.tsv      item_id<TAB>c1 ... cT
//!   data/interactions.tsv    user_id<TAB>item_id<TAB>position
//!   data/splits.jsonl        one record per user
//!   train/metrics.jsonl      one record per optimizer step
//!   train/manifest.json      per-epoch timings, validation metric, final w
//!   train/model.ckpt
//!   eval/metrics.json        test metrics and their digest
//!   eval/users.csv
//!   audit/retention.csv
//!   audit/retention.json
//!   manifest.json            written last
//!   ERROR                    present only when a stage failed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, EmbeddingFormat, RunConfig, StageName};
use crate::dataset::{kcore_filter, load_interactions, split_leave_one_out, InteractionDataset};
use crate::decoder::{audit_retention, CodeTrie, RetentionReport};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricReport};
use crate::model::{init_params, save_checkpoint, ModelParams};
use crate::synthetic::{generate, SyntheticConfig};
use crate::tokenizer::{fit_codebooks, tokenize, Codebooks, EmbeddingMatrix, TokenizedCatalog};
use crate::trainer::{train, RunManifest, TrainOutcome};

pub const RUN_ROOT_ENV: &str = "GENREC_RUN_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "ERROR";

/// Embeddings plus, for synthetic sources, the generated user sequences.
pub struct Source {
    pub embeddings: EmbeddingMatrix,
    pub sequences: Option<BTreeMap<u64, Vec<u32>>>,
}

pub fn load_source(cfg: &RunConfig) -> Result<Source> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let d = generate(&cfg.data.synthetic)?;
            Ok(Source { embeddings: d.embeddings, sequences: Some(d.sequences) })
        }
        DataSource::Files => {
            let path = cfg.data.embeddings.as_deref().ok_or_else(|| Error::Config("data.embeddings: missing".into()))?;
            let embeddings = match cfg.data.embeddings_format {
                EmbeddingFormat::Table => EmbeddingMatrix::load_table(path)?,
                EmbeddingFormat::RawF32 => EmbeddingMatrix::load_raw_f32(path)?,
            };
            Ok(Source { embeddings, sequences: None })
        }
    }
}

pub struct Tokenized {
    pub codebooks: Codebooks,
    pub catalog: TokenizedCatalog,
}

pub fn tokenize_stage(cfg: &RunConfig, embeddings: &EmbeddingMatrix) -> Result<Tokenized> {
    let t = &cfg.tokenizer;
    let codebooks = fit_codebooks(embeddings, t.levels, t.codebook_size, t.seed, t.max_iters)?;
    let catalog = tokenize(embeddings, &codebooks)?;
    Ok(Tokenized { codebooks, catalog })
}

/// Loads or generates interactions, applies k-core filtering and the
/// leave-one-out split, and checks item ids against the catalog size.
pub fn split_stage(cfg: &RunConfig, source: &Source) -> Result<InteractionDataset> {
    let ds = match (&source.sequences, &cfg.data.interactions) {
        (Some(seqs), _) => {
            let filtered = kcore_filter(seqs.clone(), cfg.dataset.min_count);
            if filtered.is_empty() {
                return Err(Error::Data(format!("no synthetic users left after {}-core filtering", cfg.dataset.min_count)));
            }
            InteractionDataset::from_sequences(filtered, cfg.dataset.max_history)
        }
        (None, Some(path)) => load_interactions(path, cfg.dataset.min_count, cfg.dataset.max_history)?,
        (None, None) => return Err(Error::Config("data.interactions: missing".into())),
    };
    if let Some(max) = ds.max_item_id() {
        if max as usize >= source.embeddings.rows() {
            return Err(Error::Data(format!(
                "item id {max} has no embedding row ({} rows)",
                source.embeddings.rows()
            )));
        }
    }
    split_leave_one_out(ds)
}

/// Everything the train, evaluate and audit stages consume.
pub struct Prepared {
    pub source: Source,
    pub tokenized: Tokenized,
    pub dataset: InteractionDataset,
    pub trie: CodeTrie,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let source = load_source(cfg)?;
    let tokenized = tokenize_stage(cfg, &source.embeddings)?;
    let dataset = split_stage(cfg, &source)?;
    let trie = CodeTrie::from_catalog(&tokenized.catalog)?;
    Ok(Prepared { source, tokenized, dataset, trie })
}

pub fn audit_stage(
    cfg: &RunConfig,
    params: &ModelParams,
    dataset: &InteractionDataset,
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
) -> Result<RetentionReport> {
    let mut histories: Vec<Vec<u32>> = dataset.test_examples()?.into_iter().map(|e| e.history).collect();
    if let Some(limit) = cfg.decoder.audit_limit {
        histories.truncate(limit);
    }
    audit_retention(
        params,
        &histories,
        cfg.decoder.audit_k_global,
        cfg.decoder.audit_k_beam,
        catalog,
        trie,
    )
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn subdir(run: &Path, name: &str) -> Result<PathBuf> {
    let p = run.join(name);
    fs::create_dir_all(&p)?;
    Ok(p)
}

pub fn write_tokenized(run: &Path, tok: &Tokenized) -> Result<()> {
    let dir = subdir(run, "tokenizer")?;
    write_json(&dir.join("codebooks.json"), &tok.codebooks)?;
    tok.catalog.write_tsv(&dir.join("codes.tsv"))
}

pub fn write_split(run: &Path, ds: &InteractionDataset) -> Result<()> {
    let dir = subdir(run, "data")?;
    ds.write_tsv(&dir.join("interactions.tsv"))?;
    ds.write_split_manifest(&dir.join("splits.jsonl"))
}

/// Writes the step stream, training manifest and checkpoint; returns the
/// checkpoint path.
pub fn write_training(run: &Path, cfg: &RunConfig, outcome: &mut TrainOutcome) -> Result<PathBuf> {
    let dir = subdir(run, "train")?;
    let mut out = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    for rec in &outcome.steps {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&outcome.params, &cfg.digest_bytes(), &ckpt)?;
    outcome.manifest.checkpoint = Some("train/model.ckpt".into());
    write_json(&dir.join("manifest.json"), &outcome.manifest)?;
    Ok(ckpt)
}

pub fn write_evaluation(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    report.write_json(&dir.join("metrics.json"))?;
    report.write_user_csv(&dir.join("users.csv"))
}

pub fn write_audit(run: &Path, report: &RetentionReport) -> Result<()> {
    let dir = subdir(run, "audit")?;
    fs::write(dir.join("retention.csv"), report.to_csv())?;
    write_json(&dir.join("retention.json"), report)
}

/// `<root>/<timestamp>-<digest8>`, suffixed when two runs share a millisecond.
pub fn create_run_dir(root: &Path, digest: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{stamp}-{}", &digest[..8]);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let p = root.join(name);
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

/// `GENREC_RUN_ROOT` if set, else `run.root`.
pub fn run_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.run.root.clone())
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
    pub checkpoint_sha256: Option<String>,
    pub metric_digest: Option<String>,
    pub finished_at: String,
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub train: Option<RunManifest>,
    pub params: Option<ModelParams>,
    pub metrics: Option<MetricReport>,
    pub retention: Option<RetentionReport>,
}

fn check_stage_order(stages: &[StageName]) -> Result<()> {
    use StageName::*;
    let has = |s| stages.contains(&s);
    let needs = |s, deps: &[StageName]| -> Result<()> {
        if has(s) && !deps.iter().all(|&d| has(d)) {
            return Err(Error::Config(format!("run.stages: {s:?} requires {deps:?}")));
        }
        Ok(())
    };
    needs(Train, &[Tokenize, Split])?;
    needs(Evaluate, &[Train])?;
    needs(Audit, &[Train])?;
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("run.stages: list stages once, in pipeline order".into()));
    }
    Ok(())
}

fn run_stages(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let digest = cfg.digest();
    let mut summary = RunSummary {
        dir: dir.to_path_buf(),
        record: RunRecord {
            config_digest: digest.clone(),
            stages: Vec::new(),
            checkpoint_sha256: None,
            metric_digest: None,
            finished_at: String::new(),
        },
        train: None,
        params: None,
        metrics: None,
        retention: None,
    };
    let source = load_source(cfg)?;
    let mut tokenized = None;
    let mut dataset = None;
    for &stage in &cfg.run.stages {
        let start = Instant::now();
        match stage {
            StageName::Tokenize => {
                let tok = tokenize_stage(cfg, &source.embeddings)?;
                write_tokenized(dir, &tok)?;
                tokenized = Some(tok);
            }
            StageName::Split => {
                let ds = split_stage(cfg, &source)?;
                write_split(dir, &ds)?;
                dataset = Some(ds);
            }
            StageName::Train => {
                let (tok, ds) = (tokenized.as_ref().expect("checked"), dataset.as_ref().expect("checked"));
                let mut outcome = train(&cfg.trainer, ds, &tok.catalog)?;
                let ckpt = write_training(dir, cfg, &mut outcome)?;
                summary.record.checkpoint_sha256 = Some(sha256_file(&ckpt)?);
                summary.train = Some(outcome.manifest);
                summary.params = Some(outcome.params);
            }
            StageName::Evaluate => {
                let (tok, ds) = (tokenized.as_ref().expect("checked"), dataset.as_ref().expect("checked"));
                let trie = CodeTrie::from_catalog(&tok.catalog)?;
                let params = summary.params.as_ref().expect("checked");
                let mut report = evaluate(params, ds, &tok.catalog, &trie, cfg.decoder.beam, &cfg.evaluation.cutoffs)?;
                report.config_digest = digest.clone();
                write_evaluation(&dir.join("eval"), &report)?;
                summary.record.metric_digest = Some(report.digest());
                summary.metrics = Some(report);
            }
            StageName::Audit => {
                let (tok, ds) = (tokenized.as_ref().expect("checked"), dataset.as_ref().expect("checked"));
                let trie = CodeTrie::from_catalog(&tok.catalog)?;
                let params = summary.params.as_ref().expect("checked");
                let report = audit_stage(cfg, params, ds, &tok.catalog, &trie)?;
                write_audit(dir, &report)?;
                summary.retention = Some(report);
            }
        }
        summary.record.stages.push(StageRecord { stage, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(summary)
}

/// Runs the configured stages in a fresh run directory. The manifest is the
/// last file written; a failing stage leaves an `ERROR` file instead.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    check_stage_order(&cfg.run.stages)?;
    let dir = create_run_dir(&run_root(cfg), &cfg.digest())?;
    let result = fs::write(dir.join("config.toml"), cfg.to_toml_string())
        .map_err(Error::from)
        .and_then(|_| run_stages(cfg, &dir));
    match result {
        Ok(mut summary) => {
            summary.record.finished_at = chrono::Utc::now().to_rfc3339();
            write_json(&dir.join(MANIFEST_FILE), &summary.record)?;
            Ok(summary)
        }
        Err(e) => {
            let _ = fs::write(dir.join(ERROR_FILE), format!("{e}\n"));
            Err(e)
        }
    }
}

/// A randomly initialized model over a tokenized synthetic catalog, for
/// latency measurements.
pub fn benchmark_setup(
    num_items: usize,
    dim: usize,
    levels: usize,
    codebook_size: usize,
    seed: u64,
) -> Result<(ModelParams, TokenizedCatalog)> {
    let groups = (num_items / 64).clamp(1, 64);
    let syn = SyntheticConfig {
        num_items,
        num_users: 1,
        clusters: groups.min(16),
        subclusters: (groups / 16).max(1),
        seed,
        ..SyntheticConfig::default()
    };
    let data = generate(&syn)?;
    let codebooks = fit_codebooks(&data.embeddings, levels, codebook_size, seed, 25)?;
    let catalog = tokenize(&data.embeddings, &codebooks)?;
    let params = init_params(&catalog, dim, seed)?;
    Ok((params, catalog))
}
