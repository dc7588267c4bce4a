//! Command implementations. Each writes its artifacts plus the resolved
//! configuration snapshot into the run's output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hmamba::autodiff::Fault;
use hmamba::data::{
    build_sequences, load_interactions, synth_hierarchical_dataset, write_interactions, BuildOptions,
    SequenceDataset,
};
use hmamba::lorentz::project_to_poincare;
use hmamba::metrics::{evaluate, EvalReport};
use hmamba::model::{checkpoint, item_points, ModelConfig, ModelState, TrainingBatch, Variant};
use hmamba::train::{gradcheck, train_epoch, GradcheckReport, Optimizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, BenchRow, BenchSpec, ATTENTION};
use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.hmck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const DATASET_FILE: &str = "dataset.json";
pub const METRICS_FILE: &str = "metrics.txt";
pub const BENCH_FILE: &str = "bench.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const TREE_FILE: &str = "tree.json";

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::Data(format!("cannot open {}: {e}", p.display())))
}

/// Loads a serialized dataset (`.json`) or builds one from an interaction CSV.
pub fn load_dataset(path: &Path, cfg: &RunConfig, max_seq_len: usize) -> Result<SequenceDataset, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(SequenceDataset::load(path)?);
    }
    let log = load_interactions(path)?;
    if log.malformed > 0 {
        eprintln!("skipped {} malformed rows in {}", log.malformed, path.display());
    }
    Ok(build_sequences(
        &log,
        BuildOptions {
            min_user_len: cfg.data.min_user_len,
            min_item_count: cfg.data.min_item_count,
            max_seq_len,
        },
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub final_loss: f64,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let mut cfg = cfg.clone();
    let data_path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| CliError::Usage("train needs a dataset (--data or data.path)".into()))?;
    let data_path = absolute(&data_path)?;
    cfg.data.path = Some(data_path.clone());
    cfg.model.vocab_size = 2;
    cfg.model.validate()?;
    let tcfg = cfg.train.to_train_config();
    tcfg.validate()?;
    let data = load_dataset(&data_path, &cfg, cfg.model.max_seq_len)?;
    cfg.model.vocab_size = data.vocab_size();
    if data.max_seq_len != cfg.model.max_seq_len {
        eprintln!(
            "note: dataset was built with max_seq_len {}; model uses {}",
            data.max_seq_len, cfg.model.max_seq_len
        );
    }

    let dir = cfg.output_dir("train");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    write_file(&dir.join(DATASET_FILE), data.to_json()?)?;

    let mut model = ModelState::init(cfg.model.clone(), tcfg.seed)?;
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.lr)?;
    let seqs = data.train_sequences();
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut final_loss = f64::NAN;
    for epoch in 1..=tcfg.epochs {
        let (mut report, stats) = train_epoch(&mut model, &seqs, &mut opt, &tcfg, epoch)?;
        eprintln!(
            "epoch {epoch:>4}  loss {:.6}  grad_norm {:.4}  residual {:.1e}  {:.2}s",
            report.mean_loss, report.grad_norm_mean, stats.max_residual, report.wall_seconds
        );
        if !cfg.train.log_timing {
            report.wall_seconds = 0.0;
        }
        let line = serde_json::to_string(&report).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(log, "{line}")?;
        final_loss = report.mean_loss;
    }
    checkpoint::save(&model, &dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { dir, final_loss })
}

/// Architecture fields that must agree between a configuration and a
/// checkpoint.
fn shape_fields(m: &ModelConfig) -> (Variant, usize, usize, usize, usize, usize) {
    (m.variant, m.d, m.d_state, m.expand, m.conv_width, m.n_layers)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome, CliError> {
    let mut cfg = cfg.clone();
    let ckpt = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("eval needs a checkpoint (--checkpoint or eval.checkpoint)".into()))?;
    let ckpt = absolute(&ckpt)?;
    let data_path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| CliError::Usage("eval needs a dataset (--data or data.path)".into()))?;
    let data_path = absolute(&data_path)?;
    let model = checkpoint::load(&ckpt)?;
    if cfg.model_explicit && shape_fields(&cfg.model) != shape_fields(model.config()) {
        return Err(CliError::Data(format!(
            "incompatible checkpoint: configuration describes {:?} but checkpoint holds {:?}",
            shape_fields(&cfg.model),
            shape_fields(model.config())
        )));
    }
    let data = load_dataset(&data_path, &cfg, model.config().max_seq_len)?;
    if data.vocab_size() != model.config().vocab_size {
        return Err(CliError::Data(format!(
            "incompatible checkpoint: dataset has {} items, checkpoint scores {}",
            data.n_items(),
            model.config().n_items()
        )));
    }
    cfg.eval.checkpoint = Some(ckpt);
    cfg.data.path = Some(data_path);
    cfg.model = model.config().clone();
    let report = evaluate(&model, &data, &cfg.eval.to_options())?;
    let dir = cfg.output_dir("eval");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    write_file(&dir.join(METRICS_FILE), report.to_key_value())?;
    Ok(EvalOutcome { dir, report })
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub dir: PathBuf,
    pub rows: Vec<BenchRow>,
}

impl BenchOutcome {
    /// Log-log slope of mean time against length per variant.
    pub fn slopes(&self) -> Vec<(String, f64)> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        names
            .into_iter()
            .map(|n| {
                let pts: Vec<(f64, f64)> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == n)
                    .map(|r| (r.len as f64, r.mean_ms))
                    .collect();
                (n.to_string(), bench::loglog_slope(&pts))
            })
            .collect()
    }
}

pub fn bench(cfg: &RunConfig) -> Result<BenchOutcome, CliError> {
    for v in &cfg.bench.variants {
        if v != ATTENTION {
            v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    if cfg.bench.lengths.is_empty() || cfg.bench.lengths.contains(&0) {
        return Err(CliError::Usage("bench.lengths must be nonempty positive lengths".into()));
    }
    let dir = cfg.output_dir("bench");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    let spec = BenchSpec {
        lengths: cfg.bench.lengths.clone(),
        variants: cfg.bench.variants.clone(),
        warmup: cfg.bench.warmup,
        reps: cfg.bench.reps,
        d: cfg.bench.d,
        d_state: cfg.bench.d_state,
        seed: cfg.bench.seed,
    };
    let rows = bench::run(&spec, |r| eprintln!("{}", r.to_csv()))?;
    let mut csv = String::from(bench::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    write_file(&dir.join(BENCH_FILE), csv)?;
    Ok(BenchOutcome { dir, rows })
}

/// Tiny model and batch used by the gradient check.
pub fn gradcheck_fixture(cfg: &RunConfig, variant: Variant) -> Result<(ModelState, TrainingBatch), CliError> {
    let g = &cfg.gradcheck;
    if g.d > 8 || g.max_seq_len > 8 || g.n_items > 32 {
        return Err(CliError::Usage(format!(
            "gradcheck needs a tiny model (d <= 8, L <= 8, |V| <= 32), got d={}, L={}, |V|={}",
            g.d, g.max_seq_len, g.n_items
        )));
    }
    if g.n_items < 2 || g.max_seq_len < 2 {
        return Err(CliError::Usage("gradcheck needs at least two items and L >= 2".into()));
    }
    let model_cfg = ModelConfig {
        variant,
        d: g.d,
        d_state: g.d_state,
        expand: 2,
        conv_width: 2,
        n_layers: 1,
        k: g.k,
        dropout: 0.0,
        max_seq_len: g.max_seq_len,
        vocab_size: g.n_items + 1,
        ..ModelConfig::default()
    };
    let model = ModelState::init(model_cfg, g.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.wrapping_add(1));
    let full = g.max_seq_len + 1;
    let seqs: Vec<Vec<usize>> = [full, full, full.div_ceil(2)]
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(1..=g.n_items)).collect())
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = TrainingBatch::from_sequences(&refs, g.max_seq_len, g.n_items, &mut rng);
    Ok((model, batch))
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub dir: PathBuf,
    pub reports: Vec<(Variant, GradcheckReport)>,
    pub text: String,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.passed())
    }

    pub fn failing_groups(&self) -> Vec<String> {
        self.reports
            .iter()
            .flat_map(|(v, r)| r.groups.iter().filter(|g| !g.passed).map(move |g| format!("{v}/{}", g.group)))
            .collect()
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig, fault: Option<Fault>) -> Result<GradcheckOutcome, CliError> {
    let variants = cfg
        .gradcheck
        .variants
        .iter()
        .map(|v| v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    let mut text = format!("{:<10} {:<16} {:>12} {:>12} {:>6} {}\n", "variant", "group", "max_rel", "max_abs", "coords", "status");
    for v in variants {
        let (model, batch) = gradcheck_fixture(cfg, v)?;
        let report = gradcheck(&model, &batch, cfg.gradcheck.step, fault)?;
        for g in &report.groups {
            let _ = writeln!(
                text,
                "{:<10} {:<16} {:>12.3e} {:>12.3e} {:>6} {}",
                v.name(),
                g.group,
                g.max_rel_error,
                g.max_abs_error,
                g.coordinates,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        reports.push((v, report));
    }
    let dir = cfg.output_dir("gradcheck");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    write_file(&dir.join(GRADCHECK_FILE), &text)?;
    Ok(GradcheckOutcome { dir, reports, text })
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub dir: PathBuf,
    pub records: usize,
}

pub fn synth(cfg: &RunConfig) -> Result<SynthOutcome, CliError> {
    let s = &cfg.synth;
    let (log, tree) = synth_hierarchical_dataset(s.seed, s.depth, s.branching, s.users, s.len)?;
    let dir = cfg.output_dir("synth");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    write_interactions(&log, &dir.join(INTERACTIONS_FILE))?;
    let mut tree_json = serde_json::to_vec(&tree).map_err(|e| CliError::Data(e.to_string()))?;
    tree_json.push(b'\n');
    write_file(&dir.join(TREE_FILE), tree_json)?;
    Ok(SynthOutcome {
        dir,
        records: log.records.len(),
    })
}

#[derive(Debug, Clone)]
pub struct ExportOutcome {
    pub path: PathBuf,
    pub rows: usize,
}

/// Item coordinates: Poincaré-ball points for the Full variant, raw
/// embedding rows otherwise. The padding row is omitted.
pub fn export_embeddings(cfg: &RunConfig, out: Option<&Path>) -> Result<ExportOutcome, CliError> {
    let mut cfg = cfg.clone();
    let ckpt = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("export-embeddings needs --checkpoint".into()))?;
    let ckpt = absolute(&ckpt)?;
    let model = checkpoint::load(&ckpt)?;
    cfg.eval.checkpoint = Some(ckpt);
    cfg.model = model.config().clone();
    let d = model.config().d;
    let rows: Vec<Vec<f64>> = if model.config().variant == Variant::Full {
        item_points(&model)?.iter().map(project_to_poincare).collect()
    } else {
        (1..model.config().vocab_size).map(|i| model.embedding().row(i).to_vec()).collect()
    };
    let dir = cfg.output_dir("export");
    prepare_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(EMBEDDINGS_FILE));
    let mut text = String::from("item_id");
    for j in 0..d {
        let _ = write!(text, ",x{}", j + 1);
    }
    text.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(text, "{}", i + 1);
        for v in r {
            let _ = write!(text, ",{v:e}");
        }
        text.push('\n');
    }
    write_file(&path, text)?;
    Ok(ExportOutcome { path, rows: rows.len() })
}
