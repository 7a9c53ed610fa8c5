use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::{fold_seed, load_dataset, AuditedDataset, Splits};
use super::model::save_checkpoint;
use super::train::{evaluate_fold, train_fold, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricsReport, ThresholdRule};
use crate::synth::Dataset;
use crate::tensor::{DType, Real};

#[derive(Debug, Clone, Default)]
pub struct CrossOptions {
    /// Write `<dir>/fold_<target>.ckpt` for every fold.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per finished fold to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub target: String,
    pub sources: Vec<String>,
    pub metrics: MetricsReport,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub config: String,
    pub seed: u64,
    pub threshold: ThresholdRule,
    pub folds: Vec<FoldResult>,
    pub mean_hter: f64,
    pub std_hter: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
}

impl CrossReport {
    fn summarize(cfg: &ModelConfig, folds: Vec<FoldResult>) -> Self {
        let hters: Vec<f64> = folds.iter().map(|f| f.metrics.hter).collect();
        let aucs: Vec<f64> = folds.iter().map(|f| f.metrics.auc).collect();
        let (mean_hter, std_hter) = mean_std(&hters);
        let (mean_auc, std_auc) = mean_std(&aucs);
        CrossReport {
            config: cfg.source_text.clone(),
            seed: cfg.optimizer.seed,
            threshold: cfg.protocol.threshold,
            folds,
            mean_hter,
            std_hter,
            mean_auc,
            std_auc,
        }
    }

    /// Per-fold HTER and AUC in percent with a mean ± std row.
    pub fn render_table(&self) -> String {
        let names: Vec<String> = self
            .folds
            .iter()
            .map(|f| format!("{} -> {}", f.sources.join(","), f.target))
            .collect();
        let width = names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max("mean ± std".chars().count());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>15}  {:>15}", "fold", "HTER (%)", "AUC (%)");
        for (name, f) in names.iter().zip(&self.folds) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>15.2}  {:>15.2}",
                name,
                100.0 * f.metrics.hter,
                100.0 * f.metrics.auc
            );
        }
        let hter = format!("{:.2} ± {:.2}", 100.0 * self.mean_hter, 100.0 * self.std_hter);
        let auc = format!("{:.2} ± {:.2}", 100.0 * self.mean_auc, 100.0 * self.std_auc);
        // `±` is one char but two bytes; pad by chars
        let pad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));
        let label = format!("{}{}", "mean ± std", " ".repeat(width - "mean ± std".chars().count()));
        let _ = writeln!(out, "{label}  {}  {}", pad(&hter, 15), pad(&auc, 15));
        let _ = writeln!(out, "threshold: {}", self.threshold);
        out
    }
}

/// Participating domain indices and the fold targets among them.
pub fn fold_plan(cfg: &ModelConfig, dataset: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let participating: Vec<usize> = match &cfg.protocol.domains {
        Some(names) => names.iter().map(|n| dataset.domain_index(n)).collect::<Result<_>>()?,
        None => (0..dataset.domains.len()).collect(),
    };
    let targets = match &cfg.protocol.targets {
        Some(names) => names.iter().map(|n| dataset.domain_index(n)).collect::<Result<_>>()?,
        None => participating.clone(),
    };
    Ok((participating, targets))
}

fn run_fold<T: Real>(
    cfg: &ModelConfig,
    dataset: &Dataset,
    splits: &Splits,
    participating: &[usize],
    target: usize,
    opts: &CrossOptions,
) -> Result<FoldResult> {
    let fold_index = participating
        .iter()
        .position(|&d| d == target)
        .expect("target participates");
    let sources: Vec<usize> = participating.iter().copied().filter(|&d| d != target).collect();
    let audit = AuditedDataset::new(dataset);
    let seed = fold_seed(cfg.optimizer.seed, fold_index);
    let (model, mut record) = train_fold::<T>(cfg, &audit, splits, &sources, seed)?;
    if record.training_reads[target] != 0 {
        return Err(Error::Protocol(format!(
            "target domain `{}` was read during training",
            dataset.domains[target]
        )));
    }
    let dev = splits.dev_indices(&sources);
    let (_, metrics) = evaluate_fold(&model, dataset, target, &sources, cfg.protocol.threshold, &dev)?;
    if let Some(dir) = &opts.checkpoint_dir {
        let path = dir.join(format!("fold_{}.ckpt", dataset.domains[target]));
        save_checkpoint(&model, cfg, &record.sources, &path)?;
        record.checkpoint = Some(path);
    }
    record.target = Some(dataset.domains[target].clone());
    record.metrics = Some(metrics.clone());
    Ok(FoldResult {
        fold_index,
        target: dataset.domains[target].clone(),
        sources: record.sources.clone(),
        metrics,
        record,
    })
}

/// Leave-one-out over the configured domains: each target is held out,
/// trained on the rest and evaluated.
pub fn cross_dataset_run(cfg: &ModelConfig, opts: &CrossOptions) -> Result<CrossReport> {
    let dataset = load_dataset(cfg)?;
    cross_dataset_run_on(cfg, &dataset, opts)
}

pub fn cross_dataset_run_on(cfg: &ModelConfig, dataset: &Dataset, opts: &CrossOptions) -> Result<CrossReport> {
    let (participating, targets) = fold_plan(cfg, dataset)?;
    if participating.len() < 3 {
        return Err(Error::Protocol(format!(
            "leave-one-out needs at least 3 domains, got {}",
            participating.len()
        )));
    }
    let splits = Splits::new(dataset, cfg.data.dev_fraction, cfg.optimizer.seed);
    let mut folds = Vec::with_capacity(targets.len());
    for &target in &targets {
        let fold = match cfg.optimizer.precision {
            DType::F32 => run_fold::<f32>(cfg, dataset, &splits, &participating, target, opts),
            DType::F64 => run_fold::<f64>(cfg, dataset, &splits, &participating, target, opts),
        }
        .map_err(|e| with_fold(e, &dataset.domains[target]))?;
        if opts.progress {
            eprintln!(
                "fold {} -> {}: HTER {:.2}%  AUC {:.2}%  ({:.1}s)",
                fold.sources.join(","),
                fold.target,
                100.0 * fold.metrics.hter,
                100.0 * fold.metrics.auc,
                fold.record.wall_clock_secs
            );
        }
        folds.push(fold);
    }
    Ok(CrossReport::summarize(cfg, folds))
}

fn with_fold(e: Error, target: &str) -> Error {
    let tag = |m: String| format!("fold with target `{target}`: {m}");
    match e {
        Error::Config(m) => Error::Config(tag(m)),
        Error::Data(m) => Error::Data(tag(m)),
        Error::Protocol(m) => Error::Protocol(tag(m)),
        Error::Numerical(m) => Error::Numerical(tag(m)),
        Error::Metric(m) => Error::Metric(tag(m)),
        Error::Composition(m) => Error::Composition(tag(m)),
        other => other,
    }
}

/// Adversarial loss on versus off (`λ_grl = 0`), one row per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_auc_with: f64,
    pub mean_auc_without: f64,
    /// `mean_auc_without − mean_auc_with`.
    pub auc_gain_without: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub auc_with: f64,
    pub hter_with: f64,
    pub auc_without: f64,
    pub hter_without: f64,
}

impl AblationReport {
    pub fn from_reports(with: &[CrossReport], without: &[CrossReport]) -> Result<Self> {
        if with.len() != without.len() || with.is_empty() {
            return Err(Error::Protocol("ablation needs one pair of runs per seed".into()));
        }
        let rows: Vec<AblationRow> = with
            .iter()
            .zip(without)
            .map(|(a, b)| AblationRow {
                seed: a.seed,
                auc_with: a.mean_auc,
                hter_with: a.mean_hter,
                auc_without: b.mean_auc,
                hter_without: b.mean_hter,
            })
            .collect();
        let n = rows.len() as f64;
        let mean_auc_with = rows.iter().map(|r| r.auc_with).sum::<f64>() / n;
        let mean_auc_without = rows.iter().map(|r| r.auc_without).sum::<f64>() / n;
        Ok(AblationReport {
            rows,
            mean_auc_with,
            mean_auc_without,
            auc_gain_without: mean_auc_without - mean_auc_with,
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}",
            "seed", "AUC adv", "HTER adv", "AUC no-adv", "HTER no-adv"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}  {:>12.2}  {:>12.2}  {:>12.2}  {:>12.2}",
                r.seed,
                100.0 * r.auc_with,
                100.0 * r.hter_with,
                100.0 * r.auc_without,
                100.0 * r.hter_without
            );
        }
        let _ = writeln!(
            out,
            "{:>6}  {:>12.2}  {:>12}  {:>12.2}  {:>12}",
            "mean",
            100.0 * self.mean_auc_with,
            "",
            100.0 * self.mean_auc_without,
            ""
        );
        out
    }
}

/// Every run of an ablation alongside its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRuns {
    pub summary: AblationReport,
    pub with: Vec<CrossReport>,
    pub without: Vec<CrossReport>,
}

/// Runs the protocol for each seed with and without the adversarial loss.
pub fn adversarial_ablation(cfg: &ModelConfig, seeds: &[u64], opts: &CrossOptions) -> Result<AblationRuns> {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.optimizer.seed = seed;
        c.refresh_text();
        with.push(cross_dataset_run(&c, &seed_options(opts, seed, "adv"))?);
        c.heads.lambda_grl = 0.0;
        c.refresh_text();
        without.push(cross_dataset_run(&c, &seed_options(opts, seed, "no-adv"))?);
    }
    let summary = AblationReport::from_reports(&with, &without)?;
    Ok(AblationRuns { summary, with, without })
}

/// Options for one seed of a multi-seed run: checkpoints go to
/// `<dir>/seed_<seed>[_<tag>]`.
pub fn seed_options(opts: &CrossOptions, seed: u64, tag: &str) -> CrossOptions {
    let suffix = if tag.is_empty() {
        String::new()
    } else {
        format!("_{tag}")
    };
    CrossOptions {
        checkpoint_dir: opts
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("seed_{seed}{suffix}"))),
        progress: opts.progress,
    }
}
