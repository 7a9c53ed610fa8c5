use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fas_core::metrics::{write_scores, ThresholdRule};
use fas_core::protocol::{
    adversarial_ablation, composed_gradient_check, cross_dataset_run, fold_plan, fold_seed, load_checkpoint,
    load_dataset, save_checkpoint, seed_options, train_fold, AuditedDataset, CrossOptions, ModelConfig, Splits,
};
use fas_core::synth::{ingest_directory, write_directory, Dataset};
use fas_core::tensor::GradCheckConfig;
use fas_core::{DType, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fas",
    version,
    about = "Domain-generalized face anti-spoofing on a from-scratch tensor stack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured synthetic domains as a PNG tree
    /// `<out>/<domain>/<real|fake>/NNNNN.png`.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the given source domains and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated source domain names.
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the run record (losses, seeds, timing) as JSON.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Score one domain with a checkpoint and print its metrics as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: String,
        /// eer-target, eer-dev or fixed:<tau>; defaults to the checkpoint config.
        #[arg(long)]
        threshold: Option<ThresholdRule>,
        /// Read images from this tree instead of regenerating them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write per-sample scores as CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-domain-out protocol; prints the fold table and writes the
    /// full report as JSON.
    CrossEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run once per seed instead of once with the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Repeat every run without the adversarial loss and compare.
        #[arg(long)]
        ablation: bool,
        /// Save one checkpoint per fold under this directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// No per-fold progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Finite-difference check of the full training loss in double precision.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        images: usize,
        /// Random subsample of parameter coordinates to check.
        #[arg(long, default_value_t = 2000)]
        max_coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { config, out } => generate_data(&config, &out),
        Command::Train {
            config,
            sources,
            out,
            record,
        } => train(&config, &sources, &out, record.as_deref()),
        Command::Eval {
            ckpt,
            target,
            threshold,
            data,
            scores,
            out,
        } => eval(
            &ckpt,
            &target,
            threshold,
            data.as_deref(),
            scores.as_deref(),
            out.as_deref(),
        ),
        Command::CrossEval {
            config,
            out,
            seeds,
            ablation,
            checkpoints,
            quiet,
        } => cross_eval(&config, &out, seeds, ablation, checkpoints, quiet),
        Command::GradCheck {
            config,
            images,
            max_coords,
            tol,
        } => grad_check(&config, images, max_coords, tol),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text + "\n")?;
    Ok(())
}

fn generate_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ModelConfig::from_path(config)?;
    let dataset = load_dataset(&cfg)?;
    write_directory(&dataset, out)?;
    for (name, [fake, real]) in dataset.domains.iter().zip(dataset.counts()) {
        println!("{name}: {real} real, {fake} fake");
    }
    Ok(())
}

fn train(config: &Path, sources: &[String], out: &Path, record_path: Option<&Path>) -> Result<()> {
    let cfg = ModelConfig::from_path(config)?;
    let dataset = load_dataset(&cfg)?;
    let source_ids: Vec<usize> = sources.iter().map(|s| dataset.domain_index(s)).collect::<Result<_>>()?;
    // same fold seed as the cross-eval fold holding out the first
    // participating domain that is not a source
    let (participating, _) = fold_plan(&cfg, &dataset)?;
    let fold_index = participating.iter().position(|d| !source_ids.contains(d)).unwrap_or(0);
    let seed = fold_seed(cfg.optimizer.seed, fold_index);
    let splits = Splits::new(&dataset, cfg.data.dev_fraction, cfg.optimizer.seed);
    let audit = AuditedDataset::new(&dataset);
    let mut record = match cfg.optimizer.precision {
        DType::F32 => {
            let (model, record) = train_fold::<f32>(&cfg, &audit, &splits, &source_ids, seed)?;
            save_checkpoint(&model, &cfg, &record.sources, out)?;
            record
        }
        DType::F64 => {
            let (model, record) = train_fold::<f64>(&cfg, &audit, &splits, &source_ids, seed)?;
            save_checkpoint(&model, &cfg, &record.sources, out)?;
            record
        }
    };
    record.checkpoint = Some(out.to_path_buf());
    if let Some(last) = record.losses.last() {
        eprintln!(
            "trained {} steps in {:.1}s: L_reg {:.4}  L_adv {:.4}",
            record.losses.len(),
            record.wall_clock_secs,
            last.l_reg,
            last.l_adv
        );
    }
    if let Some(path) = record_path {
        write_json(path, &record)?;
    }
    Ok(())
}

fn eval(
    ckpt: &Path,
    target: &str,
    threshold: Option<ThresholdRule>,
    data: Option<&Path>,
    scores_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (model, cfg, header) = load_checkpoint(ckpt)?;
    let dataset: Dataset = match data {
        Some(dir) => {
            let ingested = ingest_directory(dir)?;
            for w in &ingested.warnings {
                eprintln!("warning: {w}");
            }
            ingested.dataset
        }
        None => load_dataset(&cfg)?,
    };
    let target_id = dataset.domain_index(target)?;
    let rule = threshold.unwrap_or(cfg.protocol.threshold);
    // sources are only needed for the dev split of `eer-dev`
    let sources: Vec<usize> = match rule {
        ThresholdRule::EerDev => header
            .sources
            .iter()
            .map(|s| dataset.domain_index(s))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let splits = Splits::new(&dataset, cfg.data.dev_fraction, cfg.optimizer.seed);
    let dev = splits.dev_indices(&sources);
    let (scores, report) = fas_core::protocol::evaluate_fold(&model, &dataset, target_id, &sources, rule, &dev)?;
    if let Some(path) = scores_path {
        let file = fs::File::create(path)?;
        write_scores(&scores, file)?;
    }
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?
        ),
    }
    Ok(())
}

fn cross_eval(
    config: &Path,
    out: &Path,
    seeds: Option<Vec<u64>>,
    ablation: bool,
    checkpoints: Option<PathBuf>,
    quiet: bool,
) -> Result<()> {
    let cfg = ModelConfig::from_path(config)?;
    let opts = CrossOptions {
        checkpoint_dir: checkpoints,
        progress: !quiet,
    };
    if ablation {
        let seeds = seeds.unwrap_or_else(|| vec![cfg.optimizer.seed]);
        let runs = adversarial_ablation(&cfg, &seeds, &opts)?;
        for run in &runs.with {
            println!("seed {}\n{}", run.seed, run.render_table());
        }
        print!("{}", runs.summary.render_table());
        return write_json(out, &runs);
    }
    match seeds {
        None => {
            let report = cross_dataset_run(&cfg, &opts)?;
            print!("{}", report.render_table());
            write_json(out, &report)
        }
        Some(seeds) => {
            let mut reports = Vec::new();
            for seed in seeds {
                let mut c = cfg.clone();
                c.optimizer.seed = seed;
                c.refresh_text();
                let report = cross_dataset_run(&c, &seed_options(&opts, seed, ""))?;
                println!("seed {seed}\n{}", report.render_table());
                reports.push(report);
            }
            write_json(out, &reports)
        }
    }
}

fn grad_check(config: &Path, images: usize, max_coords: usize, tol: f64) -> Result<()> {
    let cfg = ModelConfig::from_path(config)?;
    let gc = GradCheckConfig {
        tol,
        max_coords,
        seed: cfg.optimizer.seed,
        ..Default::default()
    };
    let report = composed_gradient_check(&cfg, images.max(2), 2, gc)?;
    println!(
        "checked {} of {} coordinates, max relative error {:.3e} (tol {:e})",
        report.checked,
        report.total,
        report.max_rel_err(),
        report.tol
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: tensor {} coord {}: analytic {:.6e}, numeric {:.6e}",
            w.param, w.coord, w.analytic, w.numeric
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerical("gradient check failed".into()))
    }
}
