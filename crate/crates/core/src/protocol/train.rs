use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::{AuditedDataset, BatchSampler, Splits};
use super::model::{AnyModel, Model};
use crate::error::{Error, Result};
use crate::heads::{adversarial_loss, final_loss, regression_loss};
use crate::metrics::{MetricsReport, ScoreEntry, ScoreSet, ThresholdRule};
use crate::optim::Adam;
use crate::raster::Image;
use crate::synth::Dataset;
use crate::tensor::{Real, Tape};

/// Images scored per forward pass at evaluation time.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_reg: f64,
    pub l_adv: f64,
    pub l_final: f64,
    pub lambda_grl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Config text, byte for byte.
    pub config: String,
    pub seed: u64,
    pub fold_seed: u64,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub batch_size: usize,
    pub losses: Vec<StepLosses>,
    pub metrics: Option<MetricsReport>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Sample reads per domain during training, in dataset domain order.
    pub training_reads: Vec<usize>,
}

/// Anything that maps images to liveness scores.
pub trait Scorer {
    fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>>;
}

impl<T: Real> Scorer for Model<T> {
    fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        Model::score_images(self, images, chunk)
    }
}

impl Scorer for AnyModel {
    fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        AnyModel::score_images(self, images, chunk)
    }
}

/// Trains backbone and heads on `sources` (dataset domain indices).
pub fn train_fold<T: Real>(
    cfg: &ModelConfig,
    data: &AuditedDataset,
    splits: &Splits,
    sources: &[usize],
    fold_seed: u64,
) -> Result<(Model<T>, RunRecord)> {
    if sources.len() < 2 {
        return Err(Error::Protocol(format!(
            "training needs at least 2 source domains, got {}",
            sources.len()
        )));
    }
    let start = Instant::now();
    let reads_before = data.reads();
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut model = Model::<T>::new(cfg, sources.len(), &mut rng)?;
    let sampler = BatchSampler::new(cfg, sources)?;
    let mut adam = Adam::new(cfg.optimizer.adam(), model.store.tensors());
    for (i, (_, name, _)) in model.store.iter().enumerate() {
        if !name.starts_with("backbone.") {
            adam.set_lr_scale(i, cfg.heads.lr_scale);
        }
    }
    let steps = cfg.optimizer.steps;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let lambda = cfg.heads.lambda_at(step as f64 / steps as f64);
        let batch = sampler.sample(data, splits, &mut rng)?;
        let images: Vec<&Image> = batch.samples.iter().map(|s| &s.image).collect();

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &images)?;
        let l_reg = regression_loss(&mut tape, fwd.scores, &batch.labels(), cfg.heads.reg_reduction.into())?;
        let l_adv = adversarial_loss(
            &mut tape,
            &bound,
            &model.discriminator,
            fwd.features,
            &batch.domains,
            lambda,
        )?;
        let l_final = final_loss(&mut tape, l_reg, l_adv, cfg.heads.w_adv)?;
        let record = StepLosses {
            step,
            l_reg: tape.value(l_reg).item().as_f64(),
            l_adv: tape.value(l_adv).item().as_f64(),
            l_final: tape.value(l_final).item().as_f64(),
            lambda_grl: lambda,
        };
        if ![record.l_reg, record.l_adv, record.l_final]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step} (L_reg {}, L_adv {})",
                record.l_reg, record.l_adv
            )));
        }
        losses.push(record);

        let grads = tape.backward(l_final)?;
        let flat: Vec<Vec<T>> = bound
            .vars()
            .iter()
            .zip(model.store.tensors())
            .map(|(&v, t)| grads.wrt(v, t.numel()))
            .collect();
        let refs: Vec<&[T]> = flat.iter().map(Vec::as_slice).collect();
        adam.step(model.store.tensors_mut(), &refs)?;
    }
    let reads_after = data.reads();
    let domains = data.domains();
    let record = RunRecord {
        config: cfg.source_text.clone(),
        seed: cfg.optimizer.seed,
        fold_seed,
        sources: sources.iter().map(|&d| domains[d].clone()).collect(),
        target: None,
        batch_size: sampler.batch_size(),
        losses,
        metrics: None,
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        training_reads: reads_after.iter().zip(&reads_before).map(|(a, b)| a - b).collect(),
    };
    Ok((model, record))
}

/// Scores the given dataset samples.
pub fn score_samples<S: Scorer + ?Sized>(model: &S, dataset: &Dataset, indices: &[usize]) -> Result<ScoreSet> {
    let images: Vec<&Image> = indices.iter().map(|&i| &dataset.samples[i].image).collect();
    let scores = model.score_images(&images, EVAL_CHUNK)?;
    ScoreSet::new(
        indices
            .iter()
            .zip(scores)
            .map(|(&i, score)| ScoreEntry {
                score,
                label: dataset.samples[i].label,
                domain: dataset.samples[i].domain,
            })
            .collect(),
    )
}

/// Scores every sample of `target` and summarizes them under `rule`.
/// `dev` holds source-domain dev indices for the `eer-dev` rule.
pub fn evaluate_fold<S: Scorer + ?Sized>(
    model: &S,
    dataset: &Dataset,
    target: usize,
    sources: &[usize],
    rule: ThresholdRule,
    dev: &[usize],
) -> Result<(ScoreSet, MetricsReport)> {
    if sources.contains(&target) {
        return Err(Error::Protocol(format!(
            "target domain `{}` is also a source",
            dataset.domains[target]
        )));
    }
    let indices: Vec<usize> = (0..dataset.samples.len())
        .filter(|&i| dataset.samples[i].domain == target)
        .collect();
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "target domain `{}` has no samples",
            dataset.domains[target]
        )));
    }
    let scores = score_samples(model, dataset, &indices)?;
    let dev_scores = match rule {
        ThresholdRule::EerDev => Some(score_samples(model, dataset, dev)?),
        _ => None,
    };
    let report = MetricsReport::compute(&scores, rule, dev_scores.as_ref())?;
    Ok((scores, report))
}
