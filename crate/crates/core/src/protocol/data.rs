use std::cell::RefCell;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::synth::{
    generate_domain, ingest_directory, CompositeSample, Dataset, LabelGrid, LabeledFace, SynthSettings,
};

/// Stream ids for seeds derived from the global seed.
const DATA_STREAM: u64 = 1 << 32;
const SPLIT_STREAM: u64 = 2 << 32;

/// Seed for fold `fold_index`, independent of every other fold.
pub fn fold_seed(global: u64, fold_index: usize) -> u64 {
    derived_seed(global, fold_index as u64)
}

fn derived_seed(global: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(global);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Generates (or ingests) every configured domain. Generated domains draw
/// from their own derived stream, so one domain's samples do not depend on
/// which other domains exist.
pub fn load_dataset(cfg: &ModelConfig) -> Result<Dataset> {
    let dataset = match &cfg.data.ingest {
        Some(path) => {
            let ingested = ingest_directory(path)?;
            for w in &ingested.warnings {
                eprintln!("warning: {w}");
            }
            ingested.dataset
        }
        None => {
            let settings = SynthSettings {
                image_size: cfg.backbone.image_size,
                cue: cfg.data.cue,
            };
            let mut dataset = Dataset::default();
            for (i, spec) in cfg.data.synth_domains().iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.optimizer.seed, DATA_STREAM + i as u64));
                let faces = generate_domain(spec, &settings, i, cfg.data.n_real, cfg.data.n_fake, &mut rng)?;
                dataset.domains.push(spec.name.clone());
                dataset.samples.extend(faces);
            }
            dataset
        }
    };
    cfg.check_names(&dataset.domains)?;
    Ok(dataset)
}

/// Per-domain, per-label train and dev index lists into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// `train[domain][label]`.
    pub train: Vec<[Vec<usize>; 2]>,
    pub dev: Vec<[Vec<usize>; 2]>,
}

impl Splits {
    pub fn new(dataset: &Dataset, dev_fraction: f64, seed: u64) -> Self {
        let n = dataset.domains.len();
        let mut train = vec![[Vec::new(), Vec::new()]; n];
        let mut dev = vec![[Vec::new(), Vec::new()]; n];
        for (i, s) in dataset.samples.iter().enumerate() {
            train[s.domain][s.label as usize].push(i);
        }
        for d in 0..n {
            for l in 0..2 {
                let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, SPLIT_STREAM + (d * 2 + l) as u64));
                let pool = &mut train[d][l];
                pool.shuffle(&mut rng);
                let n_dev = (pool.len() as f64 * dev_fraction).floor() as usize;
                let n_dev = n_dev.min(pool.len().saturating_sub(1));
                dev[d][l] = pool.drain(..n_dev).collect();
                dev[d][l].sort_unstable();
                pool.sort_unstable();
            }
        }
        Splits { train, dev }
    }

    pub fn dev_indices(&self, domains: &[usize]) -> Vec<usize> {
        domains
            .iter()
            .flat_map(|&d| self.dev[d].iter().flatten().copied())
            .collect()
    }
}

/// Dataset wrapper counting sample reads per domain.
#[derive(Debug)]
pub struct AuditedDataset<'a> {
    inner: &'a Dataset,
    reads: RefCell<Vec<usize>>,
}

impl<'a> AuditedDataset<'a> {
    pub fn new(inner: &'a Dataset) -> Self {
        AuditedDataset {
            inner,
            reads: RefCell::new(vec![0; inner.domains.len()]),
        }
    }

    pub fn get(&self, index: usize) -> &'a LabeledFace {
        let face = &self.inner.samples[index];
        self.reads.borrow_mut()[face.domain] += 1;
        face
    }

    pub fn domains(&self) -> &'a [String] {
        &self.inner.domains
    }

    /// Reads per domain so far.
    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }

    pub fn reset(&self) {
        self.reads.borrow_mut().iter_mut().for_each(|r| *r = 0);
    }
}

/// One training batch: images, grid labels and source-domain positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<CompositeSample>,
    /// Position of each sample's domain within the fold's source list.
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Domain-balanced sampler over the training pools of the source domains.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sources: Vec<usize>,
    per_domain: usize,
    grid: LabelGrid,
    p_mix: f64,
    level_sampling: crate::synth::LevelSampling,
}

impl BatchSampler {
    pub fn new(cfg: &ModelConfig, sources: &[usize]) -> Result<Self> {
        let per_domain = cfg.optimizer.batch_size / sources.len().max(1);
        if per_domain == 0 {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than the number of source domains {}",
                cfg.optimizer.batch_size,
                sources.len()
            )));
        }
        Ok(BatchSampler {
            sources: sources.to_vec(),
            per_domain,
            grid: cfg.heads.grid()?,
            p_mix: cfg.data.p_mix,
            level_sampling: cfg.data.level_sampling.clone(),
        })
    }

    /// Effective batch size, `per_domain × sources`.
    pub fn batch_size(&self) -> usize {
        self.per_domain * self.sources.len()
    }

    pub fn sample<R: Rng>(&self, data: &AuditedDataset, splits: &Splits, rng: &mut R) -> Result<Batch> {
        let mut samples = Vec::with_capacity(self.batch_size());
        let mut domains = Vec::with_capacity(self.batch_size());
        for (pos, &d) in self.sources.iter().enumerate() {
            let [fakes, reals] = &splits.train[d];
            if fakes.is_empty() || reals.is_empty() {
                return Err(Error::Data(format!(
                    "source domain `{}` has no training images of one class",
                    data.domains()[d]
                )));
            }
            for _ in 0..self.per_domain {
                let sample = if rng.random::<f64>() < self.p_mix {
                    let real = data.get(reals[rng.random_range(0..reals.len())]);
                    let fake = data.get(fakes[rng.random_range(0..fakes.len())]);
                    let level = self.level_sampling.sample(self.grid, rng)?;
                    crate::synth::cutmix_at_level(real, fake, self.grid, level, rng)?
                } else {
                    let pool = if rng.random::<bool>() { reals } else { fakes };
                    CompositeSample::pure(data.get(pool[rng.random_range(0..pool.len())]), self.grid)
                };
                samples.push(sample);
                domains.push(pos);
            }
        }
        Ok(Batch { samples, domains })
    }
}
