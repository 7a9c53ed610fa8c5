use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabelGrid, LabeledFace};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Axis-aligned pasted rectangle, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub image: Image,
    /// `Y_c`, always a grid point `j/K`.
    pub label: f64,
    /// `j` with `label = j/K`.
    pub level: usize,
    pub domain: usize,
    pub cut: Option<CutBox>,
}

impl CompositeSample {
    /// A pure sample, real → 1 and fake → 0.
    pub fn pure(face: &LabeledFace, grid: LabelGrid) -> Self {
        let level = match face.label {
            Label::Real => grid.k(),
            Label::Fake => 0,
        };
        CompositeSample {
            image: face.image.clone(),
            label: grid.value(level),
            level,
            domain: face.domain,
            cut: None,
        }
    }
}

/// How `m_l` is drawn from the grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSampling {
    #[default]
    Uniform,
    /// Unnormalized weight per grid point, `K + 1` entries.
    Weights(Vec<f64>),
}

impl LevelSampling {
    pub fn validate(&self, grid: LabelGrid) -> Result<()> {
        if let LevelSampling::Weights(w) = self {
            if w.len() != grid.len() {
                return Err(Error::Config(format!(
                    "{} level weights given for a grid of {} points",
                    w.len(),
                    grid.len()
                )));
            }
            WeightedIndex::new(w).map_err(|e| Error::Config(format!("level weights: {e}")))?;
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, grid: LabelGrid, rng: &mut R) -> Result<usize> {
        match self {
            LevelSampling::Uniform => Ok(rng.random_range(0..grid.len())),
            LevelSampling::Weights(w) => {
                self.validate(grid)?;
                let dist = WeightedIndex::new(w).map_err(|e| Error::Config(format!("level weights: {e}")))?;
                Ok(dist.sample(rng))
            }
        }
    }
}

/// Nearest grid index to the real-pixel fraction `real / total`, ties
/// toward the smaller index. Exact integer arithmetic.
pub fn snap_real_fraction(real: usize, total: usize, k: usize) -> usize {
    let scaled = k * real;
    let j = scaled / total;
    let rem = scaled - j * total;
    if 2 * rem > total {
        j + 1
    } else {
        j
    }
}

fn check_pair(real: &LabeledFace, fake: &LabeledFace) -> Result<()> {
    if !real.image.same_dims(&fake.image) {
        return Err(Error::Composition(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            real.image.height(),
            real.image.width(),
            real.image.channels(),
            fake.image.height(),
            fake.image.width(),
            fake.image.channels()
        )));
    }
    if real.domain != fake.domain {
        return Err(Error::Composition(format!(
            "sources come from different domains ({} and {})",
            real.domain, fake.domain
        )));
    }
    if real.label != Label::Real || fake.label != Label::Fake {
        return Err(Error::Composition("expected one real and one fake source".into()));
    }
    Ok(())
}

/// Composite at a fixed target level `m = level / K`: a fake rectangle
/// covering about `1 − m` of the image is pasted onto the real image at a
/// uniform position, and the label is snapped to the realized real fraction.
pub fn cutmix_at_level<R: Rng + ?Sized>(
    real: &LabeledFace,
    fake: &LabeledFace,
    grid: LabelGrid,
    level: usize,
    rng: &mut R,
) -> Result<CompositeSample> {
    check_pair(real, fake)?;
    if level > grid.k() {
        return Err(Error::Composition(format!(
            "level {level} is off a grid of K = {}",
            grid.k()
        )));
    }
    if level == grid.k() {
        return Ok(CompositeSample::pure(real, grid));
    }
    if level == 0 {
        return Ok(CompositeSample::pure(fake, grid));
    }
    let (height, width) = (real.image.height(), real.image.width());
    let total = height * width;
    let fake_frac = 1.0 - grid.value(level);
    let w = ((fake_frac.sqrt() * width as f64).round() as usize).clamp(1, width);
    let h = ((fake_frac * total as f64 / w as f64).round() as usize).clamp(1, height);
    let cut = CutBox {
        x0: rng.random_range(0..=width - w),
        y0: rng.random_range(0..=height - h),
        w,
        h,
    };
    let mut image = real.image.clone();
    let c = image.channels();
    for y in cut.y0..cut.y0 + h {
        let start = image.index(y, cut.x0, 0);
        let end = start + w * c;
        image.data_mut()[start..end].copy_from_slice(&fake.image.data()[start..end]);
    }
    let snapped = snap_real_fraction(total - cut.area(), total, grid.k());
    Ok(CompositeSample {
        image,
        label: grid.value(snapped),
        level: snapped,
        domain: real.domain,
        cut: Some(cut),
    })
}

/// Draws `m_l` uniformly from the grid and composites accordingly.
pub fn cutmix_discretize<R: Rng + ?Sized>(
    real: &LabeledFace,
    fake: &LabeledFace,
    grid: LabelGrid,
    rng: &mut R,
) -> Result<CompositeSample> {
    check_pair(real, fake)?;
    let level = LevelSampling::Uniform.sample(grid, rng)?;
    cutmix_at_level(real, fake, grid, level, rng)
}
