use std::f64::consts::TAU;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, LabeledFace};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Per-domain nuisances: capture conditions that change with the dataset
/// but say nothing about liveness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomainSpec {
    pub name: String,
    /// Background hue in `[0, 1)`.
    pub background_hue: f64,
    /// Multiplicative RGB gains.
    pub channel_gains: [f64; 3],
    /// Direction of the linear illumination ramp, radians (y down).
    pub illumination_angle: f64,
    /// Brightness change across the image along that direction.
    pub illumination_strength: f64,
    /// Std of additive Gaussian sensor noise.
    pub noise_std: f64,
}

/// Spoof artifacts shared by every domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoofCue {
    /// Amplitude of the periodic print/screen pattern.
    pub amplitude: f64,
    /// Pattern period in pixels along x and y.
    pub period: f64,
    /// Box-blur radius in pixels; 0 disables blur.
    pub blur_radius: usize,
}

impl Default for SpoofCue {
    fn default() -> Self {
        SpoofCue {
            amplitude: 0.08,
            period: 2.0,
            blur_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSettings {
    pub image_size: usize,
    pub cue: SpoofCue,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            image_size: 32,
            cue: SpoofCue::default(),
        }
    }
}

impl SynthDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.background_hue,
            self.illumination_angle,
            self.illumination_strength,
            self.noise_std,
        ]
        .iter()
        .chain(&self.channel_gains)
        .all(|v| v.is_finite());
        if !finite || self.noise_std < 0.0 || self.channel_gains.iter().any(|&g| g <= 0.0) {
            return Err(Error::Config(format!("invalid synthetic domain `{}`", self.name)));
        }
        Ok(())
    }
}

/// `n` domains spread evenly over hue, color cast, light direction and
/// noise level, named `d0`, `d1`, ….
pub fn default_domains(n: usize) -> Vec<SynthDomainSpec> {
    (0..n)
        .map(|i| {
            let phase = TAU * i as f64 / n as f64;
            let gain = |shift: f64| 1.0 + 0.15 * (phase + shift).cos();
            SynthDomainSpec {
                name: format!("d{i}"),
                background_hue: (i as f64 + 0.5) / n as f64,
                channel_gains: [gain(0.0), gain(-TAU / 3.0), gain(TAU / 3.0)],
                illumination_angle: phase + 0.4,
                illumination_strength: 0.2 + 0.1 * (i % 2) as f64,
                noise_std: (0.006 + 0.004 * i as f64).min(0.02),
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Face-like content: a soft skin ellipse with darker eyes and mouth on a
/// flat background. Returns HWC RGB values.
fn face_content(size: usize, hue: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size as f64;
    let bg = hsv_to_rgb(hue + rng.random_range(-0.03..0.03), 0.35, 0.55);
    let tone = rng.random_range(0.85..1.05);
    let skin = [0.62 * tone, 0.48 * tone, 0.40 * tone];
    let cx = n / 2.0 + rng.random_range(-0.1..0.1) * n;
    let cy = n / 2.0 + rng.random_range(-0.1..0.1) * n;
    let ax = n * rng.random_range(0.26..0.32);
    let ay = n * rng.random_range(0.34..0.40);
    let features = [
        (cx - 0.4 * ax, cy - 0.2 * ay, 0.05 * n, 0.05 * n, 0.30),
        (cx + 0.4 * ax, cy - 0.2 * ay, 0.05 * n, 0.05 * n, 0.30),
        (cx, cy + 0.45 * ay, 0.14 * n, 0.035 * n, 0.25),
    ];
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho = (((px - cx) / ax).powi(2) + ((py - cy) / ay).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + (6.0 * (rho - 1.0)).exp());
            let shade: f64 = features
                .iter()
                .map(|&(fx, fy, sx, sy, depth)| {
                    depth * (-0.5 * (((px - fx) / sx).powi(2) + ((py - fy) / sy).powi(2))).exp()
                })
                .sum();
            for c in 0..3 {
                let face = skin[c] * (1.0 - shade);
                out.push(inside * face + (1.0 - inside) * bg[c]);
            }
        }
    }
    out
}

fn box_blur(data: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return data.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for t in -r..=r {
                        let (sx, sy) = if horizontal {
                            ((x + t).clamp(0, n - 1), y)
                        } else {
                            (x, (y + t).clamp(0, n - 1))
                        };
                        acc += src[((sy * n + sx) * 3 + c) as usize];
                    }
                    dst[((y * n + x) * 3 + c) as usize] = acc / (2 * r + 1) as f64;
                }
            }
        }
        dst
    };
    pass(&pass(data, true), false)
}

fn render(spec: &SynthDomainSpec, settings: &SynthSettings, label: Label, rng: &mut ChaCha8Rng) -> Result<Image> {
    let size = settings.image_size;
    let mut px = face_content(size, spec.background_hue, rng);
    if label == Label::Fake {
        let cue = settings.cue;
        px = box_blur(&px, size, cue.blur_radius);
        let w = TAU / cue.period;
        for y in 0..size {
            for x in 0..size {
                let p = cue.amplitude * (w * x as f64).cos() * (w * y as f64).cos();
                for c in 0..3 {
                    px[(y * size + x) * 3 + c] += p;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let (dir_x, dir_y) = (spec.illumination_angle.cos(), spec.illumination_angle.sin());
    let mut data = Vec::with_capacity(px.len());
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64 - 0.5;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let light = 1.0 + spec.illumination_strength * (dir_x * u + dir_y * v);
            for c in 0..3 {
                let value = px[(y * size + x) * 3 + c] * spec.channel_gains[c] * light + noise.sample(rng);
                data.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(size, size, 3, data)
}

/// Generates `n_real` real then `n_fake` fake faces of one domain. Each
/// sample draws from its own stream seeded by `rng`, so samples can be
/// produced independently.
pub fn generate_domain<R: RngCore + ?Sized>(
    spec: &SynthDomainSpec,
    settings: &SynthSettings,
    domain: usize,
    n_real: usize,
    n_fake: usize,
    rng: &mut R,
) -> Result<Vec<LabeledFace>> {
    spec.validate()?;
    if settings.image_size == 0
        || settings.cue.period.is_nan()
        || settings.cue.period <= 0.0
        || !settings.cue.amplitude.is_finite()
    {
        return Err(Error::Config("invalid synthetic generator settings".into()));
    }
    let labels = std::iter::repeat_n(Label::Real, n_real).chain(std::iter::repeat_n(Label::Fake, n_fake));
    labels
        .map(|label| {
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let image = render(spec, settings, label, &mut sample_rng)?;
            Ok(LabeledFace { image, label, domain })
        })
        .collect()
}
