use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result, TensorError};
use crate::heads::{adversarial_loss, final_loss, regression_loss};
use crate::params::Bound;
use crate::raster::Image;
use crate::tensor::{check_gradients_against, GradCheckConfig, GradCheckReport, Tape, Var};

fn tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::invalid("grad_check", other.to_string()),
    }
}

/// Finite-difference check of the full training objective, backbone and
/// both heads with gradient reversal, in double precision.
///
/// The tape gradient of `L_reg + w·L_adv` is compared per parameter with
/// the objective that parameter effectively descends: `L_reg − λ·w·L_adv`
/// for the backbone and `L_reg + w·L_adv` for the heads.
pub fn composed_gradient_check(
    cfg: &ModelConfig,
    n_images: usize,
    n_sources: usize,
    gc: GradCheckConfig,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    let model = Model::<f64>::new(cfg, n_sources, &mut rng)?;
    let b = &cfg.backbone;
    let images: Vec<Image> = (0..n_images)
        .map(|_| {
            let data = (0..b.image_size * b.image_size * b.channels)
                .map(|_| rng.random::<f32>())
                .collect();
            Image::new(b.image_size, b.image_size, b.channels, data)
        })
        .collect::<Result<_>>()?;
    let grid = cfg.heads.grid()?;
    let labels: Vec<f64> = (0..n_images).map(|i| grid.value(i % grid.len())).collect();
    let domains: Vec<usize> = (0..n_images).map(|i| i % n_sources).collect();
    let lambda = cfg.heads.lambda_grl;
    let w = cfg.heads.w_adv;
    let reduction = cfg.heads.reg_reduction.into();

    let losses = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<(Var, Var)> {
        let bound = Bound::from_vars(vars.to_vec());
        let refs: Vec<&Image> = images.iter().collect();
        let fwd = model.forward(tape, &bound, &refs)?;
        let l_reg = regression_loss(tape, fwd.scores, &labels, reduction)?;
        let l_adv = adversarial_loss(tape, &bound, &model.discriminator, fwd.features, &domains, lambda)?;
        Ok((l_reg, l_adv))
    };
    let is_backbone: Vec<bool> = model
        .store
        .iter()
        .map(|(_, name, _)| name.starts_with("backbone."))
        .collect();
    let report = check_gradients_against(
        |tape, vars| {
            let (r, a) = losses(tape, vars).map_err(tensor_error)?;
            final_loss(tape, r, a, w).map_err(tensor_error)
        },
        |tape, vars, param| {
            let (r, a) = losses(tape, vars).map_err(tensor_error)?;
            let sign = if is_backbone[param] { -lambda * w } else { w };
            let a = tape.scale(a, sign)?;
            tape.add(r, a)
        },
        model.store.tensors(),
        gc,
    )?;
    Ok(report)
}
