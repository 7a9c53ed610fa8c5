//! Multi-head self-attention, plain and with gated positional scores.
//!
//! Inputs are batched as `[B·P × d]` row stacks; `groups = B` tells the
//! attention products where one image's patches end and the next begin.

use rand::Rng;

use super::relpos::RelPosEncoding;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Learned positional scoring and gate for one GPSA layer.
#[derive(Debug, Clone, Copy)]
pub struct PositionalGate {
    /// `[heads × 3]`, one `v_pos` per head.
    pub v_pos: ParamId,
    /// `[heads]`, gate logits `λ_h`; `σ_h = logistic(λ_h)`.
    pub gate: ParamId,
}

/// Projection weights of one attention layer. Per-head `W_Q`, `W_K`, `W_V`
/// are the column blocks `h·d_h..(h+1)·d_h` of the stored `d × d` matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Linear,
    pub positional: Option<PositionalGate>,
}

/// A GPSA layer is an attention layer carrying a positional gate.
pub type GpsaParams = AttentionParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Scale content scores by `1/√d_h`.
    pub scale_content: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions { scale_content: true }
    }
}

/// Output of one attention layer plus the per-head matrices that produced it.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    /// Final row-stochastic attention `A` per head, `[B·P × P]`.
    pub maps: Vec<Var>,
    /// Content attention `softmax(QKᵀ)` per head, `[B·P × P]`.
    pub content: Vec<Var>,
    /// Positional attention `softmax(v_posᵀ r)` per head, `[P × P]` (GPSA only).
    pub positional: Vec<Var>,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide embed_dim {dim}")));
        }
        let proj = |store: &mut ParamStore<T>, suffix: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{suffix}"), dim, dim, false, rng).weight
        };
        let w_q = proj(store, "q", rng);
        let w_k = proj(store, "k", rng);
        let w_v = proj(store, "v", rng);
        let w_o = Linear::new(store, &format!("{name}.o"), dim, dim, true, rng);
        let positional = gated.then(|| PositionalGate {
            v_pos: store.insert(format!("{name}.v_pos"), Tensor::zeros(&[heads, 3])),
            gate: store.insert(format!("{name}.gate"), Tensor::full(&[heads], T::one())),
        });
        Ok(AttentionParams {
            dim,
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            positional,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn check_input<T: Real>(tape: &Tape<T>, x: Var, dim: usize, groups: usize, patches: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim || shape[0] != groups * patches {
        return Err(Error::Tensor(crate::error::TensorError::Shape {
            op: "attention",
            lhs: shape.to_vec(),
            rhs: vec![groups * patches, dim],
        }));
    }
    Ok(())
}

struct Projections {
    q: Var,
    k: Var,
    v: Var,
}

fn project<T: Real>(tape: &mut Tape<T>, bound: &Bound, p: &AttentionParams, x: Var) -> Result<Projections> {
    Ok(Projections {
        q: tape.matmul(x, bound.var(p.w_q))?,
        k: tape.matmul(x, bound.var(p.w_k))?,
        v: tape.matmul(x, bound.var(p.w_v))?,
    })
}

fn content_attention<T: Real>(
    tape: &mut Tape<T>,
    proj: &Projections,
    head: usize,
    dh: usize,
    groups: usize,
    opts: AttentionOptions,
) -> Result<(Var, Var)> {
    let qh = tape.slice_cols(proj.q, head * dh, dh)?;
    let kh = tape.slice_cols(proj.k, head * dh, dh)?;
    let vh = tape.slice_cols(proj.v, head * dh, dh)?;
    let mut scores = tape.group_matmul(qh, kh, groups, true)?;
    if opts.scale_content {
        scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
    }
    Ok((tape.softmax_rows(scores)?, vh))
}

/// Standard multi-head self-attention: `A = softmax(QKᵀ/√d_h)` per head.
pub fn vanilla_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    params: &AttentionParams,
    x: Var,
    groups: usize,
    patches: usize,
    opts: AttentionOptions,
) -> Result<AttentionOutput> {
    check_input(tape, x, params.dim, groups, patches)?;
    let dh = params.head_dim();
    let proj = project(tape, bound, params, x)?;
    let mut heads = Vec::with_capacity(params.heads);
    let mut maps = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (a, vh) = content_attention(tape, &proj, h, dh, groups, opts)?;
        heads.push(tape.group_matmul(a, vh, groups, false)?);
        maps.push(a);
    }
    let cat = tape.concat_cols(&heads)?;
    let output = params.w_o.forward(tape, bound, cat)?;
    Ok(AttentionOutput {
        output,
        content: maps.clone(),
        maps,
        positional: Vec::new(),
    })
}

/// Gated positional self-attention.
///
/// Per head: `C = softmax(QKᵀ/√d_h)`, `Pos = softmax(s)` with
/// `s_ij = v_posᵀ r_ij`, `A = (1−σ)·C + σ·Pos`, rows of `A` re-normalized,
/// head output `A·(X W_V)`. Heads are concatenated and projected by `W_O`.
#[allow(clippy::too_many_arguments)]
pub fn gpsa_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    params: &GpsaParams,
    rel: Var,
    x: Var,
    groups: usize,
    patches: usize,
    opts: AttentionOptions,
) -> Result<AttentionOutput> {
    let gate = params
        .positional
        .ok_or_else(|| Error::Config("gpsa_attention needs a positional gate".into()))?;
    check_input(tape, x, params.dim, groups, patches)?;
    if tape.shape(rel) != [patches * patches, 3] {
        return Err(Error::Tensor(crate::error::TensorError::Shape {
            op: "gpsa_attention",
            lhs: tape.shape(rel).to_vec(),
            rhs: vec![patches * patches, 3],
        }));
    }
    let dh = params.head_dim();
    let proj = project(tape, bound, params, x)?;

    // [P² × heads]: column h holds s_ij = v_pos_hᵀ r_ij for every (i, j).
    let pos_scores = tape.group_matmul(rel, bound.var(gate.v_pos), 1, true)?;
    let sigma = tape.logistic(bound.var(gate.gate))?;
    let sigma = tape.reshape(sigma, &[1, params.heads])?;

    let mut heads = Vec::with_capacity(params.heads);
    let mut maps = Vec::with_capacity(params.heads);
    let mut content = Vec::with_capacity(params.heads);
    let mut positional = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (c, vh) = content_attention(tape, &proj, h, dh, groups, opts)?;

        let s = tape.slice_cols(pos_scores, h, 1)?;
        let s = tape.reshape(s, &[patches, patches])?;
        let pos = tape.softmax_rows(s)?;
        let pos_tiled = if groups > 1 { tape.tile_rows(pos, groups)? } else { pos };

        let sigma_h = tape.slice_cols(sigma, h, 1)?;
        let keep = tape.affine(sigma_h, -T::one(), T::one())?;
        let c_part = tape.mul(c, keep)?;
        let p_part = tape.mul(pos_tiled, sigma_h)?;
        let blended = tape.add(c_part, p_part)?;
        let a = tape.normalize_rows(blended)?;

        heads.push(tape.group_matmul(a, vh, groups, false)?);
        maps.push(a);
        content.push(c);
        positional.push(pos);
    }
    let cat = tape.concat_cols(&heads)?;
    let output = params.w_o.forward(tape, bound, cat)?;
    Ok(AttentionOutput {
        output,
        maps,
        content,
        positional,
    })
}

/// Sets each head's positional scoring to peak at its offset `Δ_h`:
/// `v_pos = −α·(1, −2Δx, −2Δy)`, so `s_ij = −α(‖δ_ij − Δ_h‖² − ‖Δ_h‖²)`.
/// Gate logits are reset to 1 (`σ ≈ 0.731`, positional-dominant).
pub fn init_locality<T: Real>(
    store: &mut ParamStore<T>,
    params: &GpsaParams,
    alpha: f64,
    offsets: &[(i32, i32)],
) -> Result<()> {
    let gate = params
        .positional
        .ok_or_else(|| Error::Config("init_locality needs a GPSA layer".into()))?;
    if offsets.len() != params.heads {
        return Err(Error::Config(format!(
            "{} locality offsets for {} heads",
            offsets.len(),
            params.heads
        )));
    }
    let v_pos = store.get_mut(gate.v_pos).data_mut();
    for (h, &(dx, dy)) in offsets.iter().enumerate() {
        v_pos[h * 3] = T::lit(-alpha);
        v_pos[h * 3 + 1] = T::lit(2.0 * alpha * dx as f64);
        v_pos[h * 3 + 2] = T::lit(2.0 * alpha * dy as f64);
    }
    store
        .get_mut(gate.gate)
        .data_mut()
        .iter_mut()
        .for_each(|g| *g = T::one());
    Ok(())
}

/// Positional scores `s_ij` for one head, evaluated directly from the table.
pub fn positional_scores(rel: &RelPosEncoding, v_pos: [f64; 3]) -> Vec<f64> {
    let n = rel.num_patches();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let r = rel.get(i, j);
            out.push(v_pos[0] * r[0] + v_pos[1] * r[1] + v_pos[2] * r[2]);
        }
    }
    out
}
