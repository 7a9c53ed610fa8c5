//! Convolution-flavoured vision transformer: patch embedding, early GPSA
//! blocks, late plain self-attention blocks, a final layer norm, and mean
//! pooling over patches.

mod attention;
mod patch;
mod relpos;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, LayerNorm, Linear, Mlp, ParamStore};
use crate::raster::Image;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use attention::{
    gpsa_attention, init_locality, positional_scores, vanilla_attention, AttentionOptions, AttentionOutput,
    AttentionParams, GpsaParams, PositionalGate,
};
pub use patch::PatchGrid;
pub use relpos::{spiral_offsets, RelPosEncoding};

fn default_image_size() -> usize {
    32
}
fn default_patch_size() -> usize {
    8
}
fn default_channels() -> usize {
    3
}
fn default_embed_dim() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_gpsa_blocks() -> usize {
    2
}
fn default_sa_blocks() -> usize {
    2
}
fn default_mlp_ratio() -> usize {
    2
}
fn default_locality_strength() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_gpsa_blocks")]
    pub n_gpsa_blocks: usize,
    #[serde(default = "default_sa_blocks")]
    pub n_sa_blocks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// `α` of the locality initialization.
    #[serde(default = "default_locality_strength")]
    pub locality_strength: f64,
    /// Per-head locality centers `Δ_h`; a centered spiral when absent.
    #[serde(default)]
    pub locality_offsets: Option<Vec<[i32; 2]>>,
    /// Scale content scores by `1/√d_h`.
    #[serde(default = "default_true")]
    pub scale_content: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: default_image_size(),
            patch_size: default_patch_size(),
            channels: default_channels(),
            embed_dim: default_embed_dim(),
            heads: default_heads(),
            n_gpsa_blocks: default_gpsa_blocks(),
            n_sa_blocks: default_sa_blocks(),
            mlp_ratio: default_mlp_ratio(),
            locality_strength: default_locality_strength(),
            locality_offsets: None,
            scale_content: true,
        }
    }
}

impl BackboneConfig {
    /// 16×16 images in 4×4 patches, d = 8, two heads, one block of each kind.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            heads: 2,
            n_gpsa_blocks: 1,
            n_sa_blocks: 1,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.image_size, self.patch_size, self.channels, self.embed_dim)?;
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if self.n_gpsa_blocks == 0 {
            return Err(Error::Config("n_gpsa_blocks must be at least 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !self.locality_strength.is_finite() || self.locality_strength < 0.0 {
            return Err(Error::Config(
                "locality_strength must be finite and non-negative".into(),
            ));
        }
        let offsets = self.offsets();
        if offsets.len() != self.heads {
            return Err(Error::Config(format!(
                "{} locality offsets configured for {} heads",
                offsets.len(),
                self.heads
            )));
        }
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != offsets.len() {
            return Err(Error::Config("locality offsets must be distinct per head".into()));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<(i32, i32)> {
        match &self.locality_offsets {
            Some(list) => list.iter().map(|o| (o[0], o[1])).collect(),
            None => spiral_offsets(self.heads),
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.patch_size, self.channels, self.embed_dim)
    }
}

/// Pre-norm residual transformer block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn is_gpsa(&self) -> bool {
        self.attn.positional.is_some()
    }
}

/// Which attention the GPSA blocks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Configured,
    /// Every block runs plain self-attention on its own `W_Q/W_K/W_V/W_O`,
    /// ignoring positional gates. Reference path for the σ → 0 limit.
    AllVanilla,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Mean-pooled features, `[B × d]`.
    pub features: Var,
    /// Patch embeddings before the first block, `[B·P × d]`.
    pub patch_embeddings: Var,
    /// One entry per block, in order.
    pub attention: Vec<AttentionOutput>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    grid: PatchGrid,
    rel: RelPosEncoding,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Backbone {
    /// Registers all backbone parameters in `store` under `backbone.*` and
    /// applies the locality initialization to the GPSA layers.
    pub fn new<T: Real, R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, "backbone.patch_embed", grid.patch_dim(), d, true, rng);
        let offsets = cfg.offsets();
        let mut blocks = Vec::with_capacity(cfg.n_gpsa_blocks + cfg.n_sa_blocks);
        for b in 0..cfg.n_gpsa_blocks + cfg.n_sa_blocks {
            let gated = b < cfg.n_gpsa_blocks;
            let name = format!("backbone.block{b}");
            let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
            let attn = AttentionParams::new(store, &format!("{name}.attn"), d, cfg.heads, gated, rng)?;
            if gated {
                init_locality(store, &attn, cfg.locality_strength, &offsets)?;
            }
            let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
            let mlp = Mlp::new(store, &format!("{name}.mlp"), (d, d * cfg.mlp_ratio, d), rng);
            blocks.push(Block {
                norm1,
                attn,
                norm2,
                mlp,
            });
        }
        let norm = LayerNorm::new(store, "backbone.norm", d);
        Ok(Backbone {
            cfg: cfg.clone(),
            grid,
            rel: RelPosEncoding::new(&grid),
            patch_embed,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn rel_pos(&self) -> &RelPosEncoding {
        &self.rel
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn gpsa_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.is_gpsa())
    }

    fn options(&self) -> AttentionOptions {
        AttentionOptions {
            scale_content: self.cfg.scale_content,
        }
    }

    /// Linear embedding of every patch, `[B·P × d]`.
    pub fn patch_embed<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let patches = self.grid.extract::<T>(images)?;
        let x = tape.constant(patches);
        Ok(self.patch_embed.forward(tape, bound, x)?)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &[&Image],
        mode: AttentionMode,
    ) -> Result<BackboneOutput> {
        let groups = images.len();
        let patches = self.grid.num_patches();
        let embedded = self.patch_embed(tape, bound, images)?;
        let rel = tape.constant(self.rel.to_tensor());
        let opts = self.options();

        let mut x = embedded;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h = block.norm1.forward(tape, bound, x)?;
            let att = match (block.is_gpsa(), mode) {
                (true, AttentionMode::Configured) => {
                    gpsa_attention(tape, bound, &block.attn, rel, h, groups, patches, opts)?
                }
                _ => vanilla_attention(tape, bound, &block.attn, h, groups, patches, opts)?,
            };
            x = tape.add(x, att.output)?;
            let h = block.norm2.forward(tape, bound, x)?;
            let h = block.mlp.forward(tape, bound, h)?;
            x = tape.add(x, h)?;
            attention.push(att);
        }
        let x = self.norm.forward(tape, bound, x)?;
        let features = tape.mean_rows(x, groups)?;
        Ok(BackboneOutput {
            features,
            patch_embeddings: embedded,
            attention,
        })
    }

    /// Pooled feature vector `[d]` of a single image, without gradients.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, image: &Image) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, &[image], AttentionMode::Configured)?;
        Ok(tape.value(out.features).clone().reshaped(&[self.cfg.embed_dim])?)
    }
}
