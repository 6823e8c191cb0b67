//! The denoising network: a token-space UNet built from Mamba blocks,
//! plus the structure encoder that injects anatomy into each encoder
//! stage by elementwise addition.
//!
//! Layout conventions: images are (B, C, H, W); tokens are (B, L, C)
//! over a square patch grid in row-major order. Down-sampling merges
//! 2x2 token neighborhoods and projects 4C -> 2C, so stage `s` runs at
//! `base_channels * 2^s` channels on a grid shrunk by `2^s`;
//! up-sampling expands C -> 2C and un-merges back, halving the channel
//! count per level. Skip connections concatenate encoder features and
//! project back to the stage width.

mod layers;

pub use layers::{LayerNorm, Linear, MambaBlock, PatchEmbed};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the denoiser and structure encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub base_channels: usize,
    /// Number of 2x down-samplings (the bottleneck sits one level
    /// below the last encoder stage).
    pub depth: usize,
    /// Branch expansion factor inside each Mamba block.
    pub expand: usize,
    pub n_state: usize,
    pub time_embed_dim: usize,
    pub conv_kernel: usize,
    pub in_channels: usize,
    /// Structure image channels: intensity + PTV + one per organ.
    pub cond_channels: usize,
}

impl UNetConfig {
    /// Desk-scale default: 64x64 inputs, CPU-friendly.
    pub fn desk() -> UNetConfig {
        UNetConfig {
            image_size: 64,
            patch_size: 4,
            base_channels: 16,
            depth: 4,
            expand: 2,
            n_state: 8,
            time_embed_dim: 64,
            conv_kernel: 4,
            in_channels: 1,
            cond_channels: 5,
        }
    }

    /// Minimal configuration for finite-difference testing.
    pub fn tiny() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            patch_size: 2,
            base_channels: 4,
            depth: 2,
            expand: 2,
            n_state: 4,
            time_embed_dim: 8,
            conv_kernel: 4,
            in_channels: 1,
            cond_channels: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = self.patch_size << self.depth;
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be divisible by patch_size * 2^depth = {}",
                self.image_size, div
            )));
        }
        if self.base_channels == 0 || self.depth == 0 || self.expand == 0 || self.n_state == 0 {
            return Err(Error::InvalidConfig(
                "base_channels, depth, expand and n_state must be positive".into(),
            ));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "time_embed_dim must be positive and even".into(),
            ));
        }
        if self.in_channels == 0 || self.cond_channels < 3 {
            return Err(Error::InvalidConfig(
                "in_channels must be positive and cond_channels at least 3 (intensity + target + 1 organ)".into(),
            ));
        }
        Ok(())
    }

    /// Token grid extent at the patch-embedding level.
    pub fn token_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Tokens per side at encoder stage `s` (down-sampled by 2^s).
    pub fn stage_grid(&self, stage: usize) -> usize {
        self.token_grid() >> stage
    }

    fn conv_kernel_at(&self, grid: usize) -> usize {
        self.conv_kernel.min(grid * grid)
    }
}

/// Sinusoidal embedding of a discrete diffusion step.
///
/// The first half holds sines, the second cosines, over
/// geometrically spaced frequencies; t = 0 maps to all-zero sines and
/// all-one cosines, and distinct steps give distinct vectors.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Result<Vec<f64>> {
    if t >= t_max {
        return Err(Error::TimeStepOutOfRange { t, limit: t_max });
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

/// Stacks per-sample step embeddings into a (B, dim) tensor.
pub fn time_embedding_batch(ts: &[usize], t_max: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, t_max, dim)?);
    }
    Tensor::new(data, &[ts.len(), dim])
}

/// Per-stage anatomy features, one tensor per encoder stage with the
/// matching (B, L_s, C_s) shape.
pub type StructureFeatures = Vec<Tensor>;

/// Encoder-only tower over the structure image; mirrors the
/// denoiser's encoder path (same widths and grids) and emits one
/// feature map per stage for additive fusion.
#[derive(Debug)]
pub struct StructureEncoder {
    pub config: UNetConfig,
    patch_embed: PatchEmbed,
    blocks: Vec<MambaBlock>,
    downs: Vec<Linear>,
}

impl StructureEncoder {
    pub fn init(config: &UNetConfig, rng: &mut ChaCha20Rng) -> Result<StructureEncoder> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut downs = Vec::new();
        for s in 0..config.depth {
            let c = config.stage_channels(s);
            let grid = config.stage_grid(s);
            blocks.push(MambaBlock::init(
                c,
                config.expand,
                config.n_state,
                config.conv_kernel_at(grid),
                None,
                rng,
            )?);
            if s + 1 < config.depth {
                downs.push(Linear::init(4 * c, 2 * c, rng)?);
            }
        }
        Ok(StructureEncoder {
            config: config.clone(),
            patch_embed: PatchEmbed::init(
                config.patch_size,
                config.cond_channels,
                config.base_channels,
                rng,
            )?,
            blocks,
            downs,
        })
    }

    /// (B, 2+O, H, W) -> one (B, L_s, C_s) feature map per stage.
    pub fn forward(&self, cond: &Tensor) -> Result<StructureFeatures> {
        if cond.shape().len() != 4 || cond.shape()[1] != self.config.cond_channels {
            return Err(Error::InvalidShape {
                op: "structure_encoder",
                shape: cond.shape().to_vec(),
                reason: format!(
                    "expected {} channels (2 + O organs)",
                    self.config.cond_channels
                ),
            });
        }
        let mut x = self.patch_embed.forward(cond)?;
        let mut grid = self.config.token_grid();
        let mut feats = Vec::with_capacity(self.config.depth);
        for s in 0..self.config.depth {
            x = self.blocks[s].forward(&x, None)?;
            feats.push(x.clone());
            if s + 1 < self.config.depth {
                x = x.merge2x2(grid, grid)?;
                x = self.downs[s].forward(&x)?;
                grid /= 2;
            }
        }
        Ok(feats)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_embed
            .visit_params(&format!("{prefix}.patch_embed"), out);
        for (s, b) in self.blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.block{s}"), out);
        }
        for (s, d) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{s}"), out);
        }
    }
}

/// Noise-prediction UNet over tokens.
#[derive(Debug)]
pub struct MambaUnet {
    pub config: UNetConfig,
    patch_embed: PatchEmbed,
    enc_blocks: Vec<MambaBlock>,
    downs: Vec<Linear>,
    bottleneck: MambaBlock,
    ups: Vec<Linear>,
    skip_projs: Vec<Linear>,
    dec_blocks: Vec<MambaBlock>,
    out_proj: Linear,
}

impl MambaUnet {
    pub fn init(config: &UNetConfig, rng: &mut ChaCha20Rng) -> Result<MambaUnet> {
        config.validate()?;
        let td = Some(config.time_embed_dim);
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut skip_projs = Vec::new();
        let mut dec_blocks = Vec::new();
        for s in 0..config.depth {
            let c = config.stage_channels(s);
            let grid = config.stage_grid(s);
            let k = config.conv_kernel_at(grid);
            enc_blocks.push(MambaBlock::init(
                c,
                config.expand,
                config.n_state,
                k,
                td,
                rng,
            )?);
            downs.push(Linear::init(4 * c, 2 * c, rng)?);
            // decoder stage s receives stage s+1 channels from below
            ups.push(Linear::init(2 * c, 4 * c, rng)?);
            skip_projs.push(Linear::init(2 * c, c, rng)?);
            dec_blocks.push(MambaBlock::init(
                c,
                config.expand,
                config.n_state,
                k,
                td,
                rng,
            )?);
        }
        let bottom_c = config.stage_channels(config.depth);
        let bottom_grid = config.stage_grid(config.depth);
        let bottleneck = MambaBlock::init(
            bottom_c,
            config.expand,
            config.n_state,
            config.conv_kernel_at(bottom_grid),
            td,
            rng,
        )?;
        Ok(MambaUnet {
            config: config.clone(),
            patch_embed: PatchEmbed::init(
                config.patch_size,
                config.in_channels,
                config.base_channels,
                rng,
            )?,
            enc_blocks,
            downs,
            bottleneck,
            ups,
            skip_projs,
            dec_blocks,
            out_proj: Linear::init(
                config.base_channels,
                config.patch_size * config.patch_size * config.in_channels,
                rng,
            )?,
        })
    }

    /// Predicts the injected noise for `x_t` (B, 1, H, W) at the given
    /// time embeddings (B, time_embed_dim), optionally fusing one
    /// structure feature per encoder stage.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t_emb: &Tensor,
        feats: Option<&StructureFeatures>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, h, w) = (x_t.shape()[0], x_t.shape()[2], x_t.shape()[3]);
        if let Some(f) = feats {
            if f.len() != cfg.depth {
                return Err(Error::InvalidShape {
                    op: "mamba_unet",
                    shape: vec![f.len()],
                    reason: format!("expected {} structure feature stages", cfg.depth),
                });
            }
        }
        let mut x = self.patch_embed.forward(x_t)?;
        let mut grid = cfg.token_grid();
        let mut skips = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            x = self.enc_blocks[s].forward(&x, Some(t_emb))?;
            if let Some(f) = feats {
                if f[s].shape() != x.shape() {
                    return Err(Error::InvalidShape {
                        op: "mamba_unet",
                        shape: f[s].shape().to_vec(),
                        reason: format!(
                            "structure feature stage {s} does not match encoder shape {:?}",
                            x.shape()
                        ),
                    });
                }
                x = x.add(&f[s])?;
            }
            skips.push(x.clone());
            x = x.merge2x2(grid, grid)?;
            x = self.downs[s].forward(&x)?;
            grid /= 2;
        }
        x = self.bottleneck.forward(&x, Some(t_emb))?;
        for s in (0..cfg.depth).rev() {
            x = self.ups[s].forward(&x)?;
            x = x.unmerge2x2(grid, grid)?;
            grid *= 2;
            x = x.concat_cols(&skips[s])?;
            x = self.skip_projs[s].forward(&x)?;
            x = self.dec_blocks[s].forward(&x, Some(t_emb))?;
        }
        let l0 = cfg.token_grid() * cfg.token_grid();
        let flat = x.reshape(&[b * l0, cfg.base_channels])?;
        let px = self.out_proj.forward(&flat)?;
        px.patches2im(cfg.patch_size, cfg.in_channels, h, w)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_embed
            .visit_params(&format!("{prefix}.patch_embed"), out);
        for (s, b) in self.enc_blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.enc{s}"), out);
        }
        for (s, d) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{s}"), out);
        }
        self.bottleneck
            .visit_params(&format!("{prefix}.bottleneck"), out);
        for (s, u) in self.ups.iter().enumerate() {
            u.visit_params(&format!("{prefix}.up{s}"), out);
        }
        for (s, p) in self.skip_projs.iter().enumerate() {
            p.visit_params(&format!("{prefix}.skip{s}"), out);
        }
        for (s, b) in self.dec_blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.dec{s}"), out);
        }
        self.out_proj.visit_params(&format!("{prefix}.out_proj"), out);
    }
}

/// Denoiser plus structure encoder: the full trainable model.
#[derive(Debug)]
pub struct DoseModel {
    pub unet: MambaUnet,
    pub encoder: StructureEncoder,
}

impl DoseModel {
    pub fn init(config: &UNetConfig, rng: &mut ChaCha20Rng) -> Result<DoseModel> {
        Ok(DoseModel {
            unet: MambaUnet::init(config, rng)?,
            encoder: StructureEncoder::init(config, rng)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.unet.config
    }

    /// Named parameters in a stable order (drives checkpoints and the
    /// optimizer).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.unet.visit_params("unet", &mut out);
        self.encoder.visit_params("encoder", &mut out);
        out
    }

    /// Full conditional forward: encode the structure image, then
    /// denoise. `ts` holds one diffusion step per batch item.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize], t_max: usize, cond: &Tensor) -> Result<Tensor> {
        let feats = self.encoder.forward(cond)?;
        self.predict_with_feats(x_t, ts, t_max, &feats)
    }

    /// Denoise against precomputed structure features (the condition
    /// is time-invariant, so samplers encode it once per chain).
    pub fn predict_with_feats(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        t_max: usize,
        feats: &StructureFeatures,
    ) -> Result<Tensor> {
        let t_emb = time_embedding_batch(ts, t_max, self.unet.config.time_embed_dim)?;
        self.unet.forward(x_t, &t_emb, Some(feats))
    }
}

/// Total scalar parameter count of a named parameter list.
pub fn count_parameters(params: &[(String, Tensor)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}
