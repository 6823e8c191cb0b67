//! Building blocks of the denoising network.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

pub(crate) fn randn_vec(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Affine map x W + b over the last dimension.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Result<Linear> {
        Linear::init_scaled(fan_in, fan_out, 1.0, rng)
    }

    /// `gain` scales the weight standard deviation 1/sqrt(fan_in);
    /// residual branches start small to keep the stream near identity.
    pub fn init_scaled(
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Linear> {
        let std = gain / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::param(randn_vec(rng, fan_in * fan_out, std), &[fan_in, fan_out])?,
            bias: Some(Tensor::param(vec![0.0; fan_out], &[fan_out])?),
        })
    }

    pub fn init_no_bias(fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Result<Linear> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::param(randn_vec(rng, fan_in * fan_out, std), &[fan_in, fan_out])?,
            bias: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(channels: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Token mixer with two gated branches.
///
/// The normalized input feeds (a) an expanded projection, causal
/// depthwise convolution, SiLU and the selective SSM, and (b) an
/// expanded projection with SiLU; the branches merge by Hadamard
/// product, project back to the block width, receive the time
/// conditioning, and add onto the residual stream.
#[derive(Debug)]
pub struct MambaBlock {
    pub norm: LayerNorm,
    pub in_proj_a: Linear,
    pub in_proj_b: Linear,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub ssm: SsmParams,
    pub out_proj: Linear,
    /// Two-layer map from the time embedding to the block width;
    /// absent in time-invariant encoders.
    pub time_mlp: Option<(Linear, Linear)>,
}

impl MambaBlock {
    pub fn init(
        channels: usize,
        expand: usize,
        n_state: usize,
        conv_kernel: usize,
        time_dim: Option<usize>,
        rng: &mut ChaCha20Rng,
    ) -> Result<MambaBlock> {
        let inner = channels * expand;
        let conv_std = 1.0 / (conv_kernel as f64).sqrt();
        let time_mlp = match time_dim {
            Some(td) => {
                let hidden = (2 * channels).max(64);
                Some((
                    Linear::init(td, hidden, rng)?,
                    Linear::init(hidden, channels, rng)?,
                ))
            }
            None => None,
        };
        Ok(MambaBlock {
            norm: LayerNorm::init(channels)?,
            in_proj_a: Linear::init(channels, inner, rng)?,
            in_proj_b: Linear::init(channels, inner, rng)?,
            conv_w: Tensor::param(
                randn_vec(rng, inner * conv_kernel, conv_std),
                &[inner, conv_kernel],
            )?,
            conv_b: Tensor::param(vec![0.0; inner], &[inner])?,
            ssm: SsmParams::init(inner, n_state, rng)?,
            out_proj: Linear::init_scaled(inner, channels, 0.25, rng)?,
            time_mlp,
        })
    }

    /// (B, L, C) -> (B, L, C); `t_emb` is (B, time_dim) when the block
    /// is time-conditioned.
    pub fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> Result<Tensor> {
        let tokens = x.shape()[1];
        let h = self.norm.forward(x)?;
        let a = self.in_proj_a.forward(&h)?;
        let a = a.conv1d_causal(&self.conv_w, &self.conv_b)?;
        let a = a.silu()?;
        let a = self.ssm.selective_ssm(&a)?;
        let b = self.in_proj_b.forward(&h)?.silu()?;
        let merged = a.mul(&b)?;
        let mut out = self.out_proj.forward(&merged)?;
        if let (Some((l1, l2)), Some(te)) = (&self.time_mlp, t_emb) {
            let tv = l2.forward(&l1.forward(te)?.silu()?)?;
            out = out.add(&tv.broadcast_tokens(tokens)?)?;
        }
        x.add(&out)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.visit_params(&format!("{prefix}.norm"), out);
        self.in_proj_a.visit_params(&format!("{prefix}.in_proj_a"), out);
        self.in_proj_b.visit_params(&format!("{prefix}.in_proj_b"), out);
        out.push((format!("{prefix}.conv_w"), self.conv_w.clone()));
        out.push((format!("{prefix}.conv_b"), self.conv_b.clone()));
        self.ssm.visit_params(&format!("{prefix}.ssm"), out);
        self.out_proj.visit_params(&format!("{prefix}.out_proj"), out);
        if let Some((l1, l2)) = &self.time_mlp {
            l1.visit_params(&format!("{prefix}.time_mlp.0"), out);
            l2.visit_params(&format!("{prefix}.time_mlp.1"), out);
        }
    }
}

/// Linear projection of non-overlapping p x p patches into tokens.
#[derive(Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn init(
        patch: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<PatchEmbed> {
        Ok(PatchEmbed {
            patch,
            proj: Linear::init(patch * patch * in_channels, out_channels, rng)?,
        })
    }

    /// (B, Cin, H, W) -> (B, L, C) with L = (H/p)(W/p) in row-major
    /// patch order.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (b, h, w) = (img.shape()[0], img.shape()[2], img.shape()[3]);
        let patches = img.im2patches(self.patch)?;
        let tok = self.proj.forward(&patches)?;
        let l = (h / self.patch) * (w / self.patch);
        let c = tok.shape()[1];
        tok.reshape(&[b, l, c])
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.visit_params(&format!("{prefix}.proj"), out);
    }
}
