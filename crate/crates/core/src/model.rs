//! The content encoder, style encoder and decoder, wired together with
//! their losses.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    global_average_pool, normal_tensor, vq_quantize, CodebookMode, CodebookState, ContentLatent,
    Conv, GaussianHead, ResidualConvBlock, StyleMode, StyleVars,
};
use crate::losses::{self, ReconMode};
use crate::params::{Bound, Group, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub codebook_size: usize,
    pub kernel: usize,
    pub content_layers: usize,
    pub content_width: usize,
    /// 1-based index of the stride-2 content layer.
    pub content_stride_layer: usize,
    pub style_layers: usize,
    pub style_width: usize,
    /// 1-based indices of the stride-2 style layers.
    pub style_stride_layers: Vec<usize>,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    /// 1-based decoder layers that receive the style vector on the channel axis.
    pub decoder_concat_layers: Vec<usize>,
    pub scorer_hidden: usize,
    pub gamma: f64,
    pub recon_mode: ReconMode,
    pub codebook_mode: CodebookMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            content_dim: 64,
            style_dim: 16,
            codebook_size: 64,
            kernel: 3,
            content_layers: 10,
            content_width: 64,
            content_stride_layer: 3,
            style_layers: 6,
            style_width: 32,
            style_stride_layers: vec![2, 4, 6],
            decoder_layers: 10,
            decoder_width: 64,
            decoder_concat_layers: vec![1, 3, 5, 7],
            scorer_hidden: 64,
            gamma: 0.25,
            recon_mode: ReconMode::Mean,
            codebook_mode: CodebookMode::default(),
        }
    }
}

impl ModelConfig {
    /// A few-hundred-parameter model for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 3,
            content_dim: 3,
            style_dim: 2,
            codebook_size: 4,
            kernel: 3,
            content_layers: 3,
            content_width: 4,
            content_stride_layer: 2,
            style_layers: 3,
            style_width: 3,
            style_stride_layers: vec![1, 2, 3],
            decoder_layers: 3,
            decoder_width: 4,
            decoder_concat_layers: vec![1, 3],
            scorer_hidden: 5,
            gamma: 0.25,
            recon_mode: ReconMode::Mean,
            codebook_mode: CodebookMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 || self.content_dim == 0 || self.style_dim == 0 {
            return bad("model dimensions must be positive");
        }
        if self.codebook_size < 2 {
            return bad("model.codebook_size must be >= 2");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("model.kernel must be odd");
        }
        if !(self.gamma > 0.0) {
            return bad("model.gamma must be > 0");
        }
        if self.content_layers == 0
            || !(1..=self.content_layers).contains(&self.content_stride_layer)
        {
            return bad("model.content_stride_layer must index a content layer");
        }
        if self.style_layers == 0
            || self
                .style_stride_layers
                .iter()
                .any(|&l| l == 0 || l > self.style_layers)
        {
            return bad("model.style_stride_layers must index style layers");
        }
        if self.decoder_layers == 0
            || self
                .decoder_concat_layers
                .iter()
                .any(|&l| l == 0 || l > self.decoder_layers)
        {
            return bad("model.decoder_concat_layers must index decoder layers");
        }
        if self.content_width == 0
            || self.style_width == 0
            || self.decoder_width == 0
            || self.scorer_hidden == 0
        {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn min_content_len(&self) -> usize {
        2
    }

    pub fn min_style_len(&self) -> usize {
        1 << self.style_stride_layers.len()
    }

    pub fn content_len(&self, t: usize) -> usize {
        t.div_ceil(2)
    }
}

fn branch_gain(layers: usize) -> f64 {
    (1.0 / layers as f64).sqrt()
}

/// Per-utterance style posterior as plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLatent {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Fixes the quantizer's choice and offset so that the straight-through
/// forward `z + (c − z)` becomes a smooth function of `z`; used by the
/// finite-difference oracle.
#[derive(Clone, Debug)]
pub struct FrozenQuantization {
    pub indices: Vec<usize>,
    /// `C − Z` at the base point, `[B, T', D_C]`.
    pub offset: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub style: StyleMode<'a>,
    pub frozen: Option<&'a FrozenQuantization>,
}

impl<'a> ForwardOptions<'a> {
    pub fn infer() -> Self {
        ForwardOptions {
            style: StyleMode::Infer,
            frozen: None,
        }
    }

    pub fn train(noise: &'a Tensor) -> Self {
        ForwardOptions {
            style: StyleMode::Train { noise },
            frozen: None,
        }
    }
}

/// Everything a training or evaluation step needs from one forward pass.
pub struct ForwardOutput {
    /// Pre-quantization encoder output `[B, T', D_C]`.
    pub z: Var,
    pub indices: Vec<usize>,
    /// Selected code rows `[B·T', D_C]` (the `C` of the content latent).
    pub quantized: Tensor,
    pub style: StyleVars,
    pub x_hat: Var,
    /// Time-averaged pre-quantization content `[B, D_C]`.
    pub content_pool: Var,
    pub reconstruction: Var,
    pub vq: Var,
    pub kl: Var,
    /// L_REC + γ·L_VQ + L_KL.
    pub total: Var,
    /// What θ descends: `total`, plus the codebook term in loss mode.
    pub objective: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub codebook: CodebookState,
    embed: ParamId,
    content: Vec<ResidualConvBlock>,
    content_out: Conv,
    style: Vec<ResidualConvBlock>,
    head: GaussianHead,
    upsample_w: ParamId,
    upsample_b: ParamId,
    decoder: Vec<ResidualConvBlock>,
    decoder_out: Conv,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut ps = ParamSet::new();
        let k = c.kernel;

        let mut content = Vec::new();
        let mut cin = c.feature_dim;
        for layer in 1..=c.content_layers {
            let stride = if layer == c.content_stride_layer {
                2
            } else {
                1
            };
            let name = format!("conv{layer}");
            content.push(ResidualConvBlock::with_gain(
                &mut ps,
                &name,
                Group::ContentEncoder,
                k,
                cin,
                c.content_width,
                stride,
                branch_gain(c.content_layers),
                rng,
            ));
            cin = c.content_width;
        }
        let std = (1.0 / c.content_width as f64).sqrt();
        let content_out = Conv::new(
            &mut ps,
            "proj",
            Group::ContentEncoder,
            1,
            c.content_width,
            c.content_dim,
            1,
            std,
            rng,
        );
        let embed = ps.push(
            "codebook",
            Group::ContentEncoder,
            normal_tensor(&[c.codebook_size, c.content_dim], 1.0, rng),
        );
        ps.get_mut(embed).trainable = matches!(c.codebook_mode, CodebookMode::Loss);

        let mut style = Vec::new();
        let mut cin = c.feature_dim;
        for layer in 1..=c.style_layers {
            let stride = if c.style_stride_layers.contains(&layer) {
                2
            } else {
                1
            };
            style.push(ResidualConvBlock::with_gain(
                &mut ps,
                &format!("conv{layer}"),
                Group::StyleEncoder,
                k,
                cin,
                c.style_width,
                stride,
                branch_gain(c.style_layers),
                rng,
            ));
            cin = c.style_width;
        }
        let head = GaussianHead::new(&mut ps, "head", c.style_width, c.style_dim, rng);

        let upsample_w = ps.normal(
            "upsample.w",
            Group::Decoder,
            &[c.content_dim, 2 * c.decoder_width],
            (1.0 / c.content_dim as f64).sqrt(),
            rng,
        );
        let upsample_b = ps.zeros("upsample.b", Group::Decoder, &[c.decoder_width]);
        let mut decoder = Vec::new();
        for layer in 1..=c.decoder_layers {
            let extra = if c.decoder_concat_layers.contains(&layer) {
                c.style_dim
            } else {
                0
            };
            decoder.push(ResidualConvBlock::with_gain(
                &mut ps,
                &format!("conv{layer}"),
                Group::Decoder,
                k,
                c.decoder_width + extra,
                c.decoder_width,
                1,
                branch_gain(c.decoder_layers),
                rng,
            ));
        }
        let std = (1.0 / c.decoder_width as f64).sqrt();
        let decoder_out = Conv::new(
            &mut ps,
            "out",
            Group::Decoder,
            1,
            c.decoder_width,
            c.feature_dim,
            1,
            std,
            rng,
        );
        let codebook = CodebookState::new(c.codebook_mode, ps.value(embed))?;
        Ok(Model {
            config,
            params: ps,
            codebook,
            embed,
            content,
            content_out,
            style,
            head,
            upsample_w,
            upsample_b,
            decoder,
            decoder_out,
        })
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn codebook_rows(&self) -> &Tensor {
        self.params.value(self.embed)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.feature_dim {
            return Err(Error::shape(format!(
                "model input must be [B, T, {}], got {s:?}",
                self.config.feature_dim
            )));
        }
        Ok((s[0], s[1]))
    }

    /// ConvC: `[B, T, F] -> [B, ceil(T/2), D_C]` (pre-quantization).
    pub fn content_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, t) = self.check_input(g, x)?;
        if t < self.config.min_content_len() {
            return Err(Error::invalid(format!(
                "content encoder needs T >= {}, got {t}",
                self.config.min_content_len()
            )));
        }
        let mut h = x;
        for block in &self.content {
            h = block.forward(g, p, h)?;
        }
        self.content_out.forward(g, p, h)
    }

    /// ConvS + pooling + Gaussian head.
    pub fn style_posterior(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: StyleMode,
    ) -> Result<StyleVars> {
        let (_, t) = self.check_input(g, x)?;
        if t < self.config.min_style_len() {
            return Err(Error::invalid(format!(
                "style encoder needs T >= {}, got {t}",
                self.config.min_style_len()
            )));
        }
        let mut h = x;
        for block in &self.style {
            h = block.forward(g, p, h)?;
        }
        let pooled = global_average_pool(g, h)?;
        self.head.forward(g, p, pooled, mode)
    }

    /// Dec: content `[B, T', D_C]` and style `[B, D_S]` -> `[B, out_len, F]`.
    pub fn decode_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        c: Var,
        s: Var,
        out_len: usize,
    ) -> Result<Var> {
        let sc = g.shape(c).to_vec();
        if sc.len() != 3 || sc[2] != self.config.content_dim {
            return Err(Error::shape(format!("decoder content input {sc:?}")));
        }
        let (b, t_c) = (sc[0], sc[1]);
        if out_len == 0 || out_len > 2 * t_c || out_len + 1 < 2 * t_c {
            return Err(Error::invalid(format!(
                "decoder output length {out_len} incompatible with {t_c} content frames"
            )));
        }
        let w = self.config.decoder_width;
        let up = g.matmul(c, p.var(self.upsample_w))?;
        let up = g.reshape(up, &[b, 2 * t_c, w])?;
        let up = g.add(up, p.var(self.upsample_b))?;
        let mut h = if out_len < 2 * t_c {
            g.slice_time(up, out_len)?
        } else {
            up
        };
        let style_t = if self.config.decoder_concat_layers.is_empty() {
            None
        } else {
            Some(g.broadcast_time(s, out_len)?)
        };
        for (i, block) in self.decoder.iter().enumerate() {
            let input = match style_t {
                Some(st) if self.config.decoder_concat_layers.contains(&(i + 1)) => {
                    g.concat(h, st)?
                }
                _ => h,
            };
            h = block.forward(g, p, input)?;
        }
        self.decoder_out.forward(g, p, h)
    }

    /// Full forward pass and loss terms on a batch `[B, T, F]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (b, t) = self.check_input(g, x)?;
        let z = self.content_features(g, p, x)?;
        let t_c = g.shape(z)[1];
        let d = self.config.content_dim;
        let z_rows = g.value(z).clone().reshape(&[b * t_c, d])?;
        let (indices, quantized, c) = match opts.frozen {
            None => {
                let latent = vq_quantize(&z_rows, self.codebook_rows())?;
                let c3 = latent.quantized.clone().reshape(&[b, t_c, d])?;
                let st = g.straight_through(z, c3)?;
                (latent.indices, latent.quantized, st)
            }
            Some(frozen) => {
                let off = g.constant(frozen.offset.clone());
                let c = g.add(z, off)?;
                let rows = self.codebook_rows();
                let picked: Vec<Vec<f64>> = frozen
                    .indices
                    .iter()
                    .map(|&i| rows.row(i).to_vec())
                    .collect();
                let q = Tensor::from_rows(&picked)?;
                (frozen.indices.clone(), q, c)
            }
        };
        let style = self.style_posterior(g, p, x, opts.style)?;
        let x_hat = self.decode_vars(g, p, c, style.sample, t)?;

        let reconstruction = losses::reconstruction(g, x, x_hat, self.config.recon_mode)?;
        let z_flat = g.reshape(z, &[b * t_c, d])?;
        let vq = losses::vq_commitment(g, z_flat, &quantized)?;
        let kl = losses::kl_divergence(g, style.mean, style.log_var)?;
        let weighted = g.scale(vq, self.config.gamma);
        let partial = g.add(reconstruction, weighted)?;
        let total = g.add(partial, kl)?;
        let objective = match self.config.codebook_mode {
            CodebookMode::Loss => {
                let cb = losses::codebook_loss(g, z_flat, p.var(self.embed), &indices)?;
                g.add(total, cb)?
            }
            CodebookMode::Ema { .. } => total,
        };
        let content_pool = g.mean_axis(z, 1)?;
        Ok(ForwardOutput {
            z,
            indices,
            quantized,
            style,
            x_hat,
            content_pool,
            reconstruction,
            vq,
            kl,
            total,
            objective,
        })
    }

    /// Records the quantizer's choice for batch `x` so that a later forward
    /// pass with [`ForwardOptions::frozen`] reuses it.
    pub fn freeze_quantization(&self, x: &Tensor) -> Result<FrozenQuantization> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.content_features(&mut g, &p, xv)?;
        let shape = g.shape(z).to_vec();
        let z = g.value(z).clone();
        let rows = z.clone().reshape(&[shape[0] * shape[1], shape[2]])?;
        let latent = vq_quantize(&rows, self.codebook_rows())?;
        let offset: Vec<f64> = latent
            .quantized
            .data()
            .iter()
            .zip(z.data())
            .map(|(c, z)| c - z)
            .collect();
        Ok(FrozenQuantization {
            indices: latent.indices,
            offset: Tensor::new(&shape, offset)?,
        })
    }

    fn single(&self, x: &Tensor) -> Result<(Graph, Bound, Var)> {
        if x.shape().len() != 2 {
            return Err(Error::shape(format!(
                "expected a T×F matrix, got {:?}",
                x.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?);
        Ok((g, p, xv))
    }

    /// Quantized content latent of a single `T × F` utterance.
    pub fn encode_content(&self, x: &Tensor) -> Result<ContentLatent> {
        let (mut g, p, xv) = self.single(x)?;
        let z = self.content_features(&mut g, &p, xv)?;
        let t_c = g.shape(z)[1];
        let rows = g
            .value(z)
            .clone()
            .reshape(&[t_c, self.config.content_dim])?;
        vq_quantize(&rows, self.codebook_rows())
    }

    /// Style posterior of a single utterance. `noise` selects train mode.
    pub fn encode_style(&self, x: &Tensor, noise: Option<&Tensor>) -> Result<StyleLatent> {
        let (mut g, p, xv) = self.single(x)?;
        let mode = match noise {
            Some(n) => StyleMode::Train { noise: n },
            None => StyleMode::Infer,
        };
        let s = self.style_posterior(&mut g, &p, xv, mode)?;
        Ok(StyleLatent {
            mean: g.value(s.mean).data().to_vec(),
            variance: g.value(s.log_var).data().iter().map(|v| v.exp()).collect(),
            sample: g.value(s.sample).data().to_vec(),
        })
    }

    /// Decodes a content latent and style vector to `out_len × F`
    /// (`out_len` defaults to twice the content length).
    pub fn decode(
        &self,
        content: &ContentLatent,
        style: &[f64],
        out_len: Option<usize>,
    ) -> Result<Tensor> {
        let t_c = content.quantized.rows();
        let d = self.config.content_dim;
        if style.len() != self.config.style_dim {
            return Err(Error::shape(format!(
                "style vector of length {} (expected {})",
                style.len(),
                self.config.style_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(content.quantized.clone().reshape(&[1, t_c, d])?);
        let s = g.constant(Tensor::new(&[1, style.len()], style.to_vec())?);
        let len = out_len.unwrap_or(2 * t_c);
        let out = self.decode_vars(&mut g, &p, c, s, len)?;
        g.value(out)
            .clone()
            .reshape(&[len, self.config.feature_dim])
    }

    /// Dec(EncC(content_src), EncS(style_src)) in inference mode.
    pub fn recombine(&self, content_src: &Tensor, style_src: &Tensor) -> Result<Tensor> {
        let latent = self.encode_content(content_src)?;
        let style = self.encode_style(style_src, None)?;
        self.decode(&latent, &style.mean, Some(content_src.shape()[0]))
    }

    /// Copies parameter values and codebook state from `other` (same config).
    pub fn load_state_from(&mut self, other: &Model) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Config("model configs differ".into()));
        }
        self.params = other.params.clone();
        self.codebook = other.codebook.clone();
        Ok(())
    }
}
