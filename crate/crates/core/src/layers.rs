//! Reusable building blocks: residual 1-D conv blocks, the VQ bottleneck,
//! the Gaussian style head, pooling and the density-ratio scorer.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Group, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Conv weights `[kernel, cin, cout]` plus bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        group: Group,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            weight: ps.normal(format!("{name}.w"), group, &[kernel, cin, cout], std, rng),
            bias: ps.zeros(format!("{name}.b"), group, &[cout]),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p.var(self.weight), self.stride)?;
        g.add(y, p.var(self.bias))
    }
}

/// `y = relu(conv(x)) + skip(x)`. The skip is the identity when the block
/// keeps length and width, otherwise a learned kernel-1 projection.
#[derive(Clone, Debug)]
pub struct ResidualConvBlock {
    pub conv: Conv,
    pub projection: Option<Conv>,
}

impl ResidualConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        group: Group,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_gain(ps, name, group, kernel, cin, cout, stride, 1.0, rng)
    }

    /// Like [`new`](Self::new) with the conv branch's init std multiplied by
    /// `gain`; deep stacks use `gain < 1` so activations stay O(1) at init.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        ps: &mut ParamSet,
        name: &str,
        group: Group,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (1.0 / (kernel * cin) as f64).sqrt();
        let conv = Conv::new(ps, name, group, kernel, cin, cout, stride, std, rng);
        let projection = (stride != 1 || cin != cout).then(|| {
            let std = (1.0 / cin as f64).sqrt();
            Conv::new(
                ps,
                &format!("{name}.skip"),
                group,
                1,
                cin,
                cout,
                stride,
                std,
                rng,
            )
        });
        ResidualConvBlock { conv, projection }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = g.relu(h);
        let skip = match &self.projection {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Fully connected layer applied over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            weight: ps.normal(format!("{name}.w"), group, &[din, dout], std, rng),
            bias: ps.zeros(format!("{name}.b"), group, &[dout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// Mean over the time axis of `[B, T, D]`.
pub fn global_average_pool(g: &mut Graph, h: Var) -> Result<Var> {
    let s = g.shape(h);
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "pooling expects [B, T, D], got {s:?}"
        )));
    }
    g.mean_axis(h, 1)
}

/// How the codebook rows are learned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodebookMode {
    /// Exponential moving average of assigned encoder outputs.
    Ema { decay: f64, epsilon: f64 },
    /// Gradient on `‖sg(Z) − E_i‖²` with weight 1.
    Loss,
}

impl Default for CodebookMode {
    fn default() -> Self {
        CodebookMode::Ema {
            decay: 0.99,
            epsilon: 1e-5,
        }
    }
}

/// Result of quantizing `rows` encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentLatent {
    /// Pre-quantization rows, `[rows, D_C]`.
    pub z: Tensor,
    pub indices: Vec<usize>,
    /// Selected codebook rows, `[rows, D_C]`.
    pub quantized: Tensor,
}

/// Nearest codebook row for each row of `z` (ties go to the lowest index).
pub fn vq_quantize(z: &Tensor, codebook: &Tensor) -> Result<ContentLatent> {
    if codebook.shape().len() != 2 || codebook.rows() == 0 {
        return Err(Error::invalid("empty codebook"));
    }
    let d = codebook.last_dim();
    if z.last_dim() != d {
        return Err(Error::shape(format!(
            "encoder width {} vs codebook width {d}",
            z.last_dim()
        )));
    }
    let k = codebook.rows();
    let mut indices = Vec::with_capacity(z.rows());
    let mut quantized = Vec::with_capacity(z.numel());
    for r in 0..z.rows() {
        let row = z.row(r);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let dist: f64 = row
                .iter()
                .zip(codebook.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        indices.push(best);
        quantized.extend_from_slice(codebook.row(best));
    }
    Ok(ContentLatent {
        z: z.clone(),
        indices,
        quantized: Tensor::new(&[z.rows(), d], quantized)?,
    })
}

/// Codebook bookkeeping that lives outside the optimizer: usage counters and
/// EMA cluster statistics. The rows themselves are a model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookState {
    pub mode: CodebookMode,
    /// Assignments per code since the last reset.
    pub usage: Vec<u64>,
    pub ema_count: Vec<f64>,
    /// `[K, D]` running sum of assigned vectors.
    pub ema_sum: Tensor,
}

impl CodebookState {
    pub fn new(mode: CodebookMode, embed: &Tensor) -> Result<Self> {
        let k = embed.rows();
        if embed.shape().len() != 2 || k < 2 {
            return Err(Error::invalid("codebook needs at least 2 rows"));
        }
        Ok(CodebookState {
            mode,
            usage: vec![0; k],
            ema_count: vec![1.0; k],
            ema_sum: embed.clone(),
        })
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    /// Quantizes and counts the assignments.
    pub fn quantize(&mut self, z: &Tensor, embed: &Tensor) -> Result<ContentLatent> {
        let latent = vq_quantize(z, embed)?;
        self.record(&latent.indices);
        Ok(latent)
    }

    /// One EMA step on `embed` from a batch of assignments. No-op in loss mode.
    pub fn ema_update(&mut self, embed: &mut Tensor, z: &Tensor, indices: &[usize]) {
        let CodebookMode::Ema { decay, epsilon } = self.mode else {
            return;
        };
        let k = embed.rows();
        let d = embed.last_dim();
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (r, &i) in indices.iter().enumerate() {
            counts[i] += 1.0;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(z.row(r)) {
                *s += v;
            }
        }
        for (c, n) in self.ema_count.iter_mut().zip(&counts) {
            *c = decay * *c + (1.0 - decay) * n;
        }
        let es = self.ema_sum.data_mut();
        for (e, s) in es.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        let n: f64 = self.ema_count.iter().sum();
        let ed = embed.data_mut();
        for i in 0..k {
            let smoothed = (self.ema_count[i] + epsilon) / (n + k as f64 * epsilon) * n;
            for c in 0..d {
                ed[i * d + c] = self.ema_sum.data()[i * d + c] / smoothed;
            }
        }
    }

    /// Re-seeds every code unused since the last reset to a random row of
    /// `z`, then resets the usage counters. Returns the re-seeded indices.
    pub fn reseed_dead(
        &mut self,
        embed: &mut Tensor,
        z: &Tensor,
        rng: &mut impl Rng,
    ) -> Vec<usize> {
        let d = embed.last_dim();
        let mut dead = Vec::new();
        for i in 0..embed.rows() {
            if self.usage[i] == 0 {
                let src = z.row(rng.gen_range(0..z.rows())).to_vec();
                embed.data_mut()[i * d..(i + 1) * d].copy_from_slice(&src);
                self.ema_count[i] = 1.0;
                self.ema_sum.data_mut()[i * d..(i + 1) * d].copy_from_slice(&src);
                dead.push(i);
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        dead
    }
}

/// Gaussian variational head: pooled features -> (μ, log σ²).
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Dense,
    pub log_var: Dense,
    pub log_var_bound: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum StyleMode<'a> {
    /// `s = μ + σ·ξ` with the supplied standard-normal draws `[B, D_S]`.
    Train { noise: &'a Tensor },
    /// `s = μ`.
    Infer,
}

/// Graph handles of a style posterior.
#[derive(Clone, Copy, Debug)]
pub struct StyleVars {
    pub mean: Var,
    pub log_var: Var,
    pub sample: Var,
}

impl GaussianHead {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / din as f64).sqrt();
        GaussianHead {
            mean: Dense::new(
                ps,
                &format!("{name}.mu"),
                Group::StyleEncoder,
                din,
                dout,
                std,
                rng,
            ),
            log_var: Dense::new(
                ps,
                &format!("{name}.logvar"),
                Group::StyleEncoder,
                din,
                dout,
                0.1 * std,
                rng,
            ),
            log_var_bound: 10.0,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var, mode: StyleMode) -> Result<StyleVars> {
        let mean = self.mean.forward(g, p, h)?;
        let raw = self.log_var.forward(g, p, h)?;
        let log_var = g.clamp(raw, -self.log_var_bound, self.log_var_bound);
        if !g.value(mean).all_finite() || !g.value(log_var).all_finite() {
            log::warn!("gaussian head produced non-finite posterior parameters");
            return Err(Error::NonFinite("style posterior".into()));
        }
        let sample = match mode {
            StyleMode::Infer => mean,
            StyleMode::Train { noise } => {
                if noise.shape() != g.shape(mean) {
                    return Err(Error::shape(format!(
                        "style noise {:?} vs posterior {:?}",
                        noise.shape(),
                        g.shape(mean)
                    )));
                }
                let half = g.scale(log_var, 0.5);
                let sigma = g.exp(half);
                let xi = g.constant(noise.clone());
                let eps = g.mul(sigma, xi)?;
                g.add(mean, eps)?
            }
        };
        Ok(StyleVars {
            mean,
            log_var,
            sample,
        })
    }
}

/// Standard-normal draws of the given shape.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Density-ratio scorer: concat(C, S) -> ReLU MLP (two hidden layers) -> scalar.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub params: ParamSet,
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub out: Dense,
    pub content_dim: usize,
    pub style_dim: usize,
}

impl Scorer {
    pub fn new(content_dim: usize, style_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let din = content_dim + style_dim;
        let std_in = (2.0 / din as f64).sqrt();
        let std_h = (2.0 / hidden as f64).sqrt();
        let hidden1 = Dense::new(&mut ps, "h1", Group::Scorer, din, hidden, std_in, rng);
        let hidden2 = Dense::new(&mut ps, "h2", Group::Scorer, hidden, hidden, std_h, rng);
        let out = Dense::new(&mut ps, "out", Group::Scorer, hidden, 1, 0.1 * std_h, rng);
        Scorer {
            params: ps,
            hidden1,
            hidden2,
            out,
            content_dim,
            style_dim,
        }
    }

    /// Scores each row pair: `c: [N, D_C]`, `s: [N, D_S]` -> `[N, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, c: Var, s: Var) -> Result<Var> {
        let x = g.concat(c, s)?;
        let h = self.hidden1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.hidden2.forward(g, p, h)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }

    /// All-pairs score matrix `[K, K]` with entry (i, j) = Sc(C_i, S_j).
    pub fn score_matrix(&self, g: &mut Graph, p: &Bound, c: Var, s: Var) -> Result<Var> {
        let k = g.shape(c)[0];
        if g.shape(s)[0] != k {
            return Err(Error::shape(format!(
                "content pool {:?} vs style pool {:?}",
                g.shape(c),
                g.shape(s)
            )));
        }
        let ci: Vec<usize> = (0..k * k).map(|r| r / k).collect();
        let sj: Vec<usize> = (0..k * k).map(|r| r % k).collect();
        let cc = g.gather_rows(c, &ci)?;
        let ss = g.gather_rows(s, &sj)?;
        let scores = self.forward(g, p, cc, ss)?;
        g.reshape(scores, &[k, k])
    }

    /// Score of a single pair of plain vectors.
    pub fn score(&self, c: &[f64], s: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let cv = g.constant(Tensor::new(&[1, c.len()], c.to_vec())?);
        let sv = g.constant(Tensor::new(&[1, s.len()], s.to_vec())?);
        let out = self.forward(&mut g, &p, cv, sv)?;
        Ok(g.value(out).item())
    }
}

/// Zero-mean normal tensor, used for codebook initialization.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
