//! Linear softmax probes on frozen representations.

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{gemm, Tensor};

/// Probe inputs: dense rows, or rows of active one-hot slots.
#[derive(Clone, Debug)]
pub enum Features {
    Dense(Tensor),
    Sparse { dim: usize, rows: Vec<Vec<usize>> },
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::Dense(t) => t.rows(),
            Features::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::Dense(t) => t.last_dim(),
            Features::Sparse { dim, .. } => *dim,
        }
    }

    /// Dense features from equal-length vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Features::Dense(Tensor::from_rows(rows)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// `softmax(standardize(x)·W + b)`, fitted by full-batch Adam on the mean
/// cross-entropy plus `l2/2·‖W‖²`.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: usize,
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Per-feature mean and scale for dense inputs.
    shift: Option<(Vec<f64>, Vec<f64>)>,
}

fn softmax_rows(logits: &mut [f64], m: usize) {
    for row in logits.chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

impl LinearProbe {
    pub fn fit(x: &Features, y: &[usize], classes: usize, cfg: ProbeConfig) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} labels",
                x.len(),
                y.len()
            )));
        }
        if classes < 2 || y.iter().any(|&c| c >= classes) {
            return Err(Error::invalid("labels outside the class range"));
        }
        let shift = match x {
            Features::Dense(t) => {
                let (n, d) = (t.rows(), t.last_dim());
                let mut mean = vec![0.0; d];
                let mut sq = vec![0.0; d];
                for r in 0..n {
                    for (c, &v) in t.row(r).iter().enumerate() {
                        mean[c] += v / n as f64;
                        sq[c] += v * v / n as f64;
                    }
                }
                let scale = mean
                    .iter()
                    .zip(&sq)
                    .map(|(m, q)| {
                        let s = (q - m * m).max(0.0).sqrt();
                        if s > 1e-9 {
                            s
                        } else {
                            1.0
                        }
                    })
                    .collect();
                Some((mean, scale))
            }
            Features::Sparse { .. } => None,
        };
        let mut probe = LinearProbe {
            classes,
            weight: Tensor::zeros(&[x.dim(), classes]),
            bias: vec![0.0; classes],
            shift,
        };
        let xs = probe.prepare(x);
        let n = y.len() as f64;
        let mut bias_t = Tensor::zeros(&[classes]);
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &[&probe.weight, &bias_t]);
        for _ in 0..cfg.steps {
            let mut delta = probe.raw_logits(&xs);
            softmax_rows(&mut delta, classes);
            for (r, &c) in y.iter().enumerate() {
                delta[r * classes + c] -= 1.0;
            }
            delta.iter_mut().for_each(|v| *v /= n);
            let mut gw = probe.weight.map(|w| cfg.l2 * w);
            match &xs {
                Features::Dense(t) => gemm(
                    t.last_dim(),
                    t.rows(),
                    classes,
                    t.data(),
                    true,
                    &delta,
                    false,
                    gw.data_mut(),
                    true,
                ),
                Features::Sparse { rows, .. } => {
                    let gd = gw.data_mut();
                    for (r, active) in rows.iter().enumerate() {
                        for &i in active {
                            for c in 0..classes {
                                gd[i * classes + c] += delta[r * classes + c];
                            }
                        }
                    }
                }
            }
            let mut gb = vec![0.0; classes];
            for row in delta.chunks(classes) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            bias_t.data_mut().copy_from_slice(&probe.bias);
            opt.step(
                &mut [&mut probe.weight, &mut bias_t],
                &[gw, Tensor::new(&[classes], gb)?],
            )?;
            probe.bias.copy_from_slice(bias_t.data());
        }
        Ok(probe)
    }

    fn prepare(&self, x: &Features) -> Features {
        match (x, &self.shift) {
            (Features::Dense(t), Some((mean, scale))) => {
                let d = mean.len();
                let mut t = t.clone();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = (*v - mean[i % d]) / scale[i % d];
                }
                Features::Dense(t)
            }
            _ => x.clone(),
        }
    }

    fn raw_logits(&self, xs: &Features) -> Vec<f64> {
        let m = self.classes;
        let n = xs.len();
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        match xs {
            Features::Dense(t) => gemm(
                n,
                t.last_dim(),
                m,
                t.data(),
                false,
                self.weight.data(),
                false,
                &mut out,
                true,
            ),
            Features::Sparse { rows, .. } => {
                let w = self.weight.data();
                for (r, active) in rows.iter().enumerate() {
                    for &i in active {
                        for c in 0..m {
                            out[r * m + c] += w[i * m + c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Class probabilities `[N, classes]`.
    pub fn probabilities(&self, x: &Features) -> Result<Tensor> {
        if x.dim() != self.weight.rows() {
            return Err(Error::shape(format!(
                "probe expects {} features, got {}",
                self.weight.rows(),
                x.dim()
            )));
        }
        let mut p = self.raw_logits(&self.prepare(x));
        softmax_rows(&mut p, self.classes);
        Tensor::new(&[x.len(), self.classes], p)
    }

    pub fn predict(&self, x: &Features) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    }

    pub fn accuracy(&self, x: &Features, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(accuracy(&pred, y))
    }

    /// 1-based rank of each true label (1 + number of classes scored strictly higher).
    pub fn ranks(&self, x: &Features, y: &[usize]) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok(y.iter()
            .enumerate()
            .map(|(r, &c)| 1 + p.row(r).iter().filter(|&&v| v > p.row(r)[c]).count())
            .collect())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let centers = [[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            rows.push(vec![
                centers[c][0] + rng.gen_range(-1.0..1.0),
                centers[c][1] + rng.gen_range(-1.0..1.0),
            ]);
            y.push(c);
        }
        let x = Features::from_rows(&rows).unwrap();
        let p = LinearProbe::fit(&x, &y, 3, ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap(), 1.0);
        let ranks = p.ranks(&x, &y).unwrap();
        assert!(ranks.iter().all(|&r| r == 1));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // one Adam step from zero moves each weight by -lr·sign(grad), so
        // compare signs against a numerical gradient of the loss
        let x = Features::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, -2.0]]).unwrap();
        let y = [0, 1, 2];
        let cfg = ProbeConfig {
            steps: 1,
            lr: 1e-3,
            l2: 0.0,
        };
        let p = LinearProbe::fit(&x, &y, 3, cfg).unwrap();
        let zero = LinearProbe {
            weight: Tensor::zeros(&[2, 3]),
            bias: vec![0.0; 3],
            ..p.clone()
        };
        let loss = |probe: &LinearProbe| -> f64 {
            let pr = probe.probabilities(&x).unwrap();
            -y.iter()
                .enumerate()
                .map(|(r, &c)| pr.row(r)[c].ln())
                .sum::<f64>()
                / 3.0
        };
        for i in 0..6 {
            let mut plus = zero.clone();
            plus.weight.data_mut()[i] += 1e-6;
            let mut minus = zero.clone();
            minus.weight.data_mut()[i] -= 1e-6;
            let num = (loss(&plus) - loss(&minus)) / 2e-6;
            if num.abs() > 1e-8 {
                assert_eq!(p.weight.data()[i].signum(), -num.signum(), "weight {i}");
            }
        }
    }

    #[test]
    fn sparse_one_hot_lookup() {
        let rows: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 4]).collect();
        let y: Vec<usize> = (0..40).map(|i| (i % 4) / 2).collect();
        let x = Features::Sparse { dim: 4, rows };
        let p = LinearProbe::fit(&x, &y, 2, ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_labels() {
        let x = Features::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(LinearProbe::fit(&x, &[0, 5], 2, ProbeConfig::default()).is_err());
        assert!(LinearProbe::fit(&x, &[0], 2, ProbeConfig::default()).is_err());
    }
}
