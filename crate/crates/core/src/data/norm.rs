//! Per-feature standardization with train-split statistics.

use std::fs;
use std::path::Path;

use super::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape(
                "mean and std must have equal, non-zero length",
            ));
        }
        if let Some(i) = std.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "feature {i} has non-positive std {}",
                std[i]
            )));
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("feature {i} has non-finite mean")));
        }
        Ok(NormStats { mean, std })
    }

    /// Mean and (population) standard deviation over every frame of `xs`.
    pub fn from_matrices<'a>(xs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for x in xs {
            if sum.is_empty() {
                sum = vec![0.0; x.last_dim()];
                sq = vec![0.0; x.last_dim()];
            }
            if x.last_dim() != sum.len() {
                return Err(Error::shape("feature widths differ across utterances"));
            }
            for r in 0..x.rows() {
                for (c, &v) in x.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += x.rows();
        }
        if n == 0 {
            return Err(Error::invalid("no frames to compute statistics from"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        Self::new(mean, std)
    }

    /// Statistics of the train split only.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Self::from_matrices(corpus.split(Split::Train).into_iter().map(|u| &u.features))
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.mean.len() {
            return Err(Error::shape(format!(
                "stats for {} features applied to {:?}",
                self.mean.len(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % f]) / self.std[i % f];
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % f] + self.mean[i % f];
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("feature,mean,std\n");
        for (i, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            s.push_str(&format!("{i},{m:e},{d:e}\n"));
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad norm stats row {line:?}")))
            };
            if cols.len() != 3 {
                return Err(Error::invalid(format!("bad norm stats row {line:?}")));
            }
            mean.push(parse(cols[1])?);
            std.push(parse(cols[2])?);
        }
        Self::new(mean, std)
    }
}
