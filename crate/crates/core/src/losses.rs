//! Loss terms: reconstruction, VQ commitment, KL, InfoNCE and their sum.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Scorer;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Reduction used by the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReconMode {
    /// mean |X − X̂| + mean (X − X̂)² over all elements.
    #[default]
    Mean,
    /// (Σ|X − X̂|)² + Σ(X − X̂)² per utterance, averaged over the batch.
    Literal,
    /// Σ|X − X̂| + Σ(X − X̂)² per utterance, averaged over the batch.
    Sum,
}

pub fn reconstruction(g: &mut Graph, x: Var, x_hat: Var, mode: ReconMode) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::shape(format!(
            "reconstruction of {:?} against {:?}",
            g.shape(x_hat),
            g.shape(x)
        )));
    }
    let diff = g.sub(x, x_hat)?;
    let abs = g.abs(diff);
    let sq = g.square(diff);
    match mode {
        ReconMode::Mean => {
            let l1 = g.mean(abs);
            let l2 = g.mean(sq);
            g.add(l1, l2)
        }
        ReconMode::Literal => {
            let batch = g.shape(x)[0];
            let per = g.numel_per_batch(x);
            let abs = g.reshape(abs, &[batch, per])?;
            let sq = g.reshape(sq, &[batch, per])?;
            let l1 = g.sum_axis(abs, 1)?;
            let l1 = g.square(l1);
            let l2 = g.sum_axis(sq, 1)?;
            let both = g.add(l1, l2)?;
            Ok(g.mean(both))
        }
        ReconMode::Sum => {
            let batch = g.shape(x)[0] as f64;
            let both = g.add(abs, sq)?;
            let total = g.sum(both);
            Ok(g.scale(total, 1.0 / batch))
        }
    }
}

/// Mean over rows of ‖z_t − sg(code_t)‖². Gradient reaches `z` only.
pub fn vq_commitment(g: &mut Graph, z: Var, codes: &Tensor) -> Result<Var> {
    let c = g.constant(codes.clone());
    let diff = g.sub(z, c)?;
    let sq = g.square(diff);
    let per_row = g.sum_axis(sq, g.shape(sq).len() - 1)?;
    Ok(g.mean(per_row))
}

/// Mean over rows of ‖sg(z_t) − E_{i_t}‖². Gradient reaches the codebook only.
pub fn codebook_loss(g: &mut Graph, z: Var, embed: Var, indices: &[usize]) -> Result<Var> {
    let zs = g.detach(z);
    let d = *g.shape(zs).last().unwrap();
    let zs = g.reshape(zs, &[indices.len(), d])?;
    let picked = g.gather_rows(embed, indices)?;
    let diff = g.sub(zs, picked)?;
    let sq = g.square(diff);
    let per_row = g.sum_axis(sq, 1)?;
    Ok(g.mean(per_row))
}

/// KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ_d (μ² + σ² − log σ² − 1), averaged over rows.
pub fn kl_divergence(g: &mut Graph, mean: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.square(mean);
    let var = g.exp(log_var);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0);
    let axis = g.shape(c).len() - 1;
    let per_row = g.sum_axis(c, axis)?;
    let m = g.mean(per_row);
    Ok(g.scale(m, 0.5))
}

/// Closed-form KL against the unit Gaussian for plain vectors.
pub fn kl_closed_form(mean: &[f64], var: &[f64]) -> Result<f64> {
    if mean.len() != var.len() {
        return Err(Error::shape("mean and variance lengths differ"));
    }
    if let Some(v) = var.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::invalid(format!(
            "variance must be positive, got {v}"
        )));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(var)
            .map(|(m, v)| m * m + v - v.ln() - 1.0)
            .sum::<f64>())
}

/// InfoNCE from a `[K, K]` score matrix with positives on the diagonal:
/// mean_i [ S_ii − log((1/K) Σ_j exp S_ij) ].
pub fn info_nce_from_scores(g: &mut Graph, scores: Var) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(format!(
            "score matrix must be square, got {s:?}"
        )));
    }
    let k = s[0];
    if k < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least 2"));
    }
    let flat = g.reshape(scores, &[k * k, 1])?;
    let diag_idx: Vec<usize> = (0..k).map(|i| i * k + i).collect();
    let diag = g.gather_rows(flat, &diag_idx)?;
    let pos = g.mean(diag);
    let lse = g.logsumexp(scores);
    let neg = g.mean(lse);
    let d = g.sub(pos, neg)?;
    Ok(g.add_scalar(d, (k as f64).ln()))
}

/// InfoNCE between index-aligned pools `c: [K, D_C]` and `s: [K, D_S]`.
pub fn info_nce(g: &mut Graph, scorer: &Scorer, p: &Bound, c: Var, s: Var) -> Result<Var> {
    if g.shape(c)[0] < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least 2"));
    }
    let scores = scorer.score_matrix(g, p, c, s)?;
    info_nce_from_scores(g, scores)
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub vq: f64,
    pub kl: f64,
    pub info_nce: f64,
    pub total: f64,
}

/// L = L_REC + γ·L_VQ + L_KL. Non-finite components are reported by name.
pub fn total_loss(reconstruction: f64, vq: f64, kl: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("l_rec", reconstruction), ("l_vq", vq), ("l_kl", kl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(reconstruction + gamma * vq + kl)
}

impl Graph {
    pub(crate) fn numel_per_batch(&self, v: Var) -> usize {
        let s = self.shape(v);
        s[1..].iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};
    use crate::layers::standard_normal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn rec(x: &[f64], xh: &[f64], mode: ReconMode) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, x.len(), 1], x));
        let b = g.constant(t(&[1, xh.len(), 1], xh));
        let l = reconstruction(&mut g, a, b, mode).unwrap();
        g.value(l).item()
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(rec(&[1.0, 2.0], &[1.0, 2.0], ReconMode::Mean), 0.0);
        assert_eq!(rec(&[3.0], &[1.0], ReconMode::Mean), 6.0);
        assert_eq!(rec(&[1.0, 1.0], &[0.0, 2.0], ReconMode::Mean), 2.0);
        // literal: (1 + 1)^2 + (1 + 1)
        assert_eq!(rec(&[1.0, 1.0], &[0.0, 2.0], ReconMode::Literal), 6.0);
    }

    #[test]
    fn reconstruction_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 3]));
        let b = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(reconstruction(&mut g, a, b, ReconMode::Mean).is_err());
    }

    #[test]
    fn vq_loss_examples() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1, 2], &[0.9, 0.8]));
        let l = vq_commitment(&mut g, z, &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert!((g.value(l).item() - 0.05).abs() < 1e-15);
        let same = vq_commitment(&mut g, z, &t(&[1, 2], &[0.9, 0.8])).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn vq_loss_gradient_skips_codebook() {
        let mut g = Graph::new();
        let e = g.leaf(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let z = g.leaf(t(&[1, 2], &[0.9, 0.8]));
        let picked = g.gather_rows(e, &[1]).unwrap();
        let codes = g.value(picked).clone();
        let l = vq_commitment(&mut g, z, &codes).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(e).data(), &[0.0; 4]);
        let gz = grads.get(z);
        assert!((gz.data()[0] + 0.2).abs() < 1e-12 && (gz.data()[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn codebook_loss_only_moves_codes() {
        let mut g = Graph::new();
        let e = g.leaf(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let z = g.leaf(t(&[1, 2], &[0.9, 0.8]));
        let l = codebook_loss(&mut g, z, e, &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).data(), &[0.0, 0.0]);
        let ge = grads.get(e);
        assert!((ge.data()[2] - 0.2).abs() < 1e-12 && (ge.data()[3] - 0.4).abs() < 1e-12);
    }

    fn kl_graph(mu: &[f64], log_var: &[f64]) -> f64 {
        let mut g = Graph::new();
        let m = g.constant(t(&[1, mu.len()], mu));
        let lv = g.constant(t(&[1, mu.len()], log_var));
        let k = kl_divergence(&mut g, m, lv).unwrap();
        g.value(k).item()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_graph(&[0.0], &[0.0]), 0.0);
        assert!((kl_graph(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(kl_closed_form(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(kl_closed_form(&[1.0], &[0.0]).is_err());
        assert!(kl_closed_form(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_nonnegative_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
            assert!(kl_graph(&mu, &lv) >= 0.0);
        }
        let point = vec![
            standard_normal(&[3, 4], &mut rng),
            standard_normal(&[3, 4], &mut rng),
        ];
        let r = check_gradients(|g, v| kl_divergence(g, v[0], v[1]), &point, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn nce(scores: &[f64], k: usize) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(t(&[k, k], scores));
        let v = info_nce_from_scores(&mut g, s).unwrap();
        g.value(v).item()
    }

    #[test]
    fn info_nce_examples() {
        assert!(nce(&[3.7; 16], 4).abs() < 1e-12);
        let v = nce(&[10.0, -10.0, -10.0, 10.0], 2);
        assert!((v - 2f64.ln()).abs() < 1e-4, "{v}");
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 1]));
        assert!(info_nce_from_scores(&mut g, s).is_err());
    }

    #[test]
    fn info_nce_bounded_by_log_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let k = rng.gen_range(2..9);
            let scores: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-50.0..50.0)).collect();
            assert!(nce(&scores, k) <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.25).unwrap(), 4.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.25).unwrap(), 0.0);
        let err = total_loss(1.0, f64::NAN, 0.0, 0.25).unwrap_err();
        assert!(err.to_string().contains("l_vq"));
    }
}
