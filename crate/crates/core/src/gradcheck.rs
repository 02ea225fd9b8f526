//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{normal_tensor, standard_normal, Scorer, StyleMode};
use crate::losses::{self, ReconMode};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::params::Bound;
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `eval` around `point`.
pub fn compare_central_differences(
    eval: impl Fn(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    point: &[Tensor],
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    if analytic.len() != point.len()
        || analytic
            .iter()
            .zip(point)
            .any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::shape("analytic gradient does not match the point"));
    }
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at input {i} coordinate {j}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Checks the tape's gradient of `f` at `point` against central differences.
///
/// `f` builds a scalar from leaves placed on a fresh graph, one per tensor in
/// `point`.
pub fn check_gradients<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &leaves)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &leaves)?;
        Ok(g.value(root).item())
    };
    compare_central_differences(eval, &analytic, point, h)
}

/// Loss paths covered by [`model_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Reconstruction,
    /// Commitment term plus the straight-through path into the decoder.
    Vq,
    Kl,
    /// Through the scorer and both encoders.
    InfoNce,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Reconstruction,
        Component::Vq,
        Component::Kl,
        Component::InfoNce,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Reconstruction => "L_REC",
            Component::Vq => "L_VQ",
            Component::Kl => "L_KL",
            Component::InfoNce => "I_NCE",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
    }
}

/// Pass threshold on [`GradCheckReport::max_rel_error`].
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: Component,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

/// A component and an edit applied to its analytic gradient.
pub type Tamper<'a> = (Component, &'a dyn Fn(&mut [Tensor]));

/// Finite-difference suite over every loss path of a tiny model.
///
/// The quantizer's choice is frozen at the base point, so the straight-through
/// forward is smooth in the encoder output. `tamper` lets a test harness alter
/// one component's analytic gradient before comparison.
pub fn model_suite(seed: u64, tamper: Option<Tamper>) -> Result<Vec<ComponentCheck>> {
    let mut config = ModelConfig::tiny();
    config.recon_mode = ReconMode::Sum;
    let model = Model::new(
        config.clone(),
        &mut seed::stream(seed, "gradcheck-model", 0),
    )?;
    let scorer = Scorer::new(
        config.content_dim,
        config.style_dim,
        config.scorer_hidden,
        &mut seed::stream(seed, "gradcheck-scorer", 0),
    );
    let (b, t) = (3, 10);
    let mut rng = seed::stream(seed, "gradcheck-data", 0);
    let x = normal_tensor(&[b, t, config.feature_dim], 1.0, &mut rng);
    let noise = standard_normal(&[b, config.style_dim], &mut rng);
    let frozen = model.freeze_quantization(&x)?;

    let n_model = model.params.len();
    let point: Vec<Tensor> = model
        .params
        .iter()
        .chain(scorer.params.iter())
        .map(|p| p.value.clone())
        .collect();

    let mut out = Vec::new();
    for component in Component::ALL {
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let p = Bound::from_vars(v[..n_model].to_vec());
            let sp = Bound::from_vars(v[n_model..].to_vec());
            let xv = g.constant(x.clone());
            let opts = ForwardOptions {
                style: StyleMode::Train { noise: &noise },
                frozen: Some(&frozen),
            };
            let fw = model.forward(g, &p, xv, opts)?;
            Ok(match component {
                Component::Reconstruction => fw.reconstruction,
                Component::Vq => {
                    let w = g.scale(fw.vq, config.gamma);
                    g.add(fw.reconstruction, w)?
                }
                Component::Kl => fw.kl,
                Component::InfoNce => {
                    losses::info_nce(g, &scorer, &sp, fw.content_pool, fw.style.mean)?
                }
            })
        };
        let mut g = Graph::new();
        let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &leaves)?;
        let grads = g.backward(root)?;
        let mut analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
        if let Some((which, alter)) = tamper {
            if which == component {
                alter(&mut analytic);
            }
        }
        let eval = |q: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = q.iter().map(|t| g.constant(t.clone())).collect();
            let root = f(&mut g, &vars)?;
            Ok(g.value(root).item())
        };
        let report = compare_central_differences(eval, &analytic, &point, DEFAULT_STEP)?;
        out.push(ComponentCheck { component, report });
    }
    Ok(out)
}
