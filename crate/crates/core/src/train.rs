//! Adversarial training loop with adaptive scaling of the MI gradient.
//!
//! Each step draws a batch, builds one graph, and runs two backward passes
//! over it: one from the autoencoder objective (`g_θ`) and one from the
//! InfoNCE estimate (`g_a` for θ and the scorer's own gradient). θ receives
//! `g_θ + g_b` with `g_b = min(‖g_a‖, ‖g_θ‖)·g_a/‖g_a‖`; the scorer ascends.
//!
//! All randomness is derived from `(seed, step)`, so a checkpoint only needs
//! the step counter to resume bit-identically.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Corpus, NormStats, Split};
use crate::error::{Error, Result};
use crate::layers::{standard_normal, Scorer};
use crate::losses::{self, LossBreakdown};
use crate::model::{ForwardOptions, Model};
use crate::optim::{Adam, AdamConfig};
use crate::params::{global_norm, ParamSet};
use crate::seed;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str =
    "step,l_rec,l_vq,l_kl,i_nce,l_total,g_theta_norm,g_a_norm,g_b_norm";

/// Per-step losses and gradient norms.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// 1-based index of the step this row describes.
    pub step: u64,
    pub losses: LossBreakdown,
    pub g_theta_norm: f64,
    pub g_a_norm: f64,
    pub g_b_norm: f64,
    /// Cosine between `g_b` and `g_a`; `None` when `g_a` vanishes or MI is off.
    pub cos_b_a: Option<f64>,
    /// The update was skipped because of a non-finite loss or gradient.
    pub skipped: bool,
}

impl GradReport {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            l.reconstruction,
            l.vq,
            l.kl,
            l.info_nce,
            l.total,
            self.g_theta_norm,
            self.g_a_norm,
            self.g_b_norm
        )
    }
}

/// The scaled auxiliary gradient and the norms `(‖g_a‖, ‖g_b‖)`.
pub fn scale_auxiliary(g_a: &[Tensor], g_theta_norm: f64) -> (Vec<Tensor>, f64, f64) {
    let a = global_norm(g_a);
    if a == 0.0 || !a.is_finite() {
        let zeros = g_a.iter().map(|t| Tensor::zeros(t.shape())).collect();
        return (zeros, a, 0.0);
    }
    let target = a.min(g_theta_norm);
    let c = target / a;
    // exact copy when no rescaling is needed
    let g_b: Vec<Tensor> = if c == 1.0 {
        g_a.to_vec()
    } else {
        g_a.iter().map(|t| t.map(|v| v * c)).collect()
    };
    let b = global_norm(&g_b);
    (g_b, a, b)
}

fn cosine(a: &[Tensor], b: &[Tensor]) -> Option<f64> {
    let na = global_norm(a);
    let nb = global_norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| p * q)
        .sum();
    Some(dot / (na * nb))
}

/// Normalized train-split utterances.
pub fn train_data(corpus: &Corpus, stats: &NormStats) -> Result<Vec<Tensor>> {
    corpus
        .split(Split::Train)
        .iter()
        .map(|u| stats.normalize(&u.features))
        .collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub scorer: Scorer,
    pub opt: Adam,
    pub scorer_opt: Adam,
    /// Completed steps.
    pub step: u64,
    /// Only the scorer learns (used to probe the estimator in isolation).
    pub freeze_theta: bool,
    bad_streak: u64,
    data: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        if data.len() < t.batch_size {
            return Err(Error::Config(format!(
                "train.batch_size = {} exceeds the {} training utterances",
                t.batch_size,
                data.len()
            )));
        }
        if let Some(u) = data.iter().find(|u| u.rows() < t.crop) {
            return Err(Error::Config(format!(
                "train.crop = {} exceeds an utterance of {} frames",
                t.crop,
                u.rows()
            )));
        }
        let model = Model::new(config.model.clone(), &mut seed::stream(t.seed, "init", 0))?;
        let m = &config.model;
        let scorer = Scorer::new(
            m.content_dim,
            m.style_dim,
            m.scorer_hidden,
            &mut seed::stream(t.seed, "scorer-init", 0),
        );
        let opt = Adam::new(AdamConfig::with_lr(t.lr), &model.params.trainable_values());
        let scorer_opt = Adam::new(
            AdamConfig::with_lr(t.scorer_lr),
            &scorer.params.trainable_values(),
        );
        Ok(Trainer {
            config,
            model,
            scorer,
            opt,
            scorer_opt,
            step: 0,
            freeze_theta: false,
            bad_streak: 0,
            data,
        })
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.config.train.batch_size
    }

    /// Utterance indices of batch `step` (0-based). Each epoch is a fresh
    /// permutation; the remainder that does not fill a batch is skipped.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let b = self.config.train.batch_size;
        let per = self.batches_per_epoch() as u64;
        let epoch = step / per;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seed::stream(self.config.train.seed, "epoch", epoch));
        let start = (step % per) as usize * b;
        order[start..start + b].to_vec()
    }

    /// Cropped batch `[B, crop, F]` and style noise `[B, D_S]` for `step`.
    pub fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        let t = &self.config.train;
        let mut rng = seed::stream(t.seed, "step", step);
        let f = self.config.model.feature_dim;
        let mut data = Vec::with_capacity(t.batch_size * t.crop * f);
        for i in self.batch_indices(step) {
            let u = &self.data[i];
            let start = rng.gen_range(0..=u.rows() - t.crop);
            data.extend_from_slice(&u.data()[start * f..(start + t.crop) * f]);
        }
        let x = Tensor::new(&[t.batch_size, t.crop, f], data)?;
        let noise = standard_normal(&[t.batch_size, self.config.model.style_dim], &mut rng);
        Ok((x, noise))
    }

    fn skip(&mut self, report: GradReport, why: &str) -> Result<GradReport> {
        self.bad_streak += 1;
        log::warn!("step {}: {why}; update skipped", report.step);
        if self.bad_streak > self.config.train.max_bad_steps {
            return Err(Error::NonFinite(format!(
                "{} consecutive steps ({why})",
                self.bad_streak
            )));
        }
        Ok(GradReport {
            skipped: true,
            ..report
        })
    }

    /// Runs one training step.
    pub fn train_step(&mut self) -> Result<GradReport> {
        let step = self.step;
        self.step += 1;
        let mi = self.config.train.mi_loss;
        let (xb, noise) = self.batch(step)?;

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, !self.freeze_theta);
        let sp = self.scorer.params.bind(&mut g, mi);
        let x = g.constant(xb);
        let out = self
            .model
            .forward(&mut g, &p, x, ForwardOptions::train(&noise))?;
        let info = if mi {
            Some(losses::info_nce(
                &mut g,
                &self.scorer,
                &sp,
                out.content_pool,
                out.style.mean,
            )?)
        } else {
            None
        };
        let v = |var| g.value(var).item();
        let mut report = GradReport {
            step: self.step,
            losses: LossBreakdown {
                reconstruction: v(out.reconstruction),
                vq: v(out.vq),
                kl: v(out.kl),
                info_nce: info.map(v).unwrap_or(0.0),
                total: v(out.total),
            },
            g_theta_norm: 0.0,
            g_a_norm: 0.0,
            g_b_norm: 0.0,
            cos_b_a: None,
            skipped: false,
        };
        let l = report.losses;
        if let Err(e) = losses::total_loss(l.reconstruction, l.vq, l.kl, self.config.model.gamma) {
            return self.skip(report, &e.to_string());
        }
        if !l.info_nce.is_finite() || !g.value(out.objective).item().is_finite() {
            return self.skip(report, "non-finite i_nce");
        }

        let grads = g.backward(out.objective)?;
        let g_theta = self.model.params.collect_grads(&p, &grads);
        report.g_theta_norm = global_norm(&g_theta);

        let mut update = g_theta;
        let mut scorer_grad = None;
        if let Some(i_nce) = info {
            let gi = g.backward(i_nce)?;
            let g_a = self.model.params.collect_grads(&p, &gi);
            let (g_b, a_norm, b_norm) = scale_auxiliary(&g_a, report.g_theta_norm);
            report.g_a_norm = a_norm;
            report.g_b_norm = b_norm;
            report.cos_b_a = cosine(&g_b, &g_a);
            for (u, b) in update.iter_mut().zip(&g_b) {
                for (x, y) in u.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            // ascent on I_NCE
            let sg: Vec<Tensor> = self
                .scorer
                .params
                .collect_grads(&sp, &gi)
                .into_iter()
                .map(|t| t.map(|v| -v))
                .collect();
            scorer_grad = Some(sg);
        }
        if !report.g_theta_norm.is_finite() || !report.g_a_norm.is_finite() {
            return self.skip(report, "non-finite gradient");
        }

        if let Some(sg) = &scorer_grad {
            self.scorer_opt
                .step(&mut self.scorer.params.trainable_values_mut(), sg)?;
        }
        if !self.freeze_theta {
            self.opt
                .step(&mut self.model.params.trainable_values_mut(), &update)?;
            let (b, t_c, d) = {
                let s = g.shape(out.z);
                (s[0], s[1], s[2])
            };
            let z_rows = g.value(out.z).clone().reshape(&[b * t_c, d])?;
            let embed_id = self.model.embed_id();
            let model = &mut self.model;
            model.codebook.record(&out.indices);
            model.codebook.ema_update(
                &mut model.params.get_mut(embed_id).value,
                &z_rows,
                &out.indices,
            );
            let every = self.config.train.reseed_interval;
            if every > 0 && self.step.is_multiple_of(every) {
                let mut rng = seed::stream(self.config.train.seed, "reseed", self.step);
                let dead = model.codebook.reseed_dead(
                    &mut model.params.get_mut(embed_id).value,
                    &z_rows,
                    &mut rng,
                );
                if !dead.is_empty() {
                    log::debug!("step {}: re-seeded {} unused codes", self.step, dead.len());
                }
            }
        }
        self.bad_streak = 0;
        Ok(report)
    }

    /// Steps until `self.step == until`, handing every report to `sink`.
    pub fn run_until(
        &mut self,
        until: u64,
        sink: &mut dyn FnMut(&Trainer, &GradReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let r = self.train_step()?;
            sink(self, &r)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.to_text());
        put_params(&mut ck, "theta", &self.model.params);
        put_params(&mut ck, "scorer", &self.scorer.params);
        put_adam(&mut ck, "adam.theta", &self.opt);
        put_adam(&mut ck, "adam.scorer", &self.scorer_opt);
        let cb = &self.model.codebook;
        ck.put_u64("codebook.usage", cb.usage.clone());
        ck.put_f64("codebook.ema_count", cb.ema_count.clone());
        ck.put_tensor("codebook.ema_sum", &cb.ema_sum);
        ck.put_u64("trainer.state", vec![self.step, self.bad_streak]);
        ck
    }

    /// Restores a trainer; `config` may differ from the saved one only in
    /// the step budget, snapshot cadence and eval options.
    pub fn from_checkpoint(ck: &Checkpoint, config: RunConfig, data: Vec<Tensor>) -> Result<Self> {
        let saved = RunConfig::from_text(&ck.config)?;
        if saved.trajectory_hash() != config.trajectory_hash() {
            return Err(Error::Config(
                "checkpoint was trained under a different configuration".into(),
            ));
        }
        let mut t = Trainer::new(config, data)?;
        load_params(ck, "theta", &mut t.model.params)?;
        load_params(ck, "scorer", &mut t.scorer.params)?;
        t.opt = load_adam(ck, "adam.theta", t.opt.config)?;
        t.scorer_opt = load_adam(ck, "adam.scorer", t.scorer_opt.config)?;
        load_codebook(ck, &mut t.model)?;
        let state = ck.u64s("trainer.state")?;
        if state.len() != 2 {
            return Err(Error::invalid("trainer.state must hold 2 values"));
        }
        t.step = state[0];
        t.bad_streak = state[1];
        Ok(t)
    }
}

fn put_params(ck: &mut Checkpoint, prefix: &str, ps: &ParamSet) {
    for p in ps.iter() {
        ck.put_tensor(format!("{prefix}/{}", p.key()), &p.value);
    }
}

fn load_params(ck: &Checkpoint, prefix: &str, ps: &mut ParamSet) -> Result<()> {
    for p in ps.iter_mut() {
        let name = format!("{prefix}/{}", p.key());
        let t = ck.tensor(&name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    ck.put_u64(format!("{prefix}.step"), vec![opt.step_count()]);
    for (i, (m, v)) in opt
        .first_moments()
        .iter()
        .zip(opt.second_moments())
        .enumerate()
    {
        ck.put_tensor(format!("{prefix}.m/{i}"), m);
        ck.put_tensor(format!("{prefix}.v/{i}"), v);
    }
}

fn load_adam(ck: &Checkpoint, prefix: &str, config: AdamConfig) -> Result<Adam> {
    let step = ck.u64s(&format!("{prefix}.step"))?;
    let n = ck
        .arrays
        .iter()
        .filter(|a| a.name.starts_with(&format!("{prefix}.m/")))
        .count();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        m.push(ck.tensor(&format!("{prefix}.m/{i}"))?);
        v.push(ck.tensor(&format!("{prefix}.v/{i}"))?);
    }
    Adam::from_parts(config, *step.first().unwrap_or(&0), m, v)
}

fn load_codebook(ck: &Checkpoint, model: &mut Model) -> Result<()> {
    let cb = &mut model.codebook;
    let usage = ck.u64s("codebook.usage")?;
    let count = ck.f64s("codebook.ema_count")?;
    let sum = ck.tensor("codebook.ema_sum")?;
    if usage.len() != cb.usage.len()
        || count.len() != cb.ema_count.len()
        || sum.shape() != cb.ema_sum.shape()
    {
        return Err(Error::shape("codebook state does not match the model"));
    }
    cb.usage = usage;
    cb.ema_count = count;
    cb.ema_sum = sum;
    Ok(())
}

/// The autoencoder stored in a checkpoint, with its run configuration.
pub fn load_model(ck: &Checkpoint) -> Result<(RunConfig, Model)> {
    let config = RunConfig::from_text(&ck.config)?;
    let mut model = Model::new(
        config.model.clone(),
        &mut seed::stream(config.train.seed, "init", 0),
    )?;
    load_params(ck, "theta", &mut model.params)?;
    load_codebook(ck, &mut model)?;
    Ok((config, model))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains into `out`: `metrics.csv`, `checkpoint.ckpt` and, at the snapshot
/// interval, `snapshots/step_<n>.ckpt`. With `resume` the run continues from
/// `out/checkpoint.ckpt` and the metrics log is cut back to that step.
pub fn train_run(
    config: RunConfig,
    data: Vec<Tensor>,
    out: &Path,
    resume: bool,
) -> Result<Trainer> {
    fs::create_dir_all(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        let t = Trainer::from_checkpoint(&ck, config, data)?;
        let kept = truncate_metrics(&metrics_path, t.step)?;
        fs::write(&metrics_path, kept)?;
        log::info!("resuming at step {}", t.step);
        t
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
        Trainer::new(config, data)?
    };
    let until = trainer.config.train.steps;
    let every = trainer.config.train.snapshot_interval;
    let file = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut log = BufWriter::new(file);
    let result = trainer.run_until(until, &mut |t, r| {
        writeln!(log, "{}", r.csv_row())?;
        if r.step % 500 == 0 {
            log::info!(
                "step {}: l_rec {:.4} l_vq {:.4} l_kl {:.4} i_nce {:.4}",
                r.step,
                r.losses.reconstruction,
                r.losses.vq,
                r.losses.kl,
                r.losses.info_nce
            );
        }
        if every > 0 && r.step % every == 0 {
            log.flush()?;
            let dir = out.join("snapshots");
            fs::create_dir_all(&dir)?;
            let snap = t.to_checkpoint();
            snap.save(&dir.join(format!("step_{:06}.ckpt", r.step)))
                .and_then(|_| snap.save(&ck_path))
                .inspect_err(|_e| {
                    log::warn!(
                        "snapshot at step {} failed; state on disk is from an earlier step",
                        r.step
                    );
                })?;
        }
        Ok(())
    });
    log.flush()?;
    result?;
    trainer.to_checkpoint().save(&ck_path)?;
    Ok(trainer)
}

/// Header plus the rows with `step <= keep`.
fn truncate_metrics(path: &Path, keep: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid(format!("bad metrics row {line:?}")))?;
        if step <= keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}
