//! Evaluation protocols against the corpus's ground-truth factors:
//! content preservation under recombination, style ranking with a judge
//! classifier, few-shot style probing, and code-to-style leakage.
//!
//! Models consume normalized features; everything handed to the symbol
//! decoder or the style judge is mapped back to the raw feature space first.

mod edit;
mod probe;
mod report;

pub use edit::{edit_distance, symbol_error_rate};
pub use probe::{accuracy, argmax, Features, LinearProbe, ProbeConfig};
pub use report::Report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::config::{EvalConfig, RunConfig};
use crate::data::{frame_labels, Corpus, NormStats, Split, Utterance};
use crate::error::{Error, Result};
use crate::layers::{Dense, StyleMode};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::params::{Group, ParamSet};
use crate::seed;
use crate::tensor::Tensor;

/// Read-only inputs shared by every protocol.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub corpus: &'a Corpus,
    pub stats: &'a NormStats,
    pub config: &'a EvalConfig,
}

impl<'a> EvalContext<'a> {
    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.config.probe_steps,
            lr: self.config.probe_lr,
            l2: self.config.probe_l2,
        }
    }

    fn probe_train(&self) -> Vec<&'a Utterance> {
        let mut train = self.corpus.split(Split::Train);
        if self.config.probe_train_limit > 0 {
            train.truncate(self.config.probe_train_limit);
        }
        train
    }

    fn test(&self) -> Vec<&'a Utterance> {
        self.corpus.split(Split::Test)
    }
}

/// Code indices and posterior mean of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub indices: Vec<usize>,
    pub style_mean: Vec<f64>,
}

pub fn encode_all(model: &Model, stats: &NormStats, utts: &[&Utterance]) -> Result<Vec<Encoded>> {
    par::try_map(utts, |u| {
        let x = stats.normalize(&u.features)?;
        Ok(Encoded {
            indices: model.encode_content(&x)?.indices,
            style_mean: model.encode_style(&x, None)?.mean,
        })
    })
}

/// `Dec(EncC(X_i), EncS(X_j))` on raw features, returned in raw space.
pub fn recombine(
    model: &Model,
    stats: &NormStats,
    content_src: &Tensor,
    style_src: &Tensor,
) -> Result<Tensor> {
    let out = model.recombine(&stats.normalize(content_src)?, &stats.normalize(style_src)?)?;
    stats.denormalize(&out)
}

/// A uniformly drawn donor `j != i` for each of `n` items.
pub fn donors(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid(
            "shuffle pairing needs at least 2 utterances",
        ));
    }
    Ok((0..n)
        .map(|i| {
            let j = seed::stream(seed, "donor", i as u64).gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Reconstructions of every test utterance, with its own style and with a donor's.
pub struct Recombined<'a> {
    pub utterances: Vec<&'a Utterance>,
    pub donors: Vec<usize>,
    pub same: Vec<Tensor>,
    pub shuffled: Vec<Tensor>,
}

pub fn recombine_test_set<'a>(model: &Model, ctx: &EvalContext<'a>) -> Result<Recombined<'a>> {
    let utts = ctx.test();
    let donor = donors(utts.len(), ctx.config.seed)?;
    let pairs: Vec<(usize, usize)> = (0..utts.len()).map(|i| (i, donor[i])).collect();
    let outs = par::try_map(&pairs, |&(i, j)| -> Result<(Tensor, Tensor)> {
        let same = recombine(model, ctx.stats, &utts[i].features, &utts[i].features)?;
        let shuf = recombine(model, ctx.stats, &utts[i].features, &utts[j].features)?;
        Ok((same, shuf))
    })?;
    let (same, shuffled) = outs.into_iter().unzip();
    Ok(Recombined {
        utterances: utts,
        donors: donor,
        same,
        shuffled,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentReport {
    pub no_shuffle_ser: f64,
    pub shuffle_ser: f64,
    /// `(utt_id, donor_id, no-shuffle SER, shuffle SER)`.
    pub rows: Vec<(String, String, f64, f64)>,
}

/// Decodes each reconstruction with the symbol decoder after undoing the
/// style that should be present (the content source's for no-shuffle, the
/// donor's for shuffle) and scores it against the content source's symbols.
pub fn content_eval(ctx: &EvalContext, rec: &Recombined) -> Result<ContentReport> {
    let synth = &ctx.corpus.synth;
    let n = rec.utterances.len();
    let idx: Vec<usize> = (0..n).collect();
    let rows = par::try_map(&idx, |&i| -> Result<(String, String, f64, f64)> {
        let u = rec.utterances[i];
        let d = rec.utterances[rec.donors[i]];
        let (same, _) = synth.decode_symbols(&rec.same[i], synth.style(u.style)?);
        let (shuf, _) = synth.decode_symbols(&rec.shuffled[i], synth.style(d.style)?);
        Ok((
            u.id.clone(),
            d.id.clone(),
            symbol_error_rate(&same, &u.content),
            symbol_error_rate(&shuf, &u.content),
        ))
    })?;
    let mean =
        |f: fn(&(String, String, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    Ok(ContentReport {
        no_shuffle_ser: mean(|r| r.2),
        shuffle_ser: mean(|r| r.3),
        rows,
    })
}

/// Per-channel mean and standard deviation of a raw `T × F` matrix.
pub fn judge_features(x: &Tensor) -> Vec<f64> {
    let (t, f) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; f];
    let mut sq = vec![0.0; f];
    for r in 0..t {
        for (c, &v) in x.row(r).iter().enumerate() {
            mean[c] += v / t as f64;
            sq[c] += v * v / t as f64;
        }
    }
    let std: Vec<f64> = mean
        .iter()
        .zip(&sq)
        .map(|(m, q)| (q - m * m).max(0.0).sqrt())
        .collect();
    mean.into_iter().chain(std).collect()
}

/// Style classifier on raw features, the stand-in for a speaker recognizer.
#[derive(Clone, Debug)]
pub struct StyleJudge {
    pub probe: LinearProbe,
    /// Top-1 accuracy on raw test-split features.
    pub accuracy: f64,
}

impl StyleJudge {
    /// Fits on train and dev utterances; refuses if held-out accuracy is
    /// below `eval.judge_min_accuracy`.
    pub fn train(ctx: &EvalContext) -> Result<Self> {
        let fit: Vec<&Utterance> = ctx
            .corpus
            .utterances
            .iter()
            .filter(|u| u.split != Split::Test)
            .collect();
        let x = Features::from_rows(
            &fit.iter()
                .map(|u| judge_features(&u.features))
                .collect::<Vec<_>>(),
        )?;
        let y: Vec<usize> = fit.iter().map(|u| u.style).collect();
        let probe = LinearProbe::fit(&x, &y, ctx.corpus.synth.spec.styles, ctx.probe_config())?;
        let test = ctx.test();
        let xt = Features::from_rows(
            &test
                .iter()
                .map(|u| judge_features(&u.features))
                .collect::<Vec<_>>(),
        )?;
        let yt: Vec<usize> = test.iter().map(|u| u.style).collect();
        let accuracy = probe.accuracy(&xt, &yt)?;
        if accuracy < ctx.config.judge_min_accuracy {
            return Err(Error::EvalRefused(format!(
                "style judge reaches only {:.3} on raw held-out features (need {})",
                accuracy, ctx.config.judge_min_accuracy
            )));
        }
        Ok(StyleJudge { probe, accuracy })
    }

    pub fn ranks(&self, xs: &[Tensor], labels: &[usize]) -> Result<Vec<usize>> {
        let x = Features::from_rows(&xs.iter().map(judge_features).collect::<Vec<_>>())?;
        self.probe.ranks(&x, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub ranks: Vec<usize>,
    pub average_rank: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

impl RankingReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let top = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        RankingReport {
            average_rank: ranks.iter().sum::<usize>() as f64 / n,
            top1: top(1),
            top3: top(3),
            top5: top(5),
            ranks,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleRanking {
    /// Ranks of the style donor's class (`X_j`).
    pub target: RankingReport,
    /// Ranks of the content source's class (`X_i`).
    pub source: RankingReport,
    pub judge_accuracy: f64,
}

pub fn style_ranking(judge: &StyleJudge, rec: &Recombined) -> Result<StyleRanking> {
    let target: Vec<usize> = rec
        .donors
        .iter()
        .map(|&j| rec.utterances[j].style)
        .collect();
    let source: Vec<usize> = rec.utterances.iter().map(|u| u.style).collect();
    Ok(StyleRanking {
        target: RankingReport::from_ranks(judge.ranks(&rec.shuffled, &target)?),
        source: RankingReport::from_ranks(judge.ranks(&rec.shuffled, &source)?),
        judge_accuracy: judge.accuracy,
    })
}

fn check_seen_styles(train: &[&Utterance], test: &[&Utterance]) -> Result<()> {
    let seen: std::collections::HashSet<usize> = train.iter().map(|u| u.style).collect();
    if let Some(u) = test.iter().find(|u| !seen.contains(&u.style)) {
        return Err(Error::EvalRefused(format!(
            "style {} of {} never occurs in the probe's training data",
            u.style, u.id
        )));
    }
    Ok(())
}

/// One-hot codes of frame `t'` and its neighbours, labelled with the symbol
/// at input frame `2t'`.
fn content_probe_rows(
    enc: &Encoded,
    u: &Utterance,
    window: usize,
    k: usize,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let labels = frame_labels(&u.content, &u.durations);
    let n = enc.indices.len();
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for t in 0..n {
        let mut active = Vec::with_capacity(2 * window + 1);
        for (slot, off) in (-(window as isize)..=window as isize).enumerate() {
            let s = t as isize + off;
            if (0..n as isize).contains(&s) {
                active.push(slot * k + enc.indices[s as usize]);
            }
        }
        rows.push(active);
        ys.push(labels[(2 * t).min(labels.len() - 1)]);
    }
    (rows, ys)
}

/// Frame-level symbol accuracy of a linear probe on VQ codes.
pub fn content_probe(model: &Model, ctx: &EvalContext) -> Result<f64> {
    let k = model.config.codebook_size;
    let w = ctx.config.content_window;
    let build = |utts: &[&Utterance]| -> Result<(Features, Vec<usize>)> {
        let enc = encode_all(model, ctx.stats, utts)?;
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (e, u) in enc.iter().zip(utts) {
            let (r, y) = content_probe_rows(e, u, w, k);
            rows.extend(r);
            ys.extend(y);
        }
        Ok((
            Features::Sparse {
                dim: (2 * w + 1) * k,
                rows,
            },
            ys,
        ))
    };
    let (x, y) = build(&ctx.probe_train())?;
    let probe = LinearProbe::fit(&x, &y, ctx.corpus.synth.spec.vocab, ctx.probe_config())?;
    let (xt, yt) = build(&ctx.test())?;
    probe.accuracy(&xt, &yt)
}

type RowFn<'a> = dyn Fn(&[&Utterance]) -> Result<Vec<Vec<f64>>> + 'a;

fn utterance_probe(
    ctx: &EvalContext,
    train: &[&Utterance],
    test: &[&Utterance],
    features: &RowFn<'_>,
) -> Result<f64> {
    check_seen_styles(train, test)?;
    let x = Features::from_rows(&features(train)?)?;
    let y: Vec<usize> = train.iter().map(|u| u.style).collect();
    let probe = LinearProbe::fit(&x, &y, ctx.corpus.synth.spec.styles, ctx.probe_config())?;
    let xt = Features::from_rows(&features(test)?)?;
    let yt: Vec<usize> = test.iter().map(|u| u.style).collect();
    probe.accuracy(&xt, &yt)
}

/// Style accuracy of a linear probe on the posterior mean `s_μ`.
pub fn style_probe(model: &Model, ctx: &EvalContext) -> Result<f64> {
    utterance_probe(ctx, &ctx.probe_train(), &ctx.test(), &|utts| {
        Ok(encode_all(model, ctx.stats, utts)?
            .into_iter()
            .map(|e| e.style_mean)
            .collect())
    })
}

/// Normalized histogram of code indices (time-averaged one-hot codes).
pub fn code_histogram(indices: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &i in indices {
        h[i] += 1.0 / indices.len() as f64;
    }
    h
}

/// Style accuracy of a linear probe on time-averaged codes; higher means
/// more style information leaks into the content latent.
pub fn leakage(model: &Model, ctx: &EvalContext) -> Result<f64> {
    let k = model.config.codebook_size;
    utterance_probe(ctx, &ctx.probe_train(), &ctx.test(), &|utts| {
        Ok(encode_all(model, ctx.stats, utts)?
            .iter()
            .map(|e| code_histogram(&e.indices, k))
            .collect())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    Scratch,
    NoMi,
    Mi,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Scratch => "scratch",
            Scenario::NoMi => "no-mi",
            Scenario::Mi => "mi",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Scenario::Scratch),
            "no-mi" => Ok(Scenario::NoMi),
            "mi" => Ok(Scenario::Mi),
            _ => Err(Error::invalid(format!(
                "unknown scenario {s:?} (scratch|no-mi|mi)"
            ))),
        }
    }
}

impl Scenario {
    pub fn of(config: &RunConfig) -> Self {
        if config.train.mi_loss {
            Scenario::Mi
        } else {
            Scenario::NoMi
        }
    }
}

/// Support set (`shots` per class) and query set, both from the test split,
/// with labels re-indexed over the styles present there.
pub struct FewShotSplit<'a> {
    pub support: Vec<&'a Utterance>,
    pub support_labels: Vec<usize>,
    pub query: Vec<&'a Utterance>,
    pub query_labels: Vec<usize>,
    pub classes: usize,
}

pub fn few_shot_split<'a>(ctx: &EvalContext<'a>, shots: usize) -> Result<FewShotSplit<'a>> {
    if shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    let mut by_style: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in ctx.test() {
        by_style.entry(u.style).or_default().push(u);
    }
    let mut rng = seed::stream(ctx.config.seed, "shots", shots as u64);
    let mut out = FewShotSplit {
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
        classes: by_style.len(),
    };
    for (label, (style, mut utts)) in by_style.into_iter().enumerate() {
        if utts.len() <= shots {
            return Err(Error::invalid(format!(
                "style {style} has {} test utterances; {shots}-shot needs more",
                utts.len()
            )));
        }
        utts.shuffle(&mut rng);
        for (n, u) in utts.into_iter().enumerate() {
            if n < shots {
                out.support.push(u);
                out.support_labels.push(label);
            } else {
                out.query.push(u);
                out.query_labels.push(label);
            }
        }
    }
    if out.classes < 2 {
        return Err(Error::invalid("few-shot probing needs at least 2 styles"));
    }
    Ok(out)
}

/// Linear head on a frozen pre-trained style encoder.
pub fn few_shot_pretrained(model: &Model, ctx: &EvalContext, shots: usize) -> Result<f64> {
    let split = few_shot_split(ctx, shots)?;
    let feats = |utts: &[&Utterance]| -> Result<Features> {
        let rows: Vec<Vec<f64>> = encode_all(model, ctx.stats, utts)?
            .into_iter()
            .map(|e| e.style_mean)
            .collect();
        Features::from_rows(&rows)
    };
    let probe = LinearProbe::fit(
        &feats(&split.support)?,
        &split.support_labels,
        split.classes,
        ctx.probe_config(),
    )?;
    probe.accuracy(&feats(&split.query)?, &split.query_labels)
}

/// Style encoder and linear head trained jointly from random init on the
/// support set only.
pub fn few_shot_scratch(config: &RunConfig, ctx: &EvalContext, shots: usize) -> Result<f64> {
    let split = few_shot_split(ctx, shots)?;
    let mut rng = seed::stream(ctx.config.seed, "scratch", shots as u64);
    let mut model = Model::new(config.model.clone(), &mut rng)?;
    let mut head_params = ParamSet::new();
    let d = config.model.style_dim;
    let head = Dense::new(
        &mut head_params,
        "fewshot",
        Group::StyleEncoder,
        d,
        split.classes,
        (1.0 / d as f64).sqrt(),
        &mut rng,
    );
    let support: Vec<Tensor> = split
        .support
        .iter()
        .map(|u| ctx.stats.normalize(&u.features))
        .collect::<Result<_>>()?;
    let style_ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.get(id).group == Group::StyleEncoder)
        .collect();
    let lr = AdamConfig::with_lr(ctx.config.scratch_lr);
    let mut opt = Adam::new(
        lr,
        &style_ids
            .iter()
            .map(|&id| model.params.value(id))
            .collect::<Vec<_>>(),
    );
    let mut head_opt = Adam::new(lr, &head_params.trainable_values());
    for _ in 0..ctx.config.scratch_steps {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let hp = head_params.bind(&mut g, true);
        let mut total = None;
        for (x, &y) in support.iter().zip(&split.support_labels) {
            let xv = g.constant(x.clone().reshape(&[1, x.rows(), x.last_dim()])?);
            let s = model.style_posterior(&mut g, &p, xv, StyleMode::Infer)?;
            let logits = head.forward(&mut g, &hp, s.mean)?;
            let lse = g.logsumexp(logits);
            let flat = g.reshape(logits, &[split.classes, 1])?;
            let pick = g.gather_rows(flat, &[y])?;
            let pick = g.reshape(pick, &[1])?;
            let ce = g.sub(lse, pick)?;
            let ce = g.sum(ce);
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let loss = g.scale(
            total.expect("non-empty support"),
            1.0 / support.len() as f64,
        );
        let grads = g.backward(loss)?;
        let enc_grads: Vec<Tensor> = style_ids.iter().map(|&id| grads.get(p.var(id))).collect();
        let head_grads = head_params.collect_grads(&hp, &grads);
        let mut values: Vec<&mut Tensor> = Vec::new();
        for p in model
            .params
            .iter_mut()
            .filter(|p| p.group == Group::StyleEncoder)
        {
            values.push(&mut p.value);
        }
        opt.step(&mut values, &enc_grads)?;
        head_opt.step(&mut head_params.trainable_values_mut(), &head_grads)?;
    }
    let query = par::try_map(&split.query, |u| -> Result<usize> {
        let s = model.encode_style(&ctx.stats.normalize(&u.features)?, None)?;
        let mut g = Graph::new();
        let hp = head_params.bind(&mut g, false);
        let sv = g.constant(Tensor::new(&[1, d], s.mean)?);
        let logits = head.forward(&mut g, &hp, sv)?;
        Ok(argmax(g.value(logits).data()))
    })?;
    Ok(accuracy(&query, &split.query_labels))
}

#[cfg(test)]
mod tests;
