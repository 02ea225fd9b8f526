//! Synthetic speech-like features with known content and style factors.
//!
//! Each content symbol owns a fixed `max_frames × F` template, stretched by
//! linear interpolation to the sampled duration. Each style is a per-channel
//! affine map plus a linear tilt across channels. Features are rounded to
//! `f32` precision so they survive the on-disk format unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Number of content symbols (V).
    pub vocab: usize,
    /// Number of styles (M).
    pub styles: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub noise: f64,
    /// Gains are drawn from `[1 − gain_spread, 1 + gain_spread]`.
    pub gain_spread: f64,
    pub offset_scale: f64,
    pub tilt_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab: 20,
            styles: 8,
            feature_dim: 16,
            min_frames: 4,
            max_frames: 8,
            min_symbols: 8,
            max_symbols: 12,
            noise: 0.05,
            gain_spread: 0.4,
            offset_scale: 1.0,
            tilt_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("data.{field}: {why}")));
        if self.vocab < 2 {
            return bad("vocab", "must be >= 2");
        }
        if self.styles == 0 {
            return bad("styles", "must be >= 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1");
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return bad("min_frames", "need 2 <= min_frames <= max_frames");
        }
        if self.min_symbols == 0 || self.max_symbols < self.min_symbols {
            return bad("min_symbols", "need 1 <= min_symbols <= max_symbols");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise", "must be finite and >= 0");
        }
        if !(0.0..0.9).contains(&self.gain_spread) {
            return bad("gain_spread", "must be in [0, 0.9)");
        }
        Ok(())
    }

    /// Shortest possible utterance.
    pub fn min_len(&self) -> usize {
        self.min_symbols * self.min_frames
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleTransform {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub tilt: f64,
}

impl StyleTransform {
    pub fn identity(feature_dim: usize) -> Self {
        StyleTransform {
            gain: vec![1.0; feature_dim],
            offset: vec![0.0; feature_dim],
            tilt: 0.0,
        }
    }

    fn channel_shift(&self, f: usize) -> f64 {
        let n = self.gain.len();
        let pos = if n > 1 {
            2.0 * f as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        };
        self.offset[f] + self.tilt * pos
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (f, v) in x.iter_mut().enumerate() {
            *v = self.gain[f] * *v + self.channel_shift(f);
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for (f, v) in x.iter_mut().enumerate() {
            *v = (*v - self.channel_shift(f)) / self.gain[f];
        }
    }
}

/// Templates and style transforms realized from a [`SynthSpec`].
#[derive(Clone, Debug)]
pub struct Synth {
    pub spec: SynthSpec,
    /// `V` matrices of shape `max_frames × F`.
    pub templates: Vec<Tensor>,
    pub styles: Vec<StyleTransform>,
    /// `stretched[v][L - min_frames]` is template `v` resampled to `L` frames.
    stretched: Vec<Vec<Tensor>>,
}

fn stretch(template: &Tensor, len: usize) -> Tensor {
    let n = template.rows();
    let f = template.last_dim();
    let mut out = Vec::with_capacity(len * f);
    for r in 0..len {
        let pos = if len > 1 {
            r as f64 * (n - 1) as f64 / (len - 1) as f64
        } else {
            0.0
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = pos - lo as f64;
        for c in 0..f {
            out.push((1.0 - w) * template.row(lo)[c] + w * template.row(hi)[c]);
        }
    }
    Tensor::new(&[len, f], out).expect("stretch shape")
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Synth {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let f = spec.feature_dim;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rng = seed::stream(spec.seed, "templates", 0);
        let templates = loop {
            let ts: Vec<Tensor> = (0..spec.vocab)
                .map(|_| {
                    let data = (0..spec.max_frames * f)
                        .map(|_| unit.sample(&mut rng))
                        .collect();
                    Tensor::new(&[spec.max_frames, f], data).expect("template shape")
                })
                .collect();
            if min_pairwise_distance(&ts) > 10.0 * spec.noise {
                break ts;
            }
        };
        let mut rng = seed::stream(spec.seed, "styles", 0);
        let styles = (0..spec.styles)
            .map(|_| StyleTransform {
                gain: (0..f)
                    .map(|_| 1.0 + rng.gen_range(-spec.gain_spread..=spec.gain_spread))
                    .collect(),
                offset: (0..f)
                    .map(|_| spec.offset_scale * unit.sample(&mut rng))
                    .collect(),
                tilt: spec.tilt_scale * rng.gen_range(-1.0..=1.0),
            })
            .collect();
        let stretched = templates
            .iter()
            .map(|t| {
                (spec.min_frames..=spec.max_frames)
                    .map(|l| stretch(t, l))
                    .collect()
            })
            .collect();
        Ok(Synth {
            spec,
            templates,
            styles,
            stretched,
        })
    }

    pub fn stretched(&self, symbol: usize, len: usize) -> &Tensor {
        &self.stretched[symbol][len - self.spec.min_frames]
    }

    pub fn sample_durations(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n)
            .map(|_| rng.gen_range(self.spec.min_frames..=self.spec.max_frames))
            .collect()
    }

    /// Renders content symbols with the given durations under `style`, adding
    /// Gaussian noise drawn from `rng`.
    pub fn render(
        &self,
        content: &[usize],
        durations: &[usize],
        style: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        self.render_with(
            content,
            durations,
            &self.style(style)?.clone(),
            self.spec.noise,
            rng,
        )
    }

    /// Like [`render`](Self::render) with an explicit transform and noise level.
    pub fn render_with(
        &self,
        content: &[usize],
        durations: &[usize],
        style: &StyleTransform,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if content.is_empty() || content.len() != durations.len() {
            return Err(Error::invalid(
                "content and durations must be non-empty and aligned",
            ));
        }
        if let Some(&bad) = content.iter().find(|&&c| c >= self.spec.vocab) {
            return Err(Error::invalid(format!(
                "content id {bad} out of range (vocab {})",
                self.spec.vocab
            )));
        }
        if let Some(&bad) = durations
            .iter()
            .find(|&&d| d < self.spec.min_frames || d > self.spec.max_frames)
        {
            return Err(Error::invalid(format!("duration {bad} out of range")));
        }
        let f = self.spec.feature_dim;
        let t: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(t * f);
        let dist = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("noise");
        for (&c, &d) in content.iter().zip(durations) {
            let tmpl = self.stretched(c, d);
            for r in 0..d {
                let mut row = tmpl.row(r).to_vec();
                style.apply(&mut row);
                for v in row.iter_mut() {
                    if noise > 0.0 {
                        *v += dist.sample(rng);
                    }
                    *v = round_f32(*v);
                }
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(&[t, f], data)
    }

    pub fn style(&self, style: usize) -> Result<&StyleTransform> {
        self.styles.get(style).ok_or_else(|| {
            Error::invalid(format!(
                "style id {style} out of range (styles {})",
                self.spec.styles
            ))
        })
    }

    /// Segmental nearest-template decoding of a `T × F` matrix rendered (or
    /// reconstructed) under `style`. Returns the symbol sequence and the
    /// segment durations of the minimum squared-error segmentation.
    pub fn decode_symbols(&self, x: &Tensor, style: &StyleTransform) -> (Vec<usize>, Vec<usize>) {
        let t = x.rows();
        let f = self.spec.feature_dim;
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(f) {
            style.invert(row);
        }
        let (lo, hi) = (self.spec.min_frames, self.spec.max_frames);
        let mut best = vec![f64::INFINITY; t + 1];
        let mut back: Vec<(usize, usize)> = vec![(0, 0); t + 1];
        best[0] = 0.0;
        for end in lo..=t {
            for len in lo..=hi.min(end) {
                let start = end - len;
                if !best[start].is_finite() {
                    continue;
                }
                let seg = &y[start * f..end * f];
                for v in 0..self.spec.vocab {
                    let tmpl = self.stretched(v, len).data();
                    let cost: f64 = seg.iter().zip(tmpl).map(|(a, b)| (a - b) * (a - b)).sum();
                    let total = best[start] + cost;
                    if total < best[end] {
                        best[end] = total;
                        back[end] = (len, v);
                    }
                }
            }
        }
        if !best[t].is_finite() {
            return (Vec::new(), Vec::new());
        }
        let mut symbols = Vec::new();
        let mut durations = Vec::new();
        let mut end = t;
        while end > 0 {
            let (len, v) = back[end];
            symbols.push(v);
            durations.push(len);
            end -= len;
        }
        symbols.reverse();
        durations.reverse();
        (symbols, durations)
    }
}

fn min_pairwise_distance(ts: &[Tensor]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..ts.len() {
        for j in i + 1..ts.len() {
            let d: f64 = ts[i]
                .data()
                .iter()
                .zip(ts[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Per-frame symbol labels implied by `content` and `durations`.
pub fn frame_labels(content: &[usize], durations: &[usize]) -> Vec<usize> {
    content
        .iter()
        .zip(durations)
        .flat_map(|(&c, &d)| std::iter::repeat_n(c, d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(noise: f64) -> Synth {
        Synth::new(SynthSpec {
            noise,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_style_without_noise_concatenates_templates() {
        let s = synth(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = s
            .render_with(
                &[3, 7],
                &[8, 8],
                &StyleTransform::identity(16),
                0.0,
                &mut rng,
            )
            .unwrap();
        assert_eq!(x.rows(), 16);
        for r in 0..8 {
            for c in 0..16 {
                assert_eq!(x.row(r)[c], round_f32(s.templates[3].row(r)[c]));
                assert_eq!(x.row(8 + r)[c], round_f32(s.templates[7].row(r)[c]));
            }
        }
    }

    #[test]
    fn length_is_sum_of_durations() {
        let s = synth(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = s.render(&[1, 2, 3], &[4, 7, 5], 2, &mut rng).unwrap();
        assert_eq!(x.shape(), &[16, 16]);
    }

    #[test]
    fn two_styles_differ_by_the_transform() {
        let s = synth(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = s.render(&[4, 5], &[6, 5], 0, &mut rng).unwrap();
        let b = s.render(&[4, 5], &[6, 5], 1, &mut rng).unwrap();
        assert_ne!(a, b);
        for r in 0..a.rows() {
            let mut ra = a.row(r).to_vec();
            s.styles[0].invert(&mut ra);
            s.styles[1].apply(&mut ra);
            for (x, y) in ra.iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let s = synth(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(s.render(&[20], &[4], 0, &mut rng).is_err());
        assert!(s.render(&[0], &[4], 8, &mut rng).is_err());
        assert!(s.render(&[0], &[9], 0, &mut rng).is_err());
    }

    #[test]
    fn templates_distinct_and_gains_bounded() {
        let s = synth(0.05);
        assert!(min_pairwise_distance(&s.templates) > 0.5);
        for st in &s.styles {
            assert!(st.gain.iter().all(|&g| g >= 0.6 - 1e-12));
        }
    }

    #[test]
    fn inverse_transform_round_trips() {
        let s = synth(0.05);
        let mut row: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let orig = row.clone();
        s.styles[5].apply(&mut row);
        s.styles[5].invert(&mut row);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_spec_names_the_field() {
        let err = Synth::new(SynthSpec {
            styles: 0,
            ..SynthSpec::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("data.styles"), "{err}");
    }

    #[test]
    fn decoder_recovers_clean_and_noisy_content() {
        for (noise, min_acc) in [(0.0, 1.0), (0.05, 0.99)] {
            let s = synth(noise);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (mut right, mut total) = (0usize, 0usize);
            for u in 0..60 {
                let n = rng.gen_range(8..=12);
                let content: Vec<usize> = (0..n).map(|_| rng.gen_range(0..20)).collect();
                let durations = s.sample_durations(n, &mut rng);
                let style = u % 8;
                let x = s.render(&content, &durations, style, &mut rng).unwrap();
                let (dec, _) = s.decode_symbols(&x, &s.styles[style]);
                total += content.len();
                right += content.iter().zip(&dec).filter(|(a, b)| a == b).count();
                if noise == 0.0 {
                    assert_eq!(dec, content);
                }
            }
            let acc = right as f64 / total as f64;
            assert!(acc >= min_acc, "noise {noise}: accuracy {acc}");
        }
    }

    #[test]
    fn frame_labels_expand_durations() {
        assert_eq!(frame_labels(&[2, 5], &[2, 3]), vec![2, 2, 5, 5, 5]);
    }
}
