//! Corpus generation, splits, manifests and on-disk layout.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::featfile::{load_feature_file, write_feature_file};
use super::synth::{Synth, SynthSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub style: usize,
    pub content: Vec<usize>,
    pub durations: Vec<usize>,
    /// Raw (unnormalized) `T × F` features.
    pub features: Tensor,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub synth: Synth,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Samples uniform content sequences and style assignments. With
    /// `holdout_styles = h > 0` the last `h` style ids appear only in test.
    pub fn generate(spec: SynthSpec, counts: SplitCounts, holdout_styles: usize) -> Result<Self> {
        let synth = Synth::new(spec)?;
        let m = synth.spec.styles;
        if counts.train == 0 || counts.dev == 0 || counts.test == 0 {
            return Err(Error::Config("split counts must be >= 1".into()));
        }
        if holdout_styles >= m {
            return Err(Error::Config(format!(
                "data.holdout_styles = {holdout_styles} leaves no training style (styles = {m})"
            )));
        }
        let plan: Vec<Split> = std::iter::repeat_n(Split::Train, counts.train)
            .chain(std::iter::repeat_n(Split::Dev, counts.dev))
            .chain(std::iter::repeat_n(Split::Test, counts.test))
            .collect();
        let seen = m - holdout_styles;
        let utterances = par::map_range(plan.len(), |i| -> Result<Utterance> {
            let split = plan[i];
            let mut rng = seed::stream(synth.spec.seed, "utterance", i as u64);
            let style = match split {
                Split::Test if holdout_styles > 0 => seen + rng.gen_range(0..holdout_styles),
                _ => rng.gen_range(0..seen),
            };
            let n = rng.gen_range(synth.spec.min_symbols..=synth.spec.max_symbols);
            let content: Vec<usize> = (0..n).map(|_| rng.gen_range(0..synth.spec.vocab)).collect();
            let durations = synth.sample_durations(n, &mut rng);
            let features = synth.render(&content, &durations, style, &mut rng)?;
            Ok(Utterance {
                id: format!("utt{i:05}"),
                split,
                style,
                content,
                durations,
                features,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { synth, utterances })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }

    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("utt_id,split,style_id,content_ids,path\n");
        for u in &self.utterances {
            let ids: Vec<String> = u.content.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},features/{}.ftrm\n",
                u.id,
                u.split,
                u.style,
                ids.join("|"),
                u.id
            ));
        }
        out
    }

    pub fn manifest_hash(&self) -> String {
        hex_digest(self.manifest_csv().as_bytes())
    }

    fn alignments_csv(&self) -> String {
        let mut out = String::from("utt_id,durations\n");
        for u in &self.utterances {
            let d: Vec<String> = u.durations.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{}\n", u.id, d.join("|")));
        }
        out
    }

    /// Writes `features/*.ftrm`, `manifest.csv`, `alignments.csv` and
    /// `norm_stats.csv` into `dir` (which must exist).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("features");
        fs::create_dir_all(&feats)?;
        par::try_map(&self.utterances, |u| {
            write_feature_file(&feats.join(format!("{}.ftrm", u.id)), &u.features)
        })?;
        fs::write(dir.join("manifest.csv"), self.manifest_csv())?;
        fs::write(dir.join("alignments.csv"), self.alignments_csv())?;
        super::NormStats::from_corpus(self)?.write_csv(&dir.join("norm_stats.csv"))?;
        Ok(())
    }

    /// Reads a corpus written by [`write_dir`](Self::write_dir). `spec` must be
    /// the generating spec (templates are needed by the evaluators).
    pub fn load_dir(dir: &Path, spec: SynthSpec) -> Result<Self> {
        let synth = Synth::new(spec)?;
        let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
        let align = fs::read_to_string(dir.join("alignments.csv"))?;
        let mut durations: HashMap<&str, Vec<usize>> = HashMap::new();
        for line in align.lines().skip(1).filter(|l| !l.is_empty()) {
            let (id, d) = line
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("bad alignment row {line:?}")))?;
            durations.insert(id, parse_ids(d)?);
        }
        let mut rows = Vec::new();
        for line in manifest.lines().skip(1).filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::invalid(format!("bad manifest row {line:?}")));
            }
            rows.push(cols.iter().map(|c| c.to_string()).collect::<Vec<_>>());
        }
        let utterances = par::try_map(&rows, |cols| -> Result<Utterance> {
            let id = cols[0].clone();
            let features = load_feature_file(&dir.join(&cols[4]))?;
            let content = parse_ids(&cols[3])?;
            let durations = durations
                .get(id.as_str())
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no alignment for {id}")))?;
            if durations.len() != content.len()
                || durations.iter().sum::<usize>() != features.rows()
            {
                return Err(Error::invalid(format!(
                    "alignment of {id} disagrees with features"
                )));
            }
            let style: usize = cols[2]
                .parse()
                .map_err(|_| Error::invalid(format!("bad style id in {id}")))?;
            if style >= synth.spec.styles || content.iter().any(|&c| c >= synth.spec.vocab) {
                return Err(Error::invalid(format!("{id} has ids outside the spec")));
            }
            if features.last_dim() != synth.spec.feature_dim {
                return Err(Error::invalid(format!("{id} has the wrong feature width")));
            }
            Ok(Utterance {
                id,
                split: cols[1].parse()?,
                style,
                content,
                durations,
                features,
            })
        })?;
        Ok(Corpus { synth, utterances })
    }
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split('|')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad id list {s:?}")))
        })
        .collect()
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
