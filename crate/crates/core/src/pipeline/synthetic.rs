//! Desk-scale stand-in corpus. Each subject carries two latent bits: `a`
//! shapes the audio (a high-band tone when set, a low tone otherwise) and
//! `t` picks the keyword set of the transcript. The label is derived from
//! the bits by a [`CrossmodalRule`].

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_split, RawSample, Split};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossmodalRule {
    AudioOnly,
    TextOnly,
    Xor,
}

impl CrossmodalRule {
    pub fn label(self, audio_bit: usize, text_bit: usize) -> usize {
        match self {
            CrossmodalRule::AudioOnly => audio_bit,
            CrossmodalRule::TextOnly => text_bit,
            CrossmodalRule::Xor => audio_bit ^ text_bit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CrossmodalRule::AudioOnly => "audio_only",
            CrossmodalRule::TextOnly => "text_only",
            CrossmodalRule::Xor => "xor",
        }
    }
}

impl fmt::Display for CrossmodalRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CrossmodalRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio_only" => Ok(CrossmodalRule::AudioOnly),
            "text_only" => Ok(CrossmodalRule::TextOnly),
            "xor" => Ok(CrossmodalRule::Xor),
            _ => Err(Error::invalid(format!("unknown rule {s:?} (audio_only, text_only, xor)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_positive: usize,
    pub train_negative: usize,
    pub test_positive: usize,
    pub test_negative: usize,
    pub rule: CrossmodalRule,
    pub seed: u64,
    pub sample_rate: u32,
}

impl SyntheticSpec {
    /// Class counts mirror the 78/78 train and 24/24 test subjects of the
    /// reference corpus.
    pub fn new(rule: CrossmodalRule, seed: u64) -> Self {
        SyntheticSpec {
            train_positive: 78,
            train_negative: 78,
            test_positive: 24,
            test_negative: 24,
            rule,
            seed,
            sample_rate: 16_000,
        }
    }

    pub fn with_sizes(mut self, train: (usize, usize), test: (usize, usize)) -> Self {
        (self.train_positive, self.train_negative) = train;
        (self.test_positive, self.test_negative) = test;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (split, p, n) in [
            ("train", self.train_positive, self.train_negative),
            ("test", self.test_positive, self.test_negative),
        ] {
            if p != n {
                return Err(Error::invalid(format!("{split} classes must be balanced, got {p},{n}")));
            }
            if p == 0 || p % 2 == 1 {
                return Err(Error::invalid(format!("{split} class size must be even and positive, got {p}")));
            }
        }
        if self.sample_rate < 12_000 {
            return Err(Error::invalid("synthetic audio needs a sample rate of at least 12 kHz"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub raw: RawSample,
    pub audio_bit: usize,
    pub text_bit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub train: Vec<SyntheticItem>,
    pub test: Vec<SyntheticItem>,
}

const FILLER: &[&str] = &[
    "the", "a", "and", "is", "there", "boy", "girl", "mother", "kitchen", "sink", "water", "cookie", "jar", "stool",
    "window", "plate", "dishes", "floor", "counter", "outside", "standing", "falling", "over", "on", "in", "she", "he",
    "it", "they", "looking", "taking", "drying", "running", "curtains", "cupboard", "his", "her", "little",
];
const KEYWORDS: [&[&str]; 2] = [
    &["overflowing", "washing", "stealing", "wobbling", "distracted", "spilling", "garden", "handing", "tipping", "lawn"],
    &["um", "uh", "thing", "forget", "dunno", "hmm", "whatsit", "maybe", "something", "er"],
];

fn synth_audio(bit: usize, sample_rate: u32, r: &mut Rng) -> Result<AudioClip> {
    let sr = sample_rate as f64;
    let n = (r.gen_range(1.5..3.0) * sr).round() as usize;
    let freq = if bit == 1 { r.gen_range(2500.0..4500.0) } else { r.gen_range(150.0..450.0) };
    let amp = r.gen_range(0.25..0.5);
    let (rate, phase) = (r.gen_range(2.0..5.0), r.gen_range(0.0..TAU));
    let distractor = r.gen_bool(0.5).then(|| (r.gen_range(800.0..1500.0), 0.3 * amp));
    let noise = Normal::new(0.0, r.gen_range(0.005..0.02)).expect("positive std");
    let fade = (0.01 * sr) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let envelope = 0.6 + 0.4 * (TAU * rate * t + phase).sin();
            let mut v = amp * envelope * (TAU * freq * t).sin();
            if let Some((f, a)) = distractor {
                v += a * (TAU * f * t).sin();
            }
            v += noise.sample(r);
            let edge = i.min(n - 1 - i);
            if edge < fade {
                v *= edge as f64 / fade as f64;
            }
            // on the 16-bit grid so a WAV round trip is exact
            ((v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32
        })
        .collect();
    AudioClip::new(samples, sample_rate)
}

fn synth_transcript(bit: usize, r: &mut Rng) -> String {
    let mut words: Vec<&str> = (0..r.gen_range(20..40)).map(|_| *FILLER.choose(r).expect("non-empty")).collect();
    for _ in 0..r.gen_range(8..14) {
        let at = r.gen_range(0..=words.len());
        words.insert(at, KEYWORDS[bit].choose(r).expect("non-empty"));
    }
    let mut text = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            text.push_str(if i % 9 == 0 { ". " } else { " " });
        }
        text.push_str(w);
    }
    text.push_str(".\n");
    text
}

/// Latent bit pairs for one class of size `n`: half of each combination
/// the rule allows.
fn class_bits(rule: CrossmodalRule, label: usize, n: usize) -> Vec<(usize, usize)> {
    let pairs: Vec<(usize, usize)> = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .into_iter()
        .filter(|&(a, t)| rule.label(a, t) == label)
        .collect();
    (0..n).map(|i| pairs[i % pairs.len()]).collect()
}

fn synth_split(spec: &SyntheticSpec, split: Split, pos: usize, neg: usize) -> Result<Vec<SyntheticItem>> {
    let mut plan: Vec<(usize, (usize, usize))> = class_bits(spec.rule, 1, pos)
        .into_iter()
        .map(|b| (1, b))
        .chain(class_bits(spec.rule, 0, neg).into_iter().map(|b| (0, b)))
        .collect();
    plan.shuffle(&mut rng::stream(spec.seed, &format!("synthetic/{}/order", split.dir_name())));
    plan.into_iter()
        .enumerate()
        .map(|(i, (label, (a, t)))| {
            let id = format!("{}_{i:03}", split.dir_name());
            let mut r = rng::stream(spec.seed, &format!("synthetic/{id}"));
            let clip = synth_audio(a, spec.sample_rate, &mut r)?;
            let transcript = synth_transcript(t, &mut r);
            Ok(SyntheticItem {
                raw: RawSample {
                    id,
                    clip,
                    transcript,
                    label,
                },
                audio_bit: a,
                text_bit: t,
            })
        })
        .collect()
}

/// Generates the corpus in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    Ok(SyntheticCorpus {
        spec: *spec,
        train: synth_split(spec, Split::Train, spec.train_positive, spec.train_negative)?,
        test: synth_split(spec, Split::Test, spec.test_positive, spec.test_negative)?,
    })
}

/// Generates the corpus and writes it under `root` in the dataset layout,
/// plus `latent.csv` per split (`id,audio_bit,text_bit`) and `synthetic.json`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticCorpus> {
    let corpus = synthesize(spec)?;
    for (split, items) in [(Split::Train, &corpus.train), (Split::Test, &corpus.test)] {
        let raw: Vec<RawSample> = items.iter().map(|it| it.raw.clone()).collect();
        write_split(root, split, &raw)?;
        let mut latent = csv::Writer::from_path(root.join(split.dir_name()).join("latent.csv"))?;
        latent.write_record(["id", "audio_bit", "text_bit"])?;
        for it in items {
            latent.write_record([it.raw.id.clone(), it.audio_bit.to_string(), it.text_bit.to_string()])?;
        }
        latent.flush()?;
    }
    fs::write(root.join("synthetic.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_unbalanced_sizes() {
        let base = SyntheticSpec::new(CrossmodalRule::Xor, 0);
        assert!(base.with_sizes((3, 3), (2, 2)).validate().is_err());
        assert!(base.with_sizes((4, 6), (2, 2)).validate().is_err());
        assert!(base.with_sizes((4, 4), (0, 0)).validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn xor_bits_are_balanced_within_each_class() {
        let bits = class_bits(CrossmodalRule::Xor, 1, 78);
        assert_eq!(bits.iter().filter(|b| **b == (0, 1)).count(), 39);
        assert!(bits.iter().all(|&(a, t)| a ^ t == 1));
        let bits = class_bits(CrossmodalRule::AudioOnly, 0, 24);
        assert_eq!(bits.iter().filter(|b| b.1 == 1).count(), 12);
    }

    #[test]
    fn transcripts_carry_their_keywords() {
        let mut r = rng::stream(1, "t");
        for bit in 0..2 {
            let text = synth_transcript(bit, &mut r);
            let words: Vec<String> = crate::text::words(&text).collect();
            assert!(words.iter().any(|w| KEYWORDS[bit].contains(&w.as_str())));
            assert!(!words.iter().any(|w| KEYWORDS[1 - bit].contains(&w.as_str())));
        }
    }
}
