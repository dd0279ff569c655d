use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{read_feature_image, read_wav, write_wav, AudioClip, FeatureExtractor, FeatureImage};
use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSequence, Vocabulary};

/// One subject: `(feature image, token ids + mask, label)`. Label 1 is the
/// positive (AD) class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub feature_image: FeatureImage,
    pub tokens: TokenSequence,
    pub label: usize,
}

/// A subject as stored on disk, before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub clip: AudioClip,
    pub transcript: String,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn audio_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir_name()).join("audio").join(format!("{id}.wav"))
}

pub fn transcript_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir_name()).join("transcripts").join(format!("{id}.txt"))
}

pub fn labels_path(root: &Path, split: Split) -> PathBuf {
    root.join(split.dir_name()).join("labels.csv")
}

/// Cached feature image written by the `features` step.
pub fn feature_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir_name()).join("features").join(format!("{id}.dfim"))
}

/// Parses an `id,label` CSV with label ∈ {0, 1}.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected header \"id,label\", found {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("row {:?} has {} fields", record.position().map(|p| p.line()), record.len()),
            });
        }
        let id = record[0].trim().to_string();
        let label = match record[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Dataset(format!("label for {id} is {other:?}, expected 0 or 1"))),
        };
        if id.is_empty() {
            return Err(Error::Dataset(format!("empty id in {}", path.display())));
        }
        rows.push((id, label));
    }
    Ok(rows)
}

/// Reads audio, transcript and label for every id listed in the split's
/// labels CSV.
pub fn load_raw_split(root: &Path, split: Split) -> Result<Vec<RawSample>> {
    read_labels(&labels_path(root, split))?
        .into_iter()
        .map(|(id, label)| {
            let ap = audio_path(root, split, &id);
            if !ap.is_file() {
                return Err(Error::Dataset(format!("missing audio for id {id}: {}", ap.display())));
            }
            let tp = transcript_path(root, split, &id);
            let transcript = fs::read_to_string(&tp)
                .map_err(|e| Error::Dataset(format!("missing transcript for id {id}: {}: {e}", tp.display())))?;
            let clip = read_wav(&ap).map_err(|e| Error::Dataset(format!("unreadable audio for id {id}: {e}")))?;
            Ok(RawSample {
                id,
                clip,
                transcript,
                label,
            })
        })
        .collect()
}

pub fn write_split(root: &Path, split: Split, samples: &[RawSample]) -> Result<()> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(dir.join("audio"))?;
    fs::create_dir_all(dir.join("transcripts"))?;
    let mut labels = csv::Writer::from_path(labels_path(root, split))?;
    labels.write_record(["id", "label"])?;
    for s in samples {
        write_wav(audio_path(root, split, &s.id), &s.clip)?;
        fs::write(transcript_path(root, split, &s.id), &s.transcript)?;
        labels.write_record([s.id.as_str(), &s.label.to_string()])?;
    }
    labels.flush()?;
    Ok(())
}

/// Feature extraction and tokenization for raw samples. When `cache` is
/// given, a stored feature image is used in place of the audio.
pub fn build_samples(
    raw: &[RawSample],
    extractor: &FeatureExtractor,
    vocab: &Vocabulary,
    cache: Option<(&Path, Split)>,
) -> Result<Vec<Sample>> {
    raw.iter()
        .map(|r| {
            let cached = cache.map(|(root, split)| feature_path(root, split, &r.id)).filter(|p| p.is_file());
            let feature_image = match cached {
                Some(p) => read_feature_image(&p)?,
                None => extractor.feature_image(&r.clip)?,
            };
            Ok(Sample {
                id: r.id.clone(),
                feature_image,
                tokens: tokenize(&r.transcript, vocab),
                label: r.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// `(positives, negatives)` for train and test.
    pub fn class_counts(&self) -> [(usize, usize); 2] {
        [class_counts(&self.train), class_counts(&self.test)]
    }
}

pub fn class_counts(samples: &[Sample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    (pos, samples.len() - pos)
}

/// Loads `root/{train,test}` and builds features. Cached feature images
/// under `<split>/features/` are used when present.
pub fn load_dataset(root: &Path, extractor: &FeatureExtractor, vocab: &Vocabulary) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let load = |split| -> Result<Vec<Sample>> {
        let raw = load_raw_split(root, split)?;
        if raw.is_empty() {
            return Err(Error::Dataset(format!("{} split is empty", split.dir_name())));
        }
        build_samples(&raw, extractor, vocab, Some((root, split)))
    };
    Ok(Dataset {
        train: load(Split::Train)?,
        test: load(Split::Test)?,
    })
}
