//! JSON-lines dataset manifests.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::frontend::AudioClip;
use crate::losses::{DecoderLabel, HardLabelSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::TrainLabeled => "train_labeled.jsonl",
            Split::TrainUnlabeled => "train_unlabeled.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainLabeled => "train_labeled",
            Split::TrainUnlabeled => "train_unlabeled",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    /// WAV path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: Label,
    /// Keyword frames `start..end`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_units: Option<Vec<usize>>,
}

impl UtteranceRecord {
    fn invalid(&self, message: impl Into<String>) -> KwsError {
        KwsError::InvalidRecord {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.label {
            Label::Unlabeled => {
                if self.keyword_span.is_some() || self.encoder_units.is_some() {
                    return Err(self.invalid("unlabeled record carries labels"));
                }
            }
            Label::Positive | Label::Negative => {
                let units = self
                    .encoder_units
                    .as_ref()
                    .ok_or_else(|| self.invalid("labeled record without encoder_units"))?;
                match (self.label, self.keyword_span) {
                    (Label::Positive, None) => {
                        return Err(self.invalid("positive record without keyword_span"))
                    }
                    (Label::Positive, Some((start, end))) => {
                        if start >= end || end > units.len() {
                            return Err(self.invalid(format!(
                                "keyword_span ({start}, {end}) invalid for {} frames",
                                units.len()
                            )));
                        }
                    }
                    (Label::Negative, Some(_)) => {
                        return Err(self.invalid("negative record with keyword_span"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.label != Label::Unlabeled
    }

    pub fn hard_labels(&self) -> Result<HardLabelSequence> {
        let encoder_units = self
            .encoder_units
            .clone()
            .ok_or_else(|| self.invalid("record has no hard labels"))?;
        let decoder_label = match (self.label, self.keyword_span) {
            (Label::Positive, Some((start, end))) => DecoderLabel::Positive { start, end },
            (Label::Negative, _) => DecoderLabel::Negative,
            _ => return Err(self.invalid("record has no hard labels")),
        };
        Ok(HardLabelSequence {
            decoder_label,
            encoder_units,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative record paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split && self.records == other.records
    }
}

impl DatasetManifest {
    pub fn new(split: Split, records: Vec<UtteranceRecord>) -> Self {
        DatasetManifest {
            split,
            records,
            base_dir: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(r.invalid("duplicate id"));
            }
            r.validate()?;
            match self.split {
                Split::TrainUnlabeled if r.is_labeled() => {
                    return Err(r.invalid("train_unlabeled split holds a labeled record"))
                }
                Split::Test if !r.is_labeled() => {
                    return Err(r.invalid("test split holds an unlabeled record"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn audio_path(&self, record: &UtteranceRecord) -> PathBuf {
        match &self.base_dir {
            Some(base) if record.path.is_relative() => base.join(&record.path),
            _ => record.path.clone(),
        }
    }

    pub fn load_audio(&self, record: &UtteranceRecord) -> Result<AudioClip> {
        super::wav::read_wav(&self.audio_path(record))
    }
}

pub fn load_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| KwsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord = serde_json::from_str(&line).map_err(|e| KwsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        split,
        records,
        base_dir: path.parent().map(Path::to_path_buf),
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| KwsError::io(path, e))?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positive(id: &str) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            path: format!("wav/{id}.wav").into(),
            label: Label::Positive,
            keyword_span: Some((2, 5)),
            encoder_units: Some(vec![0, 0, 1, 1, 2, 0]),
        }
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        let m = load_manifest(&p, Split::Test).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = DatasetManifest::new(
            Split::TrainLabeled,
            vec![
                positive("a"),
                UtteranceRecord {
                    id: "b".into(),
                    path: "wav/b.wav".into(),
                    label: Label::Negative,
                    keyword_span: None,
                    encoder_units: Some(vec![0, 3, 3]),
                },
            ],
        );
        save_manifest(&m, &p).unwrap();
        let back = load_manifest(&p, Split::TrainLabeled).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.audio_path(&back.records[0]),
            dir.path().join("wav/a.wav")
        );
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"keyword_span\":[2,5]"));
    }

    #[test]
    fn positive_without_span_names_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"pos-7\",\"path\":\"x.wav\",\"label\":\"positive\",\"encoder_units\":[0,1]}\n",
        )
        .unwrap();
        match load_manifest(&p, Split::TrainLabeled) {
            Err(KwsError::InvalidRecord { id, .. }) => assert_eq!(id, "pos-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&positive("a")).unwrap();
        std::fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match load_manifest(&p, Split::TrainLabeled) {
            Err(KwsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest::new(Split::TrainLabeled, vec![positive("a"), positive("a")]);
        assert!(matches!(m.validate(), Err(KwsError::InvalidRecord { .. })));
    }

    #[test]
    fn split_constraints() {
        let m = DatasetManifest::new(Split::TrainUnlabeled, vec![positive("a")]);
        assert!(m.validate().is_err());
        let unl = UtteranceRecord {
            id: "u".into(),
            path: "u.wav".into(),
            label: Label::Unlabeled,
            keyword_span: None,
            encoder_units: None,
        };
        assert!(DatasetManifest::new(Split::Test, vec![unl.clone()])
            .validate()
            .is_err());
        assert!(
            DatasetManifest::new(Split::TrainUnlabeled, vec![unl.clone()])
                .validate()
                .is_ok()
        );
        let tagged = UtteranceRecord {
            encoder_units: Some(vec![0]),
            ..unl
        };
        assert!(tagged.validate().is_err());
    }

    #[test]
    fn span_must_fit_units() {
        let mut r = positive("a");
        r.keyword_span = Some((4, 7));
        assert!(r.validate().is_err());
        r.keyword_span = Some((3, 3));
        assert!(r.validate().is_err());
    }
}
