//! JSON dataset manifests (`"schema": "bimamba-manifest/1"`).
//!
//! Each subject names a signal source (an EDF file, or a `[C×T]` BMT1
//! tensor with its sampling rate), a label file with one stage character
//! per line (`W`, `1`, `2`, `3`, `R`; `?` or `M` for unscored epochs) and
//! optionally a health label. Relative paths resolve against the manifest's
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bimamba_core::data::{slice_epochs, ChannelSignal, ChannelSpec, HealthLabel, Hypnogram, SliceOptions, SlicedEpochs, StageLabel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edf::parse_edf;
use crate::error::{read, write, Error, Result};
use crate::tensor_io;

pub const SCHEMA: &str = "bimamba-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_epoch_seconds")]
    pub epoch_seconds: f64,
    /// Trailing epochs discarded per subject (30 for ISRUC exports).
    #[serde(default)]
    pub drop_tail_epochs: usize,
    /// Channel order fed to the model; the ten-channel montage when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<String>>,
    pub subjects: Vec<SubjectEntry>,
}

fn default_epoch_seconds() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edf: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
    /// Sampling rate of `tensor` rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_hz: Option<f64>,
    pub labels: String,
    /// `"healthy"` or `"unhealthy"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub health: Option<String>,
}

impl Manifest {
    pub fn new(subjects: Vec<SubjectEntry>) -> Self {
        Self {
            schema: SCHEMA.into(),
            name: None,
            epoch_seconds: 30.0,
            drop_tail_epochs: 0,
            channels: None,
            subjects,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn health_name(h: HealthLabel) -> &'static str {
    match h {
        HealthLabel::Healthy => "healthy",
        HealthLabel::Unhealthy => "unhealthy",
    }
}

pub fn parse_health(s: &str) -> Option<HealthLabel> {
    match s {
        "healthy" => Some(HealthLabel::Healthy),
        "unhealthy" => Some(HealthLabel::Unhealthy),
        _ => None,
    }
}

/// Parses a label file: one stage character per non-empty line.
pub fn parse_labels(text: &str) -> std::result::Result<Vec<Option<StageLabel>>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut chars = t.chars();
        let c = chars.next().unwrap();
        if chars.next().is_some() {
            return Err(format!("line {}: expected one stage character, got {t:?}", i + 1));
        }
        match (StageLabel::from_char(c), c) {
            (Some(s), _) => out.push(Some(s)),
            (None, '?' | 'M') => out.push(None),
            _ => return Err(format!("line {}: unknown stage {c:?}", i + 1)),
        }
    }
    Ok(out)
}

pub fn format_labels(labels: &[Option<StageLabel>]) -> String {
    let mut s = String::with_capacity(2 * labels.len());
    for l in labels {
        s.push(l.map_or('?', StageLabel::to_char));
        s.push('\n');
    }
    s
}

/// A validated manifest; every referenced file existed at load time.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub path: PathBuf,
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub channels: ChannelSpec,
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads and validates a manifest. Schema problems name the offending
/// field; all missing files are reported together.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| manifest_err(path, e.to_string()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ds = Dataset::new(path.to_path_buf(), dir, manifest)?;
    let missing = ds.missing_files();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(manifest_err(path, format!("{} missing files: {}", list.len(), list.join(", "))));
    }
    Ok(ds)
}

impl Dataset {
    /// Validates `manifest` without touching the file system.
    pub fn new(path: PathBuf, dir: PathBuf, manifest: Manifest) -> Result<Self> {
        let m = &manifest;
        if m.schema != SCHEMA {
            return Err(manifest_err(&path, format!("field `schema`: expected {SCHEMA:?}, got {:?}", m.schema)));
        }
        if !(m.epoch_seconds > 0.0) {
            return Err(manifest_err(&path, format!("field `epoch_seconds`: {} must be > 0", m.epoch_seconds)));
        }
        if m.subjects.is_empty() {
            return Err(manifest_err(&path, "field `subjects`: no subjects listed"));
        }
        let mut seen = BTreeMap::new();
        for (i, s) in m.subjects.iter().enumerate() {
            let at = format!("field `subjects[{i}]`");
            if s.id.is_empty() {
                return Err(manifest_err(&path, format!("{at}.id: empty subject id")));
            }
            if let Some(first) = seen.insert(s.id.as_str(), i) {
                return Err(manifest_err(&path, format!("{at}.id: duplicate subject id {:?} (also subjects[{first}])", s.id)));
            }
            if s.edf.is_some() && s.tensor.is_some() {
                return Err(manifest_err(&path, format!("{at}: give either `edf` or `tensor`, not both")));
            }
            if s.tensor.is_some() && !s.rate_hz.is_some_and(|r| r > 0.0) {
                return Err(manifest_err(&path, format!("{at}.rate_hz: a positive rate is required with `tensor`")));
            }
            if let Some(h) = &s.health {
                if parse_health(h).is_none() {
                    return Err(manifest_err(&path, format!("{at}.health: expected \"healthy\" or \"unhealthy\", got {h:?}")));
                }
            }
        }
        let channels = match &m.channels {
            Some(names) => {
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                ChannelSpec::new(&refs).map_err(|e| manifest_err(&path, format!("field `channels`: {e}")))?
            }
            None => ChannelSpec::default(),
        };
        Ok(Self {
            path,
            dir,
            manifest,
            channels,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for s in &self.manifest.subjects {
            for rel in [Some(&s.labels), s.edf.as_ref(), s.tensor.as_ref()].into_iter().flatten() {
                let p = self.resolve(rel);
                if !p.is_file() {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.manifest.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.subjects.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.manifest.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn labels(&self, i: usize) -> Result<Vec<Option<StageLabel>>> {
        let p = self.resolve(&self.manifest.subjects[i].labels);
        let text = String::from_utf8(read(&p)?).map_err(|_| Error::format(&p, "label file is not UTF-8"))?;
        parse_labels(&text).map_err(|m| Error::format(&p, m))
    }

    /// Channel series in manifest channel order and their rates.
    pub fn signals(&self, i: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        let s = &self.manifest.subjects[i];
        if let Some(rel) = &s.tensor {
            let p = self.resolve(rel);
            let t = tensor_io::load(&p)?;
            if t.rank() != 2 || t.shape()[0] != self.channels.len() {
                return Err(Error::format(
                    &p,
                    format!("expected a [{} x T] tensor, got shape {:?}", self.channels.len(), t.shape()),
                ));
            }
            let rate = s.rate_hz.expect("validated");
            return Ok((0..t.shape()[0]).map(|r| (t.row(r).to_vec(), rate)).collect());
        }
        if let Some(rel) = &s.edf {
            let p = self.resolve(rel);
            let rec = parse_edf(&read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
            let mut out = Vec::with_capacity(self.channels.len());
            let mut absent = Vec::new();
            for name in &self.channels.names {
                match rec.signals.iter().position(|sig| &sig.label == name) {
                    Some(j) => out.push((rec.signals[j].physical(), rec.rate_hz(j))),
                    None => absent.push(name.as_str()),
                }
            }
            if !absent.is_empty() {
                return Err(Error::format(&p, format!("missing channels: {}", absent.join(", "))));
            }
            return Ok(out);
        }
        Err(Error::Invalid(format!("subject {} has no signal source", s.id)))
    }

    pub fn slice_options(&self, epoch_samples: usize) -> SliceOptions {
        SliceOptions {
            epoch_seconds: self.manifest.epoch_seconds,
            epoch_samples,
            drop_tail_epochs: self.manifest.drop_tail_epochs,
        }
    }

    pub fn subject_epochs(&self, i: usize, epoch_samples: usize) -> Result<SlicedEpochs> {
        let labels = self.labels(i)?;
        let signals = self.signals(i)?;
        let views: Vec<ChannelSignal<'_>> = signals
            .iter()
            .map(|(x, r)| ChannelSignal {
                samples: x,
                rate_hz: *r,
            })
            .collect();
        Ok(slice_epochs(&views, &labels, &self.manifest.subjects[i].id, &self.slice_options(epoch_samples))?)
    }

    /// Epochs of every subject in manifest order. Subjects are decoded in
    /// parallel.
    pub fn epochs(&self, epoch_samples: usize) -> Result<Vec<bimamba_core::data::Sample>> {
        let parts: Vec<Result<SlicedEpochs>> = (0..self.len())
            .into_par_iter()
            .map(|i| self.subject_epochs(i, epoch_samples))
            .collect();
        let mut out = Vec::new();
        for p in parts {
            out.extend(p?.samples);
        }
        Ok(out)
    }

    /// Label sequences as hypnograms, with health labels when present.
    /// Unscored epochs are masked out.
    pub fn hypnograms(&self) -> Result<Vec<Hypnogram>> {
        (0..self.len())
            .map(|i| {
                let s = &self.manifest.subjects[i];
                let labels = self.labels(i)?;
                let stages = labels.iter().map(|l| l.unwrap_or(StageLabel::W)).collect();
                let mut h = Hypnogram::new(&s.id, stages);
                h.mask = labels.iter().map(Option::is_some).collect();
                if let Some(hl) = s.health.as_deref().and_then(parse_health) {
                    h = h.with_health(hl);
                }
                Ok(h)
            })
            .collect()
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write(path, m.to_json())
}
