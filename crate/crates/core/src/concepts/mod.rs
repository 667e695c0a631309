//! Concept labels for neurons, persisted as an append-only event log.
//!
//! The log is UTF-8 with one JSON object per line. Two event types exist:
//!
//! ```text
//! {"event":"concept_created","id":"mass","display_name":"Mass","at":"2026-01-01T00:00:00Z"}
//! {"event":"neurons_labeled","neurons":[{"layer":4,"channel":3}],"concept":"mass",
//!  "patch_id":"img:0:0","iou":0.41,"at":"2026-01-01T00:00:05Z"}
//! ```
//!
//! Each neuron carries at most one current concept; relabeling overwrites it
//! while the audit trail keeps every assignment. Replaying any prefix of the
//! log reproduces the labeling as it was at that point.

mod report;

pub use report::{
    activation_report, concept_means, region_report, ConceptReport, ConceptScore, ReportError, ReportKind,
};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NeuronRef;

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("concept name is empty")]
    EmptyName,
    #[error("concept name {0:?} has no letters or digits")]
    InvalidName(String),
    #[error("concept {0:?} already exists")]
    Duplicate(String),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("unknown neuron {0}")]
    UnknownNeuron(NeuronRef),
    #[error("no neurons selected")]
    EmptySelection,
    #[error("label log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub display_name: String,
    pub created_at: DateTime<Utc>,
}

/// Lowercase ASCII slug: runs of anything but letters and digits become `-`.
pub fn slugify(name: &str) -> String {
    let mut slug = String::new();
    for ch in name.trim().chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            slug.push(ch);
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    slug
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelContext {
    pub patch_id: Option<String>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub neuron: NeuronRef,
    pub concept: String,
    pub previous: Option<String>,
    pub at: DateTime<Utc>,
    pub patch_id: Option<String>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LabelEvent {
    ConceptCreated {
        id: String,
        display_name: String,
        #[serde(with = "rfc3339")]
        at: DateTime<Utc>,
    },
    NeuronsLabeled {
        neurons: Vec<NeuronRef>,
        concept: String,
        #[serde(default)]
        patch_id: Option<String>,
        #[serde(default)]
        iou: Option<f64>,
        #[serde(with = "rfc3339")]
        at: DateTime<Utc>,
    },
}

mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(at: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&at.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// The set of neurons that may be labeled: channels `0..count` of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSpace {
    pub layer: usize,
    pub count: usize,
}

impl NeuronSpace {
    pub fn contains(&self, n: NeuronRef) -> bool {
        n.layer == self.layer && n.channel < self.count
    }
}

/// Snapshot of all concepts and neuron assignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labeling {
    concepts: Vec<Concept>,
    assignments: BTreeMap<NeuronRef, String>,
    audit: Vec<AuditRecord>,
}

impl Labeling {
    /// Concepts in creation order.
    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    /// Position of a concept in creation order.
    pub fn concept_rank(&self, id: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.id == id)
    }

    pub fn label_of(&self, neuron: NeuronRef) -> Option<&str> {
        self.assignments.get(&neuron).map(String::as_str)
    }

    pub fn assignments(&self) -> &BTreeMap<NeuronRef, String> {
        &self.assignments
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn is_unlabeled(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Neurons currently labeled with `concept`, in channel order.
    pub fn neurons_with(&self, concept: &str) -> Vec<NeuronRef> {
        self.assignments
            .iter()
            .filter(|(_, c)| c.as_str() == concept)
            .map(|(n, _)| *n)
            .collect()
    }

    fn check_new_concept(&self, name: &str) -> Result<(String, String), ConceptError> {
        let display = name.trim();
        if display.is_empty() {
            return Err(ConceptError::EmptyName);
        }
        let id = slugify(display);
        if id.is_empty() {
            return Err(ConceptError::InvalidName(display.to_string()));
        }
        let lowered = display.to_lowercase();
        if self
            .concepts
            .iter()
            .any(|c| c.id == id || c.display_name.to_lowercase() == lowered)
        {
            return Err(ConceptError::Duplicate(display.to_string()));
        }
        Ok((id, display.to_string()))
    }

    /// Applies one event. Events that would fail validation are rejected
    /// without changing the snapshot.
    pub fn apply(&mut self, event: &LabelEvent, space: Option<NeuronSpace>) -> Result<(), ConceptError> {
        match event {
            LabelEvent::ConceptCreated { id, display_name, at } => {
                let (slug, display) = self.check_new_concept(display_name)?;
                if &slug != id {
                    return Err(ConceptError::InvalidName(display_name.clone()));
                }
                self.concepts.push(Concept {
                    id: slug,
                    display_name: display,
                    created_at: *at,
                });
            }
            LabelEvent::NeuronsLabeled {
                neurons,
                concept,
                patch_id,
                iou,
                at,
            } => {
                if self.concept(concept).is_none() {
                    return Err(ConceptError::UnknownConcept(concept.clone()));
                }
                if let Some(space) = space {
                    if let Some(bad) = neurons.iter().find(|n| !space.contains(**n)) {
                        return Err(ConceptError::UnknownNeuron(*bad));
                    }
                }
                for &neuron in neurons {
                    let previous = self.assignments.insert(neuron, concept.clone());
                    self.audit.push(AuditRecord {
                        neuron,
                        concept: concept.clone(),
                        previous,
                        at: *at,
                        patch_id: patch_id.clone(),
                        iou: *iou,
                    });
                }
            }
        }
        Ok(())
    }

    /// Replays a log body. A final line without a terminating newline that
    /// fails to parse is treated as a torn write and ignored.
    pub fn replay(text: &str, space: Option<NeuronSpace>) -> Result<Self, ConceptError> {
        let mut labeling = Labeling::default();
        let torn_tail = !text.is_empty() && !text.ends_with('\n');
        let lines: Vec<&str> = text.split('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let is_last = i + 1 == lines.len();
            let event: LabelEvent = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(_) if is_last && torn_tail => break,
                Err(e) => {
                    return Err(ConceptError::Log {
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            };
            labeling.apply(&event, space).map_err(|e| ConceptError::Log {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(labeling)
    }
}

type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Single-writer owner of the labeling and its log file.
pub struct ConceptStore {
    labeling: Labeling,
    space: NeuronSpace,
    log: Option<(PathBuf, File)>,
    clock: Clock,
}

impl std::fmt::Debug for ConceptStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConceptStore")
            .field("space", &self.space)
            .field("log", &self.log.as_ref().map(|(p, _)| p))
            .field("concepts", &self.labeling.concepts.len())
            .field("assignments", &self.labeling.assignments.len())
            .finish()
    }
}

impl ConceptStore {
    /// A store that is not backed by a file.
    pub fn in_memory(space: NeuronSpace) -> Self {
        Self {
            labeling: Labeling::default(),
            space,
            log: None,
            clock: Arc::new(Utc::now),
        }
    }

    /// Opens (creating if needed) a log file and replays it.
    pub fn open(path: impl AsRef<Path>, space: NeuronSpace) -> Result<Self, ConceptError> {
        let path = path.as_ref().to_path_buf();
        let mut text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let labeling = Labeling::replay(&text, Some(space))?;
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            if serde_json::from_str::<LabelEvent>(&text[keep..]).is_ok() {
                text.push('\n');
            } else {
                // torn write: drop it so new events start on a fresh line
                text.truncate(keep);
            }
            std::fs::write(&path, &text)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            labeling,
            space,
            log: Some((path, file)),
            clock: Arc::new(Utc::now),
        })
    }

    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    pub fn snapshot(&self) -> Labeling {
        self.labeling.clone()
    }

    pub fn space(&self) -> NeuronSpace {
        self.space
    }

    fn commit(&mut self, event: LabelEvent) -> Result<(), ConceptError> {
        let mut next = self.labeling.clone();
        next.apply(&event, Some(self.space))?;
        if let Some((_, file)) = self.log.as_mut() {
            let mut line = serde_json::to_string(&event).expect("events serialize");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
            file.sync_data()?;
        }
        self.labeling = next;
        Ok(())
    }

    pub fn add_concept(&mut self, name: &str) -> Result<Concept, ConceptError> {
        let (id, display_name) = self.labeling.check_new_concept(name)?;
        let at = (self.clock)();
        self.commit(LabelEvent::ConceptCreated {
            id: id.clone(),
            display_name,
            at,
        })?;
        Ok(self.labeling.concept(&id).cloned().expect("just created"))
    }

    /// Assigns `concept` to every listed neuron. Neurons that already carry
    /// it are left alone, so repeating a call changes nothing.
    pub fn label_neurons(
        &mut self,
        neurons: &[NeuronRef],
        concept: &str,
        context: LabelContext,
    ) -> Result<&Labeling, ConceptError> {
        if neurons.is_empty() {
            return Err(ConceptError::EmptySelection);
        }
        if self.labeling.concept(concept).is_none() {
            return Err(ConceptError::UnknownConcept(concept.to_string()));
        }
        if let Some(bad) = neurons.iter().find(|n| !self.space.contains(**n)) {
            return Err(ConceptError::UnknownNeuron(*bad));
        }
        let mut changed: Vec<NeuronRef> = Vec::new();
        for &n in neurons {
            if self.labeling.label_of(n) != Some(concept) && !changed.contains(&n) {
                changed.push(n);
            }
        }
        if !changed.is_empty() {
            let at = (self.clock)();
            self.commit(LabelEvent::NeuronsLabeled {
                neurons: changed,
                concept: concept.to_string(),
                patch_id: context.patch_id,
                iou: context.iou,
                at,
            })?;
        }
        Ok(&self.labeling)
    }
}

/// Formats a timestamp the way the log does.
pub fn format_timestamp(at: &DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Millis, true)
}
