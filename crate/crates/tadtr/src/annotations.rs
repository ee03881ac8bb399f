//! JSON annotation files: a class list plus per-video actions in seconds.
//!
//! ```json
//! {"classes": ["jump", "run"],
//!  "videos": [{"video_id": "v1", "duration_sec": 10.0,
//!              "actions": [{"label": "run", "start_sec": 2.0, "end_sec": 6.0}]}]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tadtr_core::data::{normalize_interval, to_seconds, AnnotatedVideo};
use tadtr_core::matching::GroundTruthAction;
use tadtr_core::Scalar;

use crate::error::{io_error, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub label: Option<String>,
    pub start_sec: Option<Scalar>,
    pub end_sec: Option<Scalar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: Option<String>,
    pub duration_sec: Option<Scalar>,
    pub actions: Option<Vec<ActionRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

/// A validated video entry with normalized segments and no features yet.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration_sec: Scalar,
    pub actions: Vec<GroundTruthAction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    pub classes: Vec<String>,
    pub videos: Vec<VideoMeta>,
}

impl Annotations {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        file.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(path, &text)
    }

    pub fn from_videos(classes: Vec<String>, videos: &[AnnotatedVideo]) -> Self {
        Self {
            classes,
            videos: videos
                .iter()
                .map(|v| VideoMeta {
                    video_id: v.video_id.clone(),
                    duration_sec: v.duration_sec,
                    actions: v.actions.clone(),
                })
                .collect(),
        }
    }

    pub fn to_file(&self) -> AnnotationFile {
        AnnotationFile {
            classes: self.classes.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoRecord {
                    video_id: Some(v.video_id.clone()),
                    duration_sec: Some(v.duration_sec),
                    actions: Some(
                        v.actions
                            .iter()
                            .map(|a| {
                                let (s, e) = to_seconds(&a.segment, v.duration_sec);
                                ActionRecord {
                                    label: Some(self.classes[a.label].clone()),
                                    start_sec: Some(s),
                                    end_sec: Some(e),
                                }
                            })
                            .collect(),
                    ),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file()).expect("annotations serialize");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        fs::write(path, text).map_err(io_error(path))
    }
}

impl AnnotationFile {
    pub fn validate(self) -> Result<Annotations> {
        let mut videos = Vec::with_capacity(self.videos.len());
        for (index, record) in self.videos.into_iter().enumerate() {
            let fallback = format!("#{index}");
            let video_id = record.video_id.ok_or_else(|| Error::Annotation {
                video_id: fallback,
                reason: "missing field `video_id`".into(),
            })?;
            let fail = |reason: String| Error::Annotation {
                video_id: video_id.clone(),
                reason,
            };
            let duration_sec = record
                .duration_sec
                .ok_or_else(|| fail("missing field `duration_sec`".into()))?;
            let records = record.actions.ok_or_else(|| fail("missing field `actions`".into()))?;
            let mut actions = Vec::with_capacity(records.len());
            for (k, a) in records.into_iter().enumerate() {
                let missing = |field: &str| fail(format!("action {k}: missing field `{field}`"));
                let label = a.label.ok_or_else(|| missing("label"))?;
                let start = a.start_sec.ok_or_else(|| missing("start_sec"))?;
                let end = a.end_sec.ok_or_else(|| missing("end_sec"))?;
                let class = self
                    .classes
                    .iter()
                    .position(|c| *c == label)
                    .ok_or_else(|| Error::UnknownLabel {
                        video_id: video_id.clone(),
                        label: label.clone(),
                    })?;
                let segment =
                    normalize_interval(start, end, duration_sec).map_err(|e| fail(format!("action {k}: {e}")))?;
                actions.push(GroundTruthAction { label: class, segment });
            }
            videos.push(VideoMeta {
                video_id,
                duration_sec,
                actions,
            });
        }
        Ok(Annotations {
            classes: self.classes,
            videos,
        })
    }
}
