//! Datasets on disk: one `<video_id>.tadf` file per video next to a JSON
//! annotation file per split.

use std::fs;
use std::path::{Path, PathBuf};

use tadtr_core::data::{generate_synthetic, resize_features, AnnotatedVideo, SyntheticConfig};

use crate::annotations::Annotations;
use crate::error::{io_error, Error, Result};
use crate::format::{load_features, store_features};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<AnnotatedVideo>,
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.tadf"))
}

/// Loads every annotated video and resizes its features to `length` frames.
pub fn load_split(annotations: &Path, features_dir: &Path, length: usize) -> Result<Dataset> {
    let ann = Annotations::load(annotations)?;
    let mut videos = Vec::with_capacity(ann.videos.len());
    for meta in ann.videos {
        let raw = load_features(feature_path(features_dir, &meta.video_id))?;
        let features = resize_features(&raw, length).map_err(|e| Error::Annotation {
            video_id: meta.video_id.clone(),
            reason: e.to_string(),
        })?;
        videos.push(AnnotatedVideo {
            video_id: meta.video_id,
            duration_sec: meta.duration_sec,
            features,
            actions: meta.actions,
        });
    }
    Ok(Dataset {
        classes: ann.classes,
        videos,
    })
}

/// Feature files in `dir`, sorted by name.
pub fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tadf"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn class_names(count: usize) -> Vec<String> {
    (0..count).map(|k| format!("class_{k}")).collect()
}

/// Where [`write_synthetic`] put things.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLayout {
    pub features_dir: PathBuf,
    pub train_annotations: PathBuf,
    pub val_annotations: PathBuf,
}

/// Generates a synthetic benchmark and writes it under `root`: the first
/// `train_count` videos form the training split, the rest validation.
pub fn write_synthetic(root: &Path, cfg: &SyntheticConfig, train_count: usize) -> Result<SyntheticLayout> {
    let mut generated = generate_synthetic(cfg)?;
    if train_count > generated.videos.len() {
        return Err(Error::Config {
            origin: "synthetic".into(),
            reason: format!(
                "{train_count} training videos requested from {}",
                generated.videos.len()
            ),
        });
    }
    let layout = SyntheticLayout {
        features_dir: root.join("features"),
        train_annotations: root.join("train.json"),
        val_annotations: root.join("val.json"),
    };
    for v in &generated.videos {
        store_features(&v.features, feature_path(&layout.features_dir, &v.video_id))?;
    }
    let classes = class_names(cfg.num_classes);
    let val_videos = generated.videos.split_off(train_count);
    Annotations::from_videos(classes.clone(), &generated.videos).save(&layout.train_annotations)?;
    Annotations::from_videos(classes, &val_videos).save(&layout.val_annotations)?;
    Ok(layout)
}
