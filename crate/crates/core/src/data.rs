//! Synthetic untrimmed videos with planted actions, plus the coordinate and
//! length conventions shared by every data source.
//!
//! A synthetic video has one feature frame per second. Frame `τ` covers the
//! second `[τ, τ + 1)`, so an action occupying frames `s..e` is annotated as
//! `[s, e]` seconds and normalizes to `[s / T, e / T]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::interp_forward;
use crate::matching::GroundTruthAction;
use crate::segment::Segment;
use crate::tensor::{Scalar, Tensor};

/// One video: its feature sequence and normalized ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedVideo {
    pub video_id: String,
    pub duration_sec: Scalar,
    /// `[T, C_V]`.
    pub features: Tensor,
    pub actions: Vec<GroundTruthAction>,
}

impl AnnotatedVideo {
    /// Ground-truth intervals back in seconds, as `(label, start, end)`.
    pub fn actions_in_seconds(&self) -> Vec<(usize, Scalar, Scalar)> {
        self.actions
            .iter()
            .map(|a| {
                let (s, e) = to_seconds(&a.segment, self.duration_sec);
                (a.label, s, e)
            })
            .collect()
    }
}

/// Converts a `[start, end]` interval in seconds to a normalized segment.
///
/// Rejects non-finite values, `start >= end` and intervals leaving
/// `[0, duration]`.
pub fn normalize_interval(start_sec: Scalar, end_sec: Scalar, duration_sec: Scalar) -> Result<Segment> {
    if !(duration_sec.is_finite() && duration_sec > 0.0) {
        return Err(Error::Data(format!("duration {duration_sec} must be positive")));
    }
    if !(start_sec.is_finite() && end_sec.is_finite()) {
        return Err(Error::Data(format!("non-finite interval [{start_sec}, {end_sec}]")));
    }
    if start_sec >= end_sec {
        return Err(Error::Data(format!(
            "empty or inverted interval [{start_sec}, {end_sec}]"
        )));
    }
    if start_sec < 0.0 || end_sec > duration_sec {
        return Err(Error::Data(format!(
            "interval [{start_sec}, {end_sec}] outside [0, {duration_sec}]"
        )));
    }
    Ok(Segment::from_interval(start_sec / duration_sec, end_sec / duration_sec))
}

pub fn to_seconds(segment: &Segment, duration_sec: Scalar) -> (Scalar, Scalar) {
    (segment.start() * duration_sec, segment.end() * duration_sec)
}

/// Linear resampling of `x[T, C]` to `len` rows with both endpoints anchored.
pub fn resize_features(x: &Tensor, len: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::Data(format!(
            "resize needs at least two frames, got {:?}",
            x.shape()
        )));
    }
    if len < 2 {
        return Err(Error::Data(format!("resize target length {len} is below 2")));
    }
    let (t, c) = (x.rows(), x.cols());
    if len == t {
        return Ok(x.clone());
    }
    let step = (t - 1) as Scalar / (len - 1) as Scalar;
    let mut out = vec![0.0; len * c];
    for (l, row) in out.chunks_exact_mut(c).enumerate() {
        // The last row is pinned so rounding in `l * step` cannot move it.
        let u = if l + 1 == len {
            (t - 1) as Scalar
        } else {
            l as Scalar * step
        };
        interp_forward(x.data(), t, c, &[u], row);
    }
    Ok(Tensor::new(&[len, c], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    /// Frames per video; also its duration in seconds.
    pub length: usize,
    pub feature_dim: usize,
    /// Inclusive range of planted actions per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive range of one action's length as a fraction of the video.
    pub duration_fraction: (Scalar, Scalar),
    pub noise_sigma: Scalar,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_videos: 250,
            num_classes: 5,
            length: 100,
            feature_dim: 16,
            actions_per_video: (1, 4),
            duration_fraction: (0.05, 0.2),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn frames(&self, fraction: Scalar) -> usize {
        let n = libm::round(fraction * self.length as Scalar) as usize;
        n.clamp(1, self.length)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        let (lo, hi) = self.actions_per_video;
        let (flo, fhi) = self.duration_fraction;
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be positive".into());
        }
        if self.length < 2 {
            return bad(format!("length {} is below 2", self.length));
        }
        if lo > hi {
            return bad(format!("actions_per_video range ({lo}, {hi}) is empty"));
        }
        if !(flo > 0.0 && flo <= fhi && fhi <= 1.0) {
            return bad(format!(
                "duration_fraction range ({flo}, {fhi}) must satisfy 0 < lo <= hi <= 1"
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        // Every draw must fit, so the worst case decides feasibility.
        let worst = hi * self.frames(fhi);
        if worst > self.length {
            return bad(format!(
                "infeasible packing: up to {hi} actions of {} frames exceed {} frames",
                self.frames(fhi),
                self.length
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// One unit-norm vector per class.
    pub signatures: Vec<Vec<Scalar>>,
    pub videos: Vec<AnnotatedVideo>,
}

/// Background frames are `σ·noise`; frames inside an action of class `k` are
/// `v_k + σ·noise`. Actions never overlap.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Vec<Scalar>> = (0..cfg.num_classes)
        .map(|_| loop {
            let v: Vec<Scalar> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<Scalar>());
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let (t, c) = (cfg.length, cfg.feature_dim);
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for index in 0..cfg.num_videos {
        let count = rng.gen_range(cfg.actions_per_video.0..=cfg.actions_per_video.1);
        let mut planted: Vec<(usize, usize)> = (0..count)
            .map(|_| {
                let frac = rng.gen_range(cfg.duration_fraction.0..=cfg.duration_fraction.1);
                (rng.gen_range(0..cfg.num_classes), cfg.frames(frac))
            })
            .collect();
        planted.shuffle(&mut rng);

        // Spread the free frames over the count + 1 gaps around the actions.
        let free = t - planted.iter().map(|&(_, n)| n).sum::<usize>();
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();

        let mut data: Vec<Scalar> = (0..t * c)
            .map(|_| {
                let z: Scalar = StandardNormal.sample(&mut rng);
                cfg.noise_sigma * z
            })
            .collect();
        let mut actions = Vec::with_capacity(count);
        let mut used = 0;
        for (&(label, n), &cut) in planted.iter().zip(&cuts) {
            let start = cut + used;
            for row in data[start * c..(start + n) * c].chunks_exact_mut(c) {
                for (x, s) in row.iter_mut().zip(&signatures[label]) {
                    *x += s;
                }
            }
            actions.push(GroundTruthAction {
                label,
                segment: normalize_interval(start as Scalar, (start + n) as Scalar, t as Scalar)?,
            });
            used += n;
        }
        videos.push(AnnotatedVideo {
            video_id: format!("video_{index:04}"),
            duration_sec: t as Scalar,
            features: Tensor::new(&[t, c], data)?,
            actions,
        });
    }
    Ok(SyntheticDataset { signatures, videos })
}
