//! Point-track and fingertip-trajectory data model, file ingestion,
//! timestamp alignment, and resampling.
//!
//! Wire formats are JSONL, one frame per line:
//! tracks `{"t": float, "pts": [[x,y],...], "vis": [bool,...]}`,
//! fingertip trajectories `{"t": float, "tips": [12 floats]}`.

use crate::geometry::FingertipSet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("track set is empty")]
    Empty,
    #[error("duplicate timestamp {t}")]
    DuplicateTimestamp { t: f64 },
    #[error("point count changed from {expected} to {got}")]
    InconsistentN { expected: usize, got: usize },
    #[error("streams share no time overlap ([{a0}, {a1}] vs [{b0}, {b1}])")]
    NoOverlap { a0: f64, a1: f64, b0: f64, b1: f64 },
    #[error("input spans {duration} s, need at least {min} s at this rate")]
    TooShort { duration: f64, min: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Which agent produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackSource {
    Human,
    Robot,
}

/// One video frame of tracked 2D points with per-point visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub t: f64,
    pub pts: Vec<[f64; 2]>,
    pub vis: Vec<bool>,
}

impl TrackFrame {
    pub fn n(&self) -> usize {
        self.pts.len()
    }

    /// A frame with zero visible points carries no usable object state.
    pub fn is_degenerate(&self) -> bool {
        !self.vis.iter().any(|&v| v)
    }

    pub fn visible_points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.pts
            .iter()
            .zip(self.vis.iter())
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
    }

    fn validate(&self) -> Result<(), TrackIoError> {
        if !self.t.is_finite() {
            return Err(TrackIoError::NonFinite("timestamp"));
        }
        if self.pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(TrackIoError::NonFinite("point"));
        }
        Ok(())
    }
}

/// An ordered sequence of track frames sharing one point count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub frames: Vec<TrackFrame>,
    pub source: TrackSource,
}

impl TrackSet {
    /// Sorts frames by timestamp and validates the shared-N and
    /// strictly-increasing-timestamp invariants.
    pub fn new(mut frames: Vec<TrackFrame>, source: TrackSource) -> Result<Self, TrackIoError> {
        if frames.is_empty() {
            return Err(TrackIoError::Empty);
        }
        for f in &frames {
            f.validate()?;
            if f.pts.is_empty() {
                return Err(TrackIoError::InconsistentN {
                    expected: 1,
                    got: 0,
                });
            }
            if f.pts.len() != f.vis.len() {
                return Err(TrackIoError::InconsistentN {
                    expected: f.pts.len(),
                    got: f.vis.len(),
                });
            }
        }
        let n = frames[0].n();
        if let Some(bad) = frames.iter().find(|f| f.n() != n) {
            return Err(TrackIoError::InconsistentN {
                expected: n,
                got: bad.n(),
            });
        }
        frames.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite timestamps"));
        for w in frames.windows(2) {
            if w[0].t >= w[1].t {
                return Err(TrackIoError::DuplicateTimestamp { t: w[1].t });
            }
        }
        Ok(Self { frames, source })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].n()
    }

    pub fn first_t(&self) -> f64 {
        self.frames[0].t
    }

    pub fn last_t(&self) -> f64 {
        self.frames[self.frames.len() - 1].t
    }
}

/// Timestamped fingertip frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FingertipTrajectory {
    entries: Vec<(f64, FingertipSet)>,
}

#[derive(Serialize, Deserialize)]
struct TipRecord {
    t: f64,
    tips: [f64; 12],
}

impl FingertipTrajectory {
    pub fn new(entries: Vec<(f64, FingertipSet)>) -> Result<Self, TrackIoError> {
        if entries.is_empty() {
            return Err(TrackIoError::Empty);
        }
        for (t, tips) in &entries {
            if !t.is_finite() {
                return Err(TrackIoError::NonFinite("timestamp"));
            }
            if tips.flatten().iter().any(|v| !v.is_finite()) {
                return Err(TrackIoError::NonFinite("fingertip"));
            }
        }
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(TrackIoError::DuplicateTimestamp { t: w[1].0 });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn frames(&self) -> impl Iterator<Item = &FingertipSet> + '_ {
        self.entries.iter().map(|(_, f)| f)
    }

    pub fn entries(&self) -> &[(f64, FingertipSet)] {
        &self.entries
    }

    pub fn first_t(&self) -> f64 {
        self.entries[0].0
    }

    pub fn last_t(&self) -> f64 {
        self.entries[self.entries.len() - 1].0
    }

    /// Applies `f` to every frame, keeping timestamps.
    pub fn map_frames(&self, mut f: impl FnMut(&FingertipSet) -> FingertipSet) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, s)| (*t, f(s))).collect(),
        }
    }
}

/// One aligned (fingertips, track frame) sample; `t` is the track timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTuple {
    pub t: f64,
    pub tips: FingertipSet,
    pub frame: TrackFrame,
}

/// Synchronized demo resampled to a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncedDemo {
    pub rate: f64,
    pub tuples: Vec<(FingertipSet, TrackFrame)>,
}

impl SyncedDemo {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Track view of the demo.
    pub fn tracks(&self, source: TrackSource) -> Result<TrackSet, TrackIoError> {
        TrackSet::new(self.tuples.iter().map(|(_, f)| f.clone()).collect(), source)
    }

    /// Fingertip view of the demo.
    pub fn fingertips(&self) -> Result<FingertipTrajectory, TrackIoError> {
        FingertipTrajectory::new(self.tuples.iter().map(|(s, f)| (f.t, *s)).collect())
    }
}

fn open_lines(path: &Path) -> Result<Vec<String>, TrackIoError> {
    let text = fs::read_to_string(path).map_err(|source| TrackIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.to_string())
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// Loads a track JSONL file; frames are sorted by timestamp.
pub fn load_tracks(path: &Path, source: TrackSource) -> Result<TrackSet, TrackIoError> {
    let lines = open_lines(path)?;
    let mut frames = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let frame: TrackFrame =
            serde_json::from_str(line).map_err(|source| TrackIoError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
        if frame.pts.len() != frame.vis.len() {
            return Err(TrackIoError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!(
                    "pts has {} entries but vis has {}",
                    frame.pts.len(),
                    frame.vis.len()
                ),
            });
        }
        frames.push(frame);
    }
    TrackSet::new(frames, source)
}

/// Writes a track set in the JSONL wire format.
pub fn save_tracks(set: &TrackSet, path: &Path) -> Result<(), TrackIoError> {
    let wrap = |source| TrackIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    for frame in &set.frames {
        let line = serde_json::to_string(frame).expect("track frame serializes");
        writeln!(w, "{line}").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// Loads a fingertip trajectory JSONL file.
pub fn load_fingertips(path: &Path) -> Result<FingertipTrajectory, TrackIoError> {
    let lines = open_lines(path)?;
    let mut entries = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let rec: TipRecord = serde_json::from_str(line).map_err(|source| TrackIoError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        entries.push((rec.t, FingertipSet::unflatten(&rec.tips)));
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite timestamps"));
    FingertipTrajectory::new(entries)
}

/// Writes a fingertip trajectory in the JSONL wire format.
pub fn save_fingertips(traj: &FingertipTrajectory, path: &Path) -> Result<(), TrackIoError> {
    let wrap = |source| TrackIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    for (t, tips) in traj.entries() {
        let rec = TipRecord {
            t: *t,
            tips: tips.flatten(),
        };
        let line = serde_json::to_string(&rec).expect("tip record serializes");
        writeln!(w, "{line}").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// Index of the entry in sorted `times` nearest to `t`; ties break low.
fn nearest_index(times: &[f64], t: f64) -> usize {
    let hi = times.partition_point(|&x| x < t);
    if hi == 0 {
        return 0;
    }
    if hi == times.len() {
        return times.len() - 1;
    }
    let lo = hi - 1;
    if (t - times[lo]) <= (times[hi] - t) {
        lo
    } else {
        hi
    }
}

/// Pairs each track frame inside the time overlap with the fingertip frame
/// of nearest timestamp (ties toward the earlier frame).
pub fn align_streams(
    fts: &FingertipTrajectory,
    tracks: &TrackSet,
) -> Result<Vec<AlignedTuple>, TrackIoError> {
    let overlap_err = || TrackIoError::NoOverlap {
        a0: fts.first_t(),
        a1: fts.last_t(),
        b0: tracks.first_t(),
        b1: tracks.last_t(),
    };
    let lo = fts.first_t().max(tracks.first_t());
    let hi = fts.last_t().min(tracks.last_t());
    if lo > hi {
        return Err(overlap_err());
    }
    let ft_times: Vec<f64> = fts.timestamps().collect();
    let ft_frames: Vec<&FingertipSet> = fts.frames().collect();
    let mut out = Vec::new();
    for frame in &tracks.frames {
        if frame.t < lo || frame.t > hi {
            continue;
        }
        let idx = nearest_index(&ft_times, frame.t);
        out.push(AlignedTuple {
            t: frame.t,
            tips: *ft_frames[idx],
            frame: frame.clone(),
        });
    }
    if out.is_empty() {
        return Err(overlap_err());
    }
    Ok(out)
}

/// Resamples an aligned sequence to a uniform grid starting at the first
/// timestamp. Fingertips are linearly interpolated; track points are copied
/// from the nearest source tuple (tracked-point identity is preserved, so
/// pixel tracks are never interpolated).
pub fn resample(aligned: &[AlignedTuple], rate: f64) -> Result<SyncedDemo, TrackIoError> {
    assert!(rate > 0.0, "rate must be positive");
    if aligned.is_empty() {
        return Err(TrackIoError::Empty);
    }
    let t0 = aligned[0].t;
    let t_last = aligned[aligned.len() - 1].t;
    let duration = t_last - t0;
    if duration < 2.0 / rate {
        return Err(TrackIoError::TooShort {
            duration,
            min: 2.0 / rate,
        });
    }
    let times: Vec<f64> = aligned.iter().map(|a| a.t).collect();
    let count = ((duration * rate) + 1e-9).floor() as usize + 1;
    let mut tuples = Vec::with_capacity(count);
    for k in 0..count {
        let t = t0 + k as f64 / rate;
        let hi = times.partition_point(|&x| x < t);
        let tips = if hi < times.len() && times[hi] == t {
            aligned[hi].tips
        } else if hi == 0 {
            aligned[0].tips
        } else if hi == times.len() {
            aligned[hi - 1].tips
        } else {
            let (ta, tb) = (times[hi - 1], times[hi]);
            let w = (t - ta) / (tb - ta);
            let a = aligned[hi - 1].tips.flatten();
            let b = aligned[hi].tips.flatten();
            let mut mixed = [0.0; 12];
            for i in 0..12 {
                mixed[i] = a[i] + w * (b[i] - a[i]);
            }
            FingertipSet::unflatten(&mixed)
        };
        let mut frame = aligned[nearest_index(&times, t)].frame.clone();
        frame.t = t;
        tuples.push((tips, frame));
    }
    Ok(SyncedDemo { rate, tuples })
}

fn round_half_down(x: f64) -> usize {
    let f = x.floor();
    if x - f > 0.5 {
        f as usize + 1
    } else {
        f as usize
    }
}

/// Selects exactly `len` frames by nearest-index mapping from a uniform
/// parameterization of [0,1]. First and last frames are always preserved.
/// Source timestamps are kept when the chosen indices are strictly
/// increasing (always true when shrinking); otherwise timestamps are
/// rewritten to a uniform grid over the original span.
pub fn resample_to_length(a: &TrackSet, len: usize) -> TrackSet {
    assert!(len >= 2, "target length must be at least 2");
    let n = a.frames.len();
    let indices: Vec<usize> = (0..len)
        .map(|i| round_half_down(i as f64 * (n - 1) as f64 / (len - 1) as f64))
        .collect();
    let strictly_increasing = indices.windows(2).all(|w| w[0] < w[1]);
    let frames = indices
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            let mut f = a.frames[idx].clone();
            if !strictly_increasing {
                let span = a.last_t() - a.first_t();
                f.t = a.first_t() + i as f64 * span / (len - 1) as f64;
            }
            f
        })
        .collect();
    TrackSet {
        frames,
        source: a.source,
    }
}
