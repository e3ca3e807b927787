//! Window scoring against banks, score fusion and temporal smoothing.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::{NoObjectPolicy, Normalization, PipelineConfig};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::partition::PatchSet;
use crate::scalar::Scalar;

/// The patch that lies farthest from the bank, and its nearest item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankMatch {
    pub distance: f64,
    pub patch_index: usize,
    pub item_index: usize,
}

/// Max over patches of the distance to the nearest bank item. `None` when
/// the window produced no patches of this kind.
pub fn window_bank_match<T: Scalar>(patches: &PatchSet<T>, bank: &MemoryBank<T>) -> Result<Option<BankMatch>> {
    if patches.kind != bank.kind {
        return Err(Error::validation(format!(
            "{} patches scored against a {} bank",
            patches.kind.name(),
            bank.kind.name()
        )));
    }
    let mut worst: Option<BankMatch> = None;
    for (i, row) in patches.rows().enumerate() {
        let nn = bank.nearest(row)?;
        if worst.is_none_or(|w| nn.distance > w.distance) {
            worst = Some(BankMatch { distance: nn.distance, patch_index: i, item_index: nn.index });
        }
    }
    Ok(worst)
}

pub fn window_bank_score<T: Scalar>(patches: &PatchSet<T>, bank: &MemoryBank<T>) -> Result<Option<f64>> {
    Ok(window_bank_match(patches, bank)?.map(|m| m.distance))
}

/// Raw bank distances of one window before the no-object policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindowScore {
    pub video_id: String,
    pub anchor_frame: u64,
    /// Last frame index covered by the window.
    pub window_end: u64,
    pub s_spatial: Option<f64>,
    pub s_temporal: Option<f64>,
    pub s_highlevel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub video_id: String,
    pub anchor_frame: u64,
    pub window_end: u64,
    pub s_spatial: f64,
    pub s_temporal: f64,
    pub s_highlevel: f64,
    pub has_objects: bool,
}

/// Fills missing local scores. `MinObserved` uses the minimum spatial and
/// temporal score over windows that have objects (0 if none do).
pub fn resolve_no_object(raw: &[RawWindowScore], policy: NoObjectPolicy) -> Vec<WindowScore> {
    let floor = |pick: fn(&RawWindowScore) -> Option<f64>| match policy {
        NoObjectPolicy::Zero => 0.0,
        NoObjectPolicy::MinObserved => raw.iter().filter_map(pick).reduce(f64::min).unwrap_or(0.0),
    };
    let spatial_floor = floor(|r| r.s_spatial);
    let temporal_floor = floor(|r| r.s_temporal);
    raw.iter()
        .map(|r| WindowScore {
            video_id: r.video_id.clone(),
            anchor_frame: r.anchor_frame,
            window_end: r.window_end,
            s_spatial: r.s_spatial.unwrap_or(spatial_floor),
            s_temporal: r.s_temporal.unwrap_or(temporal_floor),
            s_highlevel: r.s_highlevel,
            has_objects: r.s_spatial.is_some() || r.s_temporal.is_some(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub local_weights: [f64; 2],
    pub stream_weights: [f64; 2],
    pub normalization: Normalization,
    pub smoothing_sigma: f64,
}

impl From<&PipelineConfig> for FusionParams {
    fn from(cfg: &PipelineConfig) -> Self {
        Self {
            local_weights: cfg.local_weights,
            stream_weights: cfg.stream_weights,
            normalization: cfg.normalization,
            smoothing_sigma: cfg.smoothing_sigma,
        }
    }
}

impl FusionParams {
    pub fn local_score(&self, w: &WindowScore) -> f64 {
        self.local_weights[0] * w.s_spatial + self.local_weights[1] * w.s_temporal
    }
}

/// Per-frame scores of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    /// Fused scores before smoothing.
    pub unsmoothed_scores: Vec<f64>,
    /// The video's windows, ordered by anchor frame.
    pub windows: Vec<WindowScore>,
    /// Index into `windows` of the window each frame takes its score from.
    pub frame_window: Vec<usize>,
    pub params: FusionParams,
}

/// Population mean and standard deviation (`1/n`).
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// z-score under `(mean, std)`; a degenerate population maps to 0.
fn zscore(v: f64, (mean, std): (f64, f64)) -> f64 {
    if std <= 1e-12 * mean.abs().max(1.0) || !std.is_finite() {
        0.0
    } else {
        (v - mean) / std
    }
}

/// Combines local and global scores into one z-normalized score per window
/// and spreads window scores onto frames. Smoothing is not applied here.
///
/// Frame `f` takes the score of the window with the largest anchor `<= f`;
/// frames before the first anchor take the first window's score. A video
/// spans frames `0..=max window_end`.
pub fn fuse_scores(windows: &[WindowScore], params: &FusionParams) -> Result<Vec<ScoreSeries>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(w) = windows.iter().find(|w| {
        !(w.s_spatial.is_finite() && w.s_temporal.is_finite() && w.s_highlevel.is_finite())
            || w.s_spatial < 0.0
            || w.s_temporal < 0.0
            || w.s_highlevel < 0.0
    }) {
        return Err(Error::validation(format!(
            "window {}@{} has an invalid raw score",
            w.video_id, w.anchor_frame
        )));
    }
    let mut by_video: BTreeMap<&str, Vec<&WindowScore>> = BTreeMap::new();
    for w in windows {
        by_video.entry(w.video_id.as_str()).or_default().push(w);
    }
    let las = |w: &&WindowScore| params.local_score(w);
    let gas = |w: &&WindowScore| w.s_highlevel;
    let global_stats = (mean_std(windows.iter().map(|w| params.local_score(w))), mean_std(windows.iter().map(|w| w.s_highlevel)));

    let mut out = Vec::with_capacity(by_video.len());
    for (video_id, mut ws) in by_video {
        ws.sort_by_key(|w| w.anchor_frame);
        let (las_stats, gas_stats) = match params.normalization {
            Normalization::TestSet => global_stats,
            Normalization::PerVideo => (mean_std(ws.iter().map(las)), mean_std(ws.iter().map(gas))),
        };
        let window_scores: Vec<f64> = ws
            .iter()
            .map(|w| {
                params.stream_weights[0] * zscore(las(w), las_stats)
                    + params.stream_weights[1] * zscore(gas(w), gas_stats)
            })
            .collect();
        let frames = ws.iter().map(|w| w.window_end.max(w.anchor_frame)).max().unwrap_or(0) as usize + 1;
        let mut frame_window = Vec::with_capacity(frames);
        let mut current = 0usize;
        for f in 0..frames as u64 {
            while current + 1 < ws.len() && ws[current + 1].anchor_frame <= f {
                current += 1;
            }
            frame_window.push(current);
        }
        let frame_scores: Vec<f64> = frame_window.iter().map(|&i| window_scores[i]).collect();
        out.push(ScoreSeries {
            video_id: video_id.to_string(),
            unsmoothed_scores: frame_scores.clone(),
            frame_scores,
            windows: ws.into_iter().cloned().collect(),
            frame_window,
            params: *params,
        });
    }
    Ok(out)
}

/// Discrete Gaussian kernel of standard deviation `sigma` and radius
/// `ceil(3 sigma)`, renormalized over the taps that fall inside the series.
pub fn gaussian_smooth(values: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::parameter(format!("smoothing sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 || values.is_empty() {
        return Ok(values.to_vec());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = values.len() as isize;
    Ok((0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, w) in (-radius..=radius).zip(&weights) {
                let j = i + k;
                if (0..n).contains(&j) {
                    acc += w * values[j as usize];
                    norm += w;
                }
            }
            acc / norm
        })
        .collect())
}

pub fn smooth_scores(series: &ScoreSeries, sigma: f64) -> Result<ScoreSeries> {
    let mut out = series.clone();
    out.frame_scores = gaussian_smooth(&series.frame_scores, sigma)?;
    out.params.smoothing_sigma = sigma;
    Ok(out)
}

/// One CSV row per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreRow {
    pub video_id: String,
    pub frame_index: u64,
    pub s_spatial: f64,
    pub s_temporal: f64,
    pub s_highlevel: f64,
    pub fused_score: f64,
    /// 0 when the frame's window had no object and its local scores come
    /// from the no-object policy.
    pub has_objects: u8,
    pub fused_unsmoothed: f64,
}

pub fn frame_rows(series: &[ScoreSeries]) -> Vec<FrameScoreRow> {
    let mut rows = Vec::new();
    for s in series {
        for (f, ((&score, &raw), &wi)) in s.frame_scores.iter().zip(&s.unsmoothed_scores).zip(&s.frame_window).enumerate() {
            let w = &s.windows[wi];
            rows.push(FrameScoreRow {
                video_id: s.video_id.clone(),
                frame_index: f as u64,
                s_spatial: w.s_spatial,
                s_temporal: w.s_temporal,
                s_highlevel: w.s_highlevel,
                fused_score: score,
                has_objects: u8::from(w.has_objects),
                fused_unsmoothed: raw,
            });
        }
    }
    rows
}

pub fn write_scores_csv<W: Write>(series: &[ScoreSeries], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in frame_rows(series) {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(source: R) -> Result<Vec<FrameScoreRow>> {
    csv::Reader::from_reader(source)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("score CSV: {e}"))
    }
}
