//! End-to-end memorize, score, evaluate and synth stages over files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BuildStrategy, PipelineConfig, StageMode};
use crate::error::{Error, Result};
use crate::eval::{auroc, micro_concat, write_labels, LabelMap, LabeledScores};
use crate::feature_io::{read_clips, write_clips, ClipFeatures};
use crate::fusion::{build_global_features, build_local_features};
use crate::memory::{build_bank, load_bank, save_bank, BankOptions, MemoryBank};
use crate::partition::{highlevel_partition, spatial_partition, temporal_partition_with, PatchKind, PatchSet};
use crate::scalar::Scalar;
use crate::scoring::{
    fuse_scores, gaussian_smooth, resolve_no_object, smooth_scores, window_bank_score, write_scores_csv, FrameScoreRow,
    FusionParams, RawWindowScore, ScoreSeries, WindowScore,
};
use crate::synthetic::SynthDataset;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn bank_file(kind: PatchKind) -> &'static str {
    match kind {
        PatchKind::Spatial => "spatial.vpcb",
        PatchKind::Temporal => "temporal.vpcb",
        PatchKind::Highlevel => "highlevel.vpcb",
    }
}

/// Directory used for one ratio of a `--ratios` sweep.
pub fn ratio_dir(root: &Path, ratio: f64) -> PathBuf {
    root.join(format!("ratio-{ratio}"))
}

/// Patches of one window. Local sets are `None` when the window has no objects.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPatches<T> {
    pub video_id: String,
    pub anchor_frame: u64,
    pub window_end: u64,
    pub spatial: Option<PatchSet<T>>,
    pub temporal: Option<PatchSet<T>>,
    pub highlevel: PatchSet<T>,
}

pub fn window_patches<T: Scalar>(clip: &ClipFeatures, cfg: &PipelineConfig, mode: StageMode) -> Result<WindowPatches<T>> {
    clip.validate()?;
    let (spatial, temporal) = if clip.objects.is_empty() {
        (None, None)
    } else {
        let local = build_local_features::<T>(clip, cfg)?;
        let pool = cfg.temporal_pooling.for_stage(mode);
        (Some(spatial_partition(&local, cfg)?), Some(temporal_partition_with(&local, pool)?))
    };
    let global = build_global_features::<T>(clip, cfg)?;
    Ok(WindowPatches {
        video_id: clip.video_id.clone(),
        anchor_frame: clip.anchor_frame,
        window_end: clip.frame_indices.last().copied().unwrap_or(clip.anchor_frame),
        spatial,
        temporal,
        highlevel: highlevel_partition(&global, cfg)?,
    })
}

/// Training patches grouped per video, in video id order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPatches<T> {
    pub spatial: Vec<PatchSet<T>>,
    pub temporal: Vec<PatchSet<T>>,
    pub highlevel: Vec<PatchSet<T>>,
    pub clips: usize,
    pub extract_seconds: f64,
}

impl<T: Scalar> TrainPatches<T> {
    pub fn sets(&self, kind: PatchKind) -> &[PatchSet<T>] {
        match kind {
            PatchKind::Spatial => &self.spatial,
            PatchKind::Temporal => &self.temporal,
            PatchKind::Highlevel => &self.highlevel,
        }
    }

    pub fn count(&self, kind: PatchKind) -> usize {
        self.sets(kind).iter().map(PatchSet::len).sum()
    }
}

pub fn collect_train_patches<T: Scalar>(clips: &[ClipFeatures], cfg: &PipelineConfig) -> Result<TrainPatches<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let windows: Vec<WindowPatches<T>> = clips
        .par_iter()
        .map(|c| window_patches(c, cfg, StageMode::Memorize))
        .collect::<Result<_>>()?;
    let mut per_video: BTreeMap<&str, [Option<PatchSet<T>>; 3]> = BTreeMap::new();
    for w in &windows {
        let slot = per_video.entry(&w.video_id).or_default();
        for (i, set) in [w.spatial.as_ref(), w.temporal.as_ref(), Some(&w.highlevel)].into_iter().enumerate() {
            if let Some(set) = set {
                match &mut slot[i] {
                    Some(acc) => acc.extend_from(set)?,
                    None => slot[i] = Some(set.clone()),
                }
            }
        }
    }
    let mut out = TrainPatches {
        spatial: Vec::new(),
        temporal: Vec::new(),
        highlevel: Vec::new(),
        clips: clips.len(),
        extract_seconds: 0.0,
    };
    for [s, t, h] in per_video.into_values() {
        out.spatial.extend(s);
        out.temporal.extend(t);
        out.highlevel.extend(h);
    }
    out.extract_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Banks<T> {
    pub spatial: MemoryBank<T>,
    pub temporal: MemoryBank<T>,
    pub highlevel: MemoryBank<T>,
}

impl<T: Scalar> Banks<T> {
    pub fn get(&self, kind: PatchKind) -> &MemoryBank<T> {
        match kind {
            PatchKind::Spatial => &self.spatial,
            PatchKind::Temporal => &self.temporal,
            PatchKind::Highlevel => &self.highlevel,
        }
    }
}

pub fn build_banks<T: Scalar>(train: &TrainPatches<T>, cfg: &PipelineConfig, ratio: f64) -> Result<Banks<T>> {
    let opts = BankOptions {
        ratio,
        strategy: cfg.strategy,
        seed: cfg.seed,
        projection_dim: cfg.projection_dim,
        fingerprint: cfg.fingerprint(),
    };
    let build = |kind| {
        build_bank(train.sets(kind), &opts).map_err(|e| match e {
            Error::EmptyBank(m) => Error::EmptyBank(format!("{} bank: {m}", kind.name())),
            other => other,
        })
    };
    Ok(Banks {
        spatial: build(PatchKind::Spatial)?,
        temporal: build(PatchKind::Temporal)?,
        highlevel: build(PatchKind::Highlevel)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub kind: PatchKind,
    pub file: String,
    pub dim: usize,
    pub source_patches: usize,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub dtype: String,
    pub ratio: f64,
    pub strategy: BuildStrategy,
    pub seed: u64,
    pub clips: usize,
    pub banks: Vec<BankEntry>,
    pub extract_seconds: f64,
    pub build_seconds: f64,
    pub wall_seconds: f64,
    pub config: PipelineConfig,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds all three banks at `ratio` from already collected patches.
pub fn memorize_patches<T: Scalar>(
    train: &TrainPatches<T>,
    cfg: &PipelineConfig,
    ratio: f64,
) -> Result<(Banks<T>, Manifest)> {
    let start = Instant::now();
    let banks = build_banks(train, cfg, ratio)?;
    let build_seconds = start.elapsed().as_secs_f64();
    let banks_meta = PatchKind::ALL
        .iter()
        .map(|&kind| {
            let b = banks.get(kind);
            BankEntry {
                kind,
                file: bank_file(kind).to_string(),
                dim: b.dim,
                source_patches: b.source_patches,
                items: b.len(),
            }
        })
        .collect();
    let manifest = Manifest {
        fingerprint: cfg.fingerprint(),
        dtype: T::DTYPE.to_string(),
        ratio,
        strategy: cfg.strategy,
        seed: cfg.seed,
        clips: train.clips,
        banks: banks_meta,
        extract_seconds: train.extract_seconds,
        build_seconds,
        wall_seconds: train.extract_seconds + build_seconds,
        config: cfg.clone(),
    };
    Ok((banks, manifest))
}

/// Memorize stage: training clips to three banks at `cfg.ratio`.
pub fn memorize<T: Scalar>(clips: &[ClipFeatures], cfg: &PipelineConfig) -> Result<(Banks<T>, Manifest)> {
    let train = collect_train_patches(clips, cfg)?;
    memorize_patches(&train, cfg, cfg.ratio)
}

pub fn save_banks<T: Scalar>(banks: &Banks<T>, manifest: &Manifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for kind in PatchKind::ALL {
        save_bank(banks.get(kind), &dir.join(bank_file(kind)))?;
    }
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    crate::atomic_write(&dir.join(MANIFEST_FILE), &json)
}

/// Loads the three banks of `dir`, failing with config drift when their
/// fingerprint differs from `cfg`'s.
pub fn load_banks<T: Scalar>(dir: &Path, cfg: &PipelineConfig) -> Result<Banks<T>> {
    let fp = cfg.fingerprint();
    let load = |kind| -> Result<MemoryBank<T>> {
        let bank = load_bank::<T>(&dir.join(bank_file(kind)), Some(&fp))?;
        if bank.kind != kind {
            return Err(Error::Format(format!("{} holds a {} bank", bank_file(kind), bank.kind.name())));
        }
        Ok(bank)
    };
    Ok(Banks {
        spatial: load(PatchKind::Spatial)?,
        temporal: load(PatchKind::Temporal)?,
        highlevel: load(PatchKind::Highlevel)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRun {
    pub raw: Vec<RawWindowScore>,
    pub windows: Vec<WindowScore>,
    /// Smoothed per-video series.
    pub series: Vec<ScoreSeries>,
    pub seconds: f64,
}

impl ScoreRun {
    pub fn windows_per_second(&self) -> f64 {
        self.raw.len() as f64 / self.seconds.max(1e-9)
    }
}

pub fn score_window<T: Scalar>(clip: &ClipFeatures, banks: &Banks<T>, cfg: &PipelineConfig) -> Result<RawWindowScore> {
    let p = window_patches::<T>(clip, cfg, StageMode::Infer)?;
    let local = |set: &Option<PatchSet<T>>, bank| match set {
        Some(s) => window_bank_score(s, bank),
        None => Ok(None),
    };
    let s_highlevel = window_bank_score(&p.highlevel, &banks.highlevel)?
        .ok_or_else(|| Error::validation(format!("window {}@{} has no frames", p.video_id, p.anchor_frame)))?;
    Ok(RawWindowScore {
        s_spatial: local(&p.spatial, &banks.spatial)?,
        s_temporal: local(&p.temporal, &banks.temporal)?,
        s_highlevel,
        video_id: p.video_id,
        anchor_frame: p.anchor_frame,
        window_end: p.window_end,
    })
}

/// Score stage: raw window distances, no-object policy, fusion, smoothing.
pub fn score_clips<T: Scalar>(clips: &[ClipFeatures], banks: &Banks<T>, cfg: &PipelineConfig) -> Result<ScoreRun> {
    cfg.validate()?;
    let fp = cfg.fingerprint();
    for kind in PatchKind::ALL {
        let b = banks.get(kind);
        if b.fingerprint != fp {
            return Err(Error::ConfigDrift { expected: fp, found: b.fingerprint.clone() });
        }
        if b.kind != kind {
            return Err(Error::validation(format!("{} bank given where {} expected", b.kind.name(), kind.name())));
        }
    }
    let start = Instant::now();
    let raw: Vec<RawWindowScore> = clips.par_iter().map(|c| score_window(c, banks, cfg)).collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let windows = resolve_no_object(&raw, cfg.no_object_policy);
    let params = FusionParams::from(cfg);
    let series = fuse_scores(&windows, &params)?
        .iter()
        .map(|s| smooth_scores(s, cfg.smoothing_sigma))
        .collect::<Result<_>>()?;
    Ok(ScoreRun { raw, windows, series, seconds })
}

pub fn scores_csv(series: &[ScoreSeries]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_scores_csv(series, &mut buf)?;
    Ok(buf)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<ClipFeatures>> {
    read_clips(BufReader::new(File::open(path)?))
}

pub fn write_feature_file(clips: &[ClipFeatures], path: &Path) -> Result<u64> {
    let mut buf = Vec::new();
    let n = write_clips(clips, &mut buf)?;
    crate::atomic_write(path, &buf)?;
    Ok(n)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::atomic_write(path, bytes)
}

/// Writes `train.vpcf`, `test.vpcf` and `labels.json` into `dir`.
pub fn write_synth(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_feature_file(&ds.train, &dir.join("train.vpcf"))?;
    write_feature_file(&ds.test, &dir.join("test.vpcf"))?;
    let mut labels = Vec::new();
    write_labels(&ds.labels, &mut labels)?;
    labels.push(b'\n');
    crate::atomic_write(&dir.join("labels.json"), &labels)
}

/// Row names of the evaluation report, in order.
pub const REPORT_ROWS: [&str; 6] =
    ["fused", "fused_unsmoothed", "spatial_only", "temporal_only", "local_only", "global_only"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub auroc: f64,
}

/// Micro AUROC of the fused score and of every single-signal ablation.
///
/// Ablation signals are smoothed with the same sigma as the fused score.
/// Every scored video must have labels of the same frame count.
pub fn evaluate(rows: &[FrameScoreRow], labels: &LabelMap, params: &FusionParams) -> Result<Vec<EvalRow>> {
    let mut by_video: BTreeMap<&str, Vec<&FrameScoreRow>> = BTreeMap::new();
    for r in rows {
        by_video.entry(&r.video_id).or_default().push(r);
    }
    if by_video.is_empty() {
        return Err(Error::validation("no scored frames"));
    }
    type Signal = fn(&FrameScoreRow, &FusionParams) -> f64;
    let signals: [(Signal, bool); 6] = [
        (|r, _| r.fused_score, false),
        (|r, _| r.fused_unsmoothed, false),
        (|r, _| r.s_spatial, true),
        (|r, _| r.s_temporal, true),
        (|r, p| p.local_weights[0] * r.s_spatial + p.local_weights[1] * r.s_temporal, true),
        (|r, _| r.s_highlevel, true),
    ];
    let mut per_signal: Vec<Vec<LabeledScores>> = vec![Vec::new(); signals.len()];
    for (video, mut frames) in by_video {
        frames.sort_by_key(|r| r.frame_index);
        if frames.iter().enumerate().any(|(i, r)| r.frame_index != i as u64) {
            return Err(Error::validation(format!("{video}: frame indices are not 0..{}", frames.len())));
        }
        let truth = labels
            .get(video)
            .ok_or_else(|| Error::validation(format!("no labels for video {video}")))?;
        if truth.len() != frames.len() {
            return Err(Error::validation(format!(
                "{video}: {} scored frames but {} labels",
                frames.len(),
                truth.len()
            )));
        }
        for ((signal, smooth), out) in signals.iter().zip(per_signal.iter_mut()) {
            let mut values: Vec<f64> = frames.iter().map(|r| signal(r, params)).collect();
            if *smooth {
                values = gaussian_smooth(&values, params.smoothing_sigma)?;
            }
            out.push(LabeledScores::new(values, truth.clone())?);
        }
    }
    if let Some(video) = labels.keys().find(|v| !rows.iter().any(|r| &r.video_id == *v)) {
        return Err(Error::validation(format!("labelled video {video} has no scores")));
    }
    REPORT_ROWS
        .iter()
        .zip(&per_signal)
        .map(|(name, videos)| Ok(EvalRow { name: name.to_string(), auroc: auroc(&micro_concat(videos))? }))
        .collect()
}

pub fn format_report(rows: &[EvalRow]) -> String {
    let mut out = String::from("signal\tauroc\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\n", r.name, r.auroc));
    }
    out
}
