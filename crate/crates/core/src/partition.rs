//! Patch extraction: spatial and temporal patches from object features,
//! high-level patches from frame features.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
pub use crate::config::StageMode;
use crate::error::{Error, Result};
use crate::fusion::{GlobalFeatureTensor, LocalFeatureTensor};
use crate::scalar::Scalar;
use crate::tensor::{avg_pool_2d, temporal_global_pool, temporal_max_pool, GlobalPool, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Spatial,
    Temporal,
    Highlevel,
}

impl PatchKind {
    pub const ALL: [PatchKind; 3] = [PatchKind::Spatial, PatchKind::Temporal, PatchKind::Highlevel];

    pub fn name(self) -> &'static str {
        match self {
            PatchKind::Spatial => "spatial",
            PatchKind::Temporal => "temporal",
            PatchKind::Highlevel => "highlevel",
        }
    }
}

/// Where a patch came from. `object_index` is -1 for frame-level patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub video_id: String,
    pub anchor_frame: u64,
    pub object_index: i64,
    pub frame_index: Option<u64>,
}

/// `N x dim` row-major patch matrix of a single kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    pub kind: PatchKind,
    pub dim: usize,
    pub data: Vec<T>,
    pub provenance: Vec<Provenance>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn empty(kind: PatchKind, dim: usize) -> Self {
        Self { kind, dim, data: Vec::new(), provenance: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn push(&mut self, row: &[T], provenance: Provenance) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
        self.provenance.push(provenance);
    }

    /// Appends `other`, which must be of the same kind and dimension.
    pub fn extend_from(&mut self, other: &PatchSet<T>) -> Result<()> {
        if other.kind != self.kind || other.dim != self.dim {
            return Err(Error::validation(format!(
                "cannot merge {} patches of dim {} into {} patches of dim {}",
                other.kind.name(),
                other.dim,
                self.kind.name(),
                self.dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.provenance.extend(other.provenance.iter().cloned());
        Ok(())
    }

    pub fn concat<'a>(kind: PatchKind, dim: usize, sets: impl IntoIterator<Item = &'a PatchSet<T>>) -> Result<Self> {
        let mut out = Self::empty(kind, dim);
        for s in sets {
            out.extend_from(s)?;
        }
        Ok(out)
    }
}

/// Appearance patches: time-averaged object features pooled over
/// `cfg.spatial_pool` blocks, one `c'`-dim row per object and block.
pub fn spatial_partition<T: Scalar>(local: &LocalFeatureTensor<T>, cfg: &PipelineConfig) -> Result<PatchSet<T>> {
    let [n, c, _, h, w] = local.lf.dims();
    if n == 0 {
        return Err(Error::dimension("spatial partition of a window without objects"));
    }
    let (kh, kw) = cfg.spatial_pool.kernel();
    if h < kh || w < kw {
        return Err(Error::dimension(format!(
            "object features {h}x{w} smaller than spatial kernel {kh}x{kw}"
        )));
    }
    let mean = temporal_global_pool(&local.lf)?;
    let per_object = c * h * w;
    let mut out = PatchSet::empty(PatchKind::Spatial, c);
    let mut row = vec![T::zero(); c];
    for i in 0..n {
        let obj = Tensor::from_parts([c, h, w], mean.data()[i * per_object..(i + 1) * per_object].to_vec());
        let pooled = avg_pool_2d(&obj, (kh, kw), cfg.spatial_pool.stride(), Padding::Valid)?;
        let [_, ph, pw] = pooled.dims();
        for y in 0..ph {
            for x in 0..pw {
                for (ch, r) in row.iter_mut().enumerate() {
                    *r = pooled.get([ch, y, x]);
                }
                out.push(
                    &row,
                    Provenance {
                        video_id: local.video_id.clone(),
                        anchor_frame: local.anchor_frame,
                        object_index: i as i64,
                        frame_index: None,
                    },
                );
            }
        }
    }
    Ok(out)
}

/// Motion patches with the stage's default pooling (average when
/// memorizing, max when inferring).
pub fn temporal_partition<T: Scalar>(local: &LocalFeatureTensor<T>, mode: StageMode) -> Result<PatchSet<T>> {
    let pool = match mode {
        StageMode::Memorize => GlobalPool::Avg,
        StageMode::Infer => GlobalPool::Max,
    };
    temporal_partition_with(local, pool)
}

/// Motion patches: `|lf[t+1] - lf[t]|` reduced over space by `pool`, one
/// `c'`-dim row per object and adjacent frame pair.
pub fn temporal_partition_with<T: Scalar>(local: &LocalFeatureTensor<T>, pool: GlobalPool) -> Result<PatchSet<T>> {
    let [n, c, d, h, w] = local.lf.dims();
    if d < 2 {
        return Err(Error::dimension(format!("temporal partition needs 2 frames, got {d}")));
    }
    if n == 0 {
        return Err(Error::dimension("temporal partition of a window without objects"));
    }
    let area = h * w;
    let src = local.lf.data();
    let mut out = PatchSet::empty(PatchKind::Temporal, c);
    let mut row = vec![T::zero(); c];
    for i in 0..n {
        for t in 0..d - 1 {
            for (ch, r) in row.iter_mut().enumerate() {
                let base = ((i * c + ch) * d + t) * area;
                let now = &src[base..base + area];
                let next = &src[base + area..base + 2 * area];
                let diffs = now.iter().zip(next).map(|(a, b)| (b.to_f64_lossless() - a.to_f64_lossless()).abs());
                let v = match pool {
                    // Summation rounding can push the mean past the max.
                    GlobalPool::Avg => {
                        let (sum, max) = diffs.fold((0.0, 0.0f64), |(s, m), v| (s + v, m.max(v)));
                        (sum / area as f64).min(max)
                    }
                    GlobalPool::Max => diffs.fold(0.0, f64::max),
                };
                *r = T::from_f64_lossy(v);
            }
            out.push(
                &row,
                Provenance {
                    video_id: local.video_id.clone(),
                    anchor_frame: local.anchor_frame,
                    object_index: i as i64,
                    frame_index: None,
                },
            );
        }
    }
    Ok(out)
}

/// Frame-context patches: the sum of `L + 1` temporal pyramid levels, level
/// `l` being stride-1 max pooling applied `l` times. One `c`-dim row per frame.
pub fn highlevel_partition<T: Scalar>(global: &GlobalFeatureTensor<T>, cfg: &PipelineConfig) -> Result<PatchSet<T>> {
    let [c, d] = global.gf.dims();
    if d == 0 {
        return Err(Error::dimension("high-level partition over zero frames"));
    }
    if global.frame_indices.len() != d {
        return Err(Error::dimension(format!(
            "{} frame indices for {d} feature columns",
            global.frame_indices.len()
        )));
    }
    let mut acc: Vec<f64> = global.gf.data().iter().map(|v| v.to_f64_lossless()).collect();
    let mut level = global.gf.clone();
    for _ in 0..cfg.pyramid_levels {
        level = temporal_max_pool(&level, cfg.pyramid_kernel)?;
        for (a, v) in acc.iter_mut().zip(level.data()) {
            *a += v.to_f64_lossless();
        }
    }
    let mut out = PatchSet::empty(PatchKind::Highlevel, c);
    let mut row = vec![T::zero(); c];
    for t in 0..d {
        for (ch, r) in row.iter_mut().enumerate() {
            *r = T::from_f64_lossy(acc[ch * d + t]);
        }
        out.push(
            &row,
            Provenance {
                video_id: global.video_id.clone(),
                anchor_frame: global.anchor_frame,
                object_index: -1,
                frame_index: Some(global.frame_indices[t]),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor5;

    fn local(lf: Tensor5<f64>) -> LocalFeatureTensor<f64> {
        LocalFeatureTensor { lf, video_id: "v".into(), anchor_frame: 3 }
    }

    fn global(gf: Vec<f64>, c: usize, d: usize) -> GlobalFeatureTensor<f64> {
        GlobalFeatureTensor {
            gf: Tensor::new([c, d], gf).unwrap(),
            video_id: "v".into(),
            anchor_frame: d as u64 - 1,
            frame_indices: (10..10 + d as u64).collect(),
        }
    }

    #[test]
    fn spatial_patch_count_for_eight_by_eight() {
        let lf = Tensor5::<f64>::from_fn([2, 3, 2, 8, 8], |[i, c, t, y, x]| (i + c + t + y + x) as f64);
        let p = spatial_partition(&local(lf), &PipelineConfig::default()).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.dim, 3);
        assert_eq!(p.provenance[4].object_index, 1);
    }

    #[test]
    fn spatial_constant_gives_channel_vector() {
        let lf = Tensor5::<f64>::from_fn([1, 2, 3, 4, 4], |[_, c, ..]| c as f64 + 0.5);
        let p = spatial_partition(&local(lf), &PipelineConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.row(0), &[0.5, 1.5]);
    }

    #[test]
    fn spatial_rejects_small_maps() {
        let lf = Tensor5::<f64>::zeros([1, 2, 2, 3, 8]);
        assert!(matches!(
            spatial_partition(&local(lf), &PipelineConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn static_clip_has_zero_motion() {
        let lf = Tensor5::<f64>::from_fn([2, 3, 4, 2, 2], |[i, c, _, y, x]| (i * 7 + c * 3 + y + x) as f64);
        for mode in [StageMode::Memorize, StageMode::Infer] {
            let p = temporal_partition(&local(lf.clone()), mode).unwrap();
            assert_eq!(p.len(), 2 * 3);
            assert!(p.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_pooling_two_pixel_map() {
        // frame 0 all zeros, frame 1 = [0, 4]: |diff| = {0, 4}
        let lf = Tensor::new([1, 1, 2, 1, 2], vec![0.0f64, 0.0, 0.0, 4.0]).unwrap();
        let mem = temporal_partition(&local(lf.clone()), StageMode::Memorize).unwrap();
        let inf = temporal_partition(&local(lf), StageMode::Infer).unwrap();
        assert_eq!(mem.data, vec![2.0]);
        assert_eq!(inf.data, vec![4.0]);
    }

    #[test]
    fn temporal_rejects_single_frame() {
        let lf = Tensor5::<f64>::zeros([1, 1, 1, 2, 2]);
        assert!(temporal_partition(&local(lf), StageMode::Infer).is_err());
    }

    #[test]
    fn pyramid_hand_example() {
        let p = highlevel_partition(&global(vec![1.0, 3.0, 2.0], 1, 3), &PipelineConfig::default()).unwrap();
        assert_eq!(p.data, vec![7.0, 9.0, 6.0]);
        assert_eq!(p.provenance[2].frame_index, Some(12));
        assert_eq!(p.provenance[0].object_index, -1);
    }

    #[test]
    fn pyramid_constant_and_single_frame() {
        let p = highlevel_partition(&global(vec![2.0; 8], 2, 4), &PipelineConfig::default()).unwrap();
        assert!(p.data.iter().all(|&v| v == 6.0));
        let single = highlevel_partition(&global(vec![1.5, -1.0], 2, 1), &PipelineConfig::default()).unwrap();
        assert_eq!(single.data, vec![4.5, -3.0]);
    }

    #[test]
    fn extend_rejects_mixed_kinds() {
        let mut a = PatchSet::<f32>::empty(PatchKind::Spatial, 2);
        let b = PatchSet::<f32>::empty(PatchKind::Temporal, 2);
        assert!(a.extend_from(&b).is_err());
    }
}
