//! Pipeline configuration and dataset presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{GlobalPool, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Last,
    Middle,
}

impl Anchor {
    /// Position of the anchor inside a window of `d` frames.
    pub fn position(self, d: usize) -> usize {
        match self {
            Anchor::Last => d - 1,
            Anchor::Middle => d / 2,
        }
    }
}

/// How split pooling assigns channels to groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGrouping {
    /// Adjacent channels share a group, larger groups first.
    Contiguous,
    /// Channel `k` goes to group `k mod c'`.
    Strided,
}

/// Spatial pooling applied to motion features, per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPooling {
    /// Average when memorizing, max when inferring.
    Mismatched,
    Average,
    Max,
}

impl TemporalPooling {
    pub fn for_stage(self, stage: StageMode) -> GlobalPool {
        match (self, stage) {
            (TemporalPooling::Mismatched, StageMode::Memorize) => GlobalPool::Avg,
            (TemporalPooling::Mismatched, StageMode::Infer) => GlobalPool::Max,
            (TemporalPooling::Average, _) => GlobalPool::Avg,
            (TemporalPooling::Max, _) => GlobalPool::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Memorize,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStrategy {
    PerVideoThenConcat,
    ConcatThenSubsample,
}

/// Population over which fused-score z-normalization statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    TestSet,
    PerVideo,
}

/// Raw local scores given to windows without any detected object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoObjectPolicy {
    /// Minimum observed over windows that do have objects.
    MinObserved,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

impl PoolSpec {
    pub fn kernel(&self) -> (usize, usize) {
        (self.kernel[0], self.kernel[1])
    }

    pub fn stride(&self) -> (usize, usize) {
        (self.stride[0], self.stride[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames per window (`d`).
    pub window: usize,
    pub anchor: Anchor,
    /// Channels after split pooling (`c'`).
    pub split_channels: usize,
    pub channel_grouping: ChannelGrouping,
    /// Pooling applied to every layer map before concatenation.
    pub fusion_pool: PoolSpec,
    pub fusion_padding: Padding,
    pub spatial_pool: PoolSpec,
    /// Temporal pyramid depth `L`.
    pub pyramid_levels: usize,
    pub pyramid_kernel: usize,
    pub temporal_pooling: TemporalPooling,
    /// `(spatial, temporal)` weights of the local score.
    pub local_weights: [f64; 2],
    /// `(local, global)` weights of the fused score.
    pub stream_weights: [f64; 2],
    pub ratio: f64,
    pub strategy: BuildStrategy,
    pub seed: u64,
    /// Random projection width used only to pick coreset members.
    pub projection_dim: Option<usize>,
    /// Gaussian smoothing width in frames; 0 disables smoothing.
    pub smoothing_sigma: f64,
    pub normalization: Normalization,
    pub no_object_policy: NoObjectPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 4,
            anchor: Anchor::Last,
            split_channels: 16,
            channel_grouping: ChannelGrouping::Contiguous,
            fusion_pool: PoolSpec { kernel: [3, 3], stride: [1, 1] },
            fusion_padding: Padding::Same,
            spatial_pool: PoolSpec { kernel: [4, 4], stride: [4, 4] },
            pyramid_levels: 2,
            pyramid_kernel: 2,
            temporal_pooling: TemporalPooling::Mismatched,
            local_weights: [0.5, 0.5],
            stream_weights: [0.7, 0.3],
            ratio: 0.1,
            strategy: BuildStrategy::ConcatThenSubsample,
            seed: 0,
            projection_dim: None,
            smoothing_sigma: 3.0,
            normalization: Normalization::TestSet,
            no_object_policy: NoObjectPolicy::MinObserved,
        }
    }
}

impl PipelineConfig {
    pub fn avenue() -> Self {
        Self {
            window: 10,
            anchor: Anchor::Middle,
            split_channels: 32,
            local_weights: [0.7, 0.3],
            stream_weights: [0.7, 0.3],
            ratio: 0.01,
            ..Self::default()
        }
    }

    pub fn shanghaitech() -> Self {
        Self {
            window: 4,
            anchor: Anchor::Last,
            split_channels: 64,
            local_weights: [0.5, 0.5],
            stream_weights: [0.9, 0.1],
            ratio: 0.25,
            ..Self::default()
        }
    }

    pub fn corridor() -> Self {
        Self { ratio: 0.10, ..Self::shanghaitech() }
    }

    /// Looks up a built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "synthetic" | "default" => Some(Self::default()),
            "avenue" => Some(Self::avenue()),
            "shanghaitech" | "shtech" => Some(Self::shanghaitech()),
            "corridor" => Some(Self::corridor()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("subsampling ratio {} outside (0, 1]", self.ratio));
        }
        for (name, w) in [("local_weights", self.local_weights), ("stream_weights", self.stream_weights)] {
            if (w[0] + w[1] - 1.0).abs() > 1e-9 || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("{name} {w:?} must be non-negative and sum to 1"));
            }
        }
        if self.split_channels == 0 {
            return bad("split_channels must be positive".into());
        }
        for (name, p) in [("fusion_pool", self.fusion_pool), ("spatial_pool", self.spatial_pool)] {
            if p.kernel.contains(&0) || p.stride.contains(&0) {
                return bad(format!("{name} kernel and stride must be positive"));
            }
        }
        if self.pyramid_kernel == 0 {
            return bad("pyramid_kernel must be positive".into());
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return bad(format!("smoothing_sigma {} must be finite and >= 0", self.smoothing_sigma));
        }
        if self.projection_dim == Some(0) {
            return bad("projection_dim must be positive when set".into());
        }
        Ok(())
    }

    /// Hash of every setting that changes what a memorized patch looks like.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Geometry<'a> {
            format: u32,
            window: usize,
            split_channels: usize,
            channel_grouping: ChannelGrouping,
            fusion_pool: PoolSpec,
            fusion_padding: Padding,
            spatial_pool: PoolSpec,
            pyramid_levels: usize,
            pyramid_kernel: usize,
            memorize_temporal_pool: &'a str,
            local_concat: &'a str,
            global_concat: &'a str,
        }
        let geometry = Geometry {
            format: 1,
            window: self.window,
            split_channels: self.split_channels,
            channel_grouping: self.channel_grouping,
            fusion_pool: self.fusion_pool,
            fusion_padding: self.fusion_padding,
            spatial_pool: self.spatial_pool,
            pyramid_levels: self.pyramid_levels,
            pyramid_kernel: self.pyramid_kernel,
            memorize_temporal_pool: match self.temporal_pooling.for_stage(StageMode::Memorize) {
                GlobalPool::Avg => "avg",
                GlobalPool::Max => "max",
            },
            local_concat: "layer2_first",
            global_concat: "layer3_first",
        };
        let bytes = serde_json::to_vec(&geometry).expect("geometry serializes");
        let digest = Sha256::digest(&bytes);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}
