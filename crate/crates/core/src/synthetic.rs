//! Seeded synthetic feature datasets with planted anomalies.
//!
//! Normal data:
//! * frame maps are one fixed scene plus small AR(1) noise per frame;
//! * each object is one of a few appearance prototypes plus instance noise,
//!   with a temporally correlated AR(1) fluctuation over the window.
//!
//! Anomalies (applied to windows whose anchor frame lies in the planned
//! range, magnitudes in per-channel standard deviations):
//! * `appearance`: object 0's maps shifted by a fixed per-channel direction;
//! * `motion`: a zero-time-mean random pattern added to object 0's maps, so
//!   its time average is unchanged and only frame differences grow;
//! * `scene`: frame maps shifted by a fixed per-channel direction while
//!   objects stay nominal.
//!
//! Perturbations draw from their own random streams, so a magnitude of zero
//! reproduces the normal dataset exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Anchor;
use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::feature_io::{ClipFeatures, ClipObject, LayerFeatureMap, MapPair, SquareBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Appearance,
    Motion,
    Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Anomaly planted in test video `video` on frames `start..end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyPlan {
    pub video: usize,
    pub start: u64,
    pub end: u64,
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

/// Windows anchored on frames `start..end` of a video carry no objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmptyRange {
    pub split: Split,
    pub video: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDist {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Centre of the per-channel means.
    pub mean: f64,
    /// Typical per-channel standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub videos_train: usize,
    pub videos_test: usize,
    pub frames_per_video: usize,
    pub window: usize,
    pub anchor: Anchor,
    pub max_objects: usize,
    /// Probability that each object slot after the first is occupied.
    pub object_rate: f64,
    pub layer2: LayerDist,
    pub layer3: LayerDist,
    /// Number of object appearance prototypes.
    pub prototypes: usize,
    pub instance_noise: f64,
    pub motion_noise: f64,
    /// AR(1) coefficient of object and scene fluctuations.
    pub motion_correlation: f64,
    pub scene_noise: f64,
    pub empty_windows: Vec<EmptyRange>,
    pub anomalies: Vec<AnomalyPlan>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            videos_train: 4,
            videos_test: 4,
            frames_per_video: 60,
            window: 4,
            anchor: Anchor::Last,
            max_objects: 4,
            object_rate: 0.3,
            layer2: LayerDist { channels: 16, height: 8, width: 8, mean: 0.0, std: 1.0 },
            layer3: LayerDist { channels: 32, height: 4, width: 4, mean: 0.0, std: 1.0 },
            prototypes: 4,
            instance_noise: 0.25,
            motion_noise: 0.15,
            motion_correlation: 0.8,
            scene_noise: 0.1,
            empty_windows: Vec::new(),
            anomalies: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.window < 2 {
            return bad(format!("window {} < 2", self.window));
        }
        if self.frames_per_video < self.window {
            return bad(format!("{} frames per video cannot hold a window of {}", self.frames_per_video, self.window));
        }
        if self.max_objects == 0 || !(0.0..=1.0).contains(&self.object_rate) {
            return bad("max_objects must be positive and object_rate in [0, 1]".into());
        }
        if self.prototypes == 0 {
            return bad("need at least one prototype".into());
        }
        for l in [self.layer2, self.layer3] {
            if l.channels == 0 || l.height == 0 || l.width == 0 || !(l.std > 0.0) || !l.mean.is_finite() {
                return bad(format!("invalid layer distribution {l:?}"));
            }
        }
        for (name, v) in [
            ("instance_noise", self.instance_noise),
            ("motion_noise", self.motion_noise),
            ("scene_noise", self.scene_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.motion_correlation) {
            return bad("motion_correlation must lie in [0, 1)".into());
        }
        let frames = self.frames_per_video as u64;
        for a in &self.anomalies {
            if a.video >= self.videos_test || a.start >= a.end || a.end > frames {
                return bad(format!("anomaly {a:?} lies outside the test videos"));
            }
            if !(a.magnitude >= 0.0 && a.magnitude.is_finite()) {
                return bad(format!("anomaly magnitude {} must be finite and >= 0", a.magnitude));
            }
        }
        for e in &self.empty_windows {
            let videos = match e.split {
                Split::Train => self.videos_train,
                Split::Test => self.videos_test,
            };
            if e.video >= videos || e.start >= e.end || e.end > frames {
                return bad(format!("empty range {e:?} lies outside its videos"));
            }
            let clash = self.anomalies.iter().any(|a| {
                e.split == Split::Test
                    && a.video == e.video
                    && a.kind != AnomalyKind::Scene
                    && a.start < e.end
                    && e.start < a.end
            });
            if clash {
                return bad(format!("object anomaly overlaps object-free range {e:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<ClipFeatures>,
    pub test: Vec<ClipFeatures>,
    pub labels: LabelMap,
}

pub fn video_id(split: Split, video: usize) -> String {
    match split {
        Split::Train => format!("train_{video:03}"),
        Split::Test => format!("test_{video:03}"),
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-layer quantities fixed for the whole dataset.
struct LayerModel {
    dist: LayerDist,
    channel_mean: Vec<f64>,
    channel_std: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    scene: Vec<f64>,
    appearance_dir: Vec<f64>,
    scene_dir: Vec<f64>,
}

impl LayerModel {
    fn new(dist: LayerDist, prototypes: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = dist.channels;
        let area = dist.height * dist.width;
        let channel_mean: Vec<f64> = (0..c).map(|_| dist.mean + 0.5 * dist.std * normal(rng)).collect();
        let channel_std: Vec<f64> = (0..c).map(|_| dist.std * (0.75 + 0.5 * rng.random::<f64>())).collect();
        let field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..c * area).map(|i| channel_mean[i / area] + channel_std[i / area] * normal(rng)).collect()
        };
        let prototypes = (0..prototypes).map(|_| field(rng)).collect();
        let scene = field(rng);
        let signs = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let appearance_dir = signs(rng);
        let scene_dir = signs(rng);
        Self { dist, channel_mean, channel_std, prototypes, scene, appearance_dir, scene_dir }
    }

    fn len(&self) -> usize {
        self.dist.channels * self.dist.height * self.dist.width
    }

    fn area(&self) -> usize {
        self.dist.height * self.dist.width
    }

    fn std_at(&self, i: usize) -> f64 {
        self.channel_std[i / self.area()]
    }

    /// `d` AR(1) noise fields with stationary std `scale * channel_std`.
    fn ar1(&self, d: usize, scale: f64, rho: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let innovation = (1.0 - rho * rho).sqrt();
        let mut frames: Vec<Vec<f64>> = Vec::with_capacity(d);
        for t in 0..d {
            let frame = (0..self.len())
                .map(|i| {
                    let z = normal(rng);
                    let prev = if t == 0 { z } else { frames[t - 1][i] / (scale * self.std_at(i)).max(f64::MIN_POSITIVE) };
                    let unit = if t == 0 { z } else { rho * prev + innovation * z };
                    unit * scale * self.std_at(i)
                })
                .collect();
            frames.push(frame);
        }
        frames
    }

    fn to_map(&self, layer_id: u8, values: &[f64]) -> LayerFeatureMap {
        LayerFeatureMap {
            layer_id,
            channels: self.dist.channels,
            height: self.dist.height,
            width: self.dist.width,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }
}

struct Model {
    layers: [LayerModel; 2],
}

/// Generates the training clips, test clips and per-frame test labels.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let model = Model {
        layers: [
            LayerModel::new(spec.layer2, spec.prototypes, &mut rng),
            LayerModel::new(spec.layer3, spec.prototypes, &mut rng),
        ],
    };
    let videos: Vec<(Split, usize)> = (0..spec.videos_train)
        .map(|v| (Split::Train, v))
        .chain((0..spec.videos_test).map(|v| (Split::Test, v)))
        .collect();
    let clips: Vec<Vec<ClipFeatures>> = videos
        .par_iter()
        .map(|&(split, v)| generate_video(spec, &model, split, v))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((split, _), video_clips) in videos.iter().zip(clips) {
        match split {
            Split::Train => train.extend(video_clips),
            Split::Test => test.extend(video_clips),
        }
    }
    let mut labels = LabelMap::new();
    for v in 0..spec.videos_test {
        let mut frames = vec![0u8; spec.frames_per_video];
        for a in spec.anomalies.iter().filter(|a| a.video == v) {
            frames[a.start as usize..a.end as usize].iter_mut().for_each(|l| *l = 1);
        }
        labels.insert(video_id(Split::Test, v), frames);
    }
    Ok(SynthDataset { train, test, labels })
}

fn generate_video(spec: &SynthSpec, model: &Model, split: Split, video: usize) -> Vec<ClipFeatures> {
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split_tag, video as u64]));
    let d = spec.window;
    let id = video_id(split, video);
    let mut clips = Vec::with_capacity(spec.frames_per_video - d + 1);
    for start in 0..=(spec.frames_per_video - d) as u64 {
        let frame_indices: Vec<u64> = (start..start + d as u64).collect();
        let anchor = frame_indices[spec.anchor.position(d)];
        let active: Vec<&AnomalyPlan> = match split {
            Split::Train => Vec::new(),
            Split::Test => spec
                .anomalies
                .iter()
                .filter(|a| a.video == video && (a.start..a.end).contains(&anchor))
                .collect(),
        };
        let empty = spec
            .empty_windows
            .iter()
            .any(|e| e.split == split && e.video == video && (e.start..e.end).contains(&anchor));

        // Scene.
        let mut frames: [Vec<Vec<f64>>; 2] = std::array::from_fn(|l| {
            let layer = &model.layers[l];
            layer
                .ar1(d, spec.scene_noise, spec.motion_correlation, &mut rng)
                .into_iter()
                .map(|noise| noise.iter().zip(&layer.scene).map(|(n, s)| s + n).collect())
                .collect()
        });

        // Objects.
        let n = if empty {
            0
        } else {
            1 + (1..spec.max_objects).filter(|_| rng.random::<f64>() < spec.object_rate).count()
        };
        let mut objects: Vec<[Vec<Vec<f64>>; 2]> = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let proto = rng.random_range(0..spec.prototypes);
            objects.push(std::array::from_fn(|l| {
                let layer = &model.layers[l];
                let base: Vec<f64> = layer.prototypes[proto]
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p + spec.instance_noise * layer.std_at(i) * normal(&mut rng))
                    .collect();
                layer
                    .ar1(d, spec.motion_noise, spec.motion_correlation, &mut rng)
                    .into_iter()
                    .map(|f| f.iter().zip(&base).map(|(a, b)| a + b).collect())
                    .collect()
            }));
            let side = 32.0 + 96.0 * rng.random::<f32>();
            boxes.push(SquareBox { x: 640.0 * rng.random::<f32>(), y: 360.0 * rng.random::<f32>(), side });
        }

        for (k, plan) in active.iter().enumerate() {
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[3, video as u64, anchor, k as u64]));
            for (l, layer) in model.layers.iter().enumerate() {
                match plan.kind {
                    AnomalyKind::Scene => {
                        for frame in frames[l].iter_mut() {
                            for (i, v) in frame.iter_mut().enumerate() {
                                *v += plan.magnitude * layer.std_at(i) * layer.scene_dir[i / layer.area()];
                            }
                        }
                    }
                    AnomalyKind::Appearance => {
                        if let Some(obj) = objects.first_mut() {
                            for frame in obj[l].iter_mut() {
                                for (i, v) in frame.iter_mut().enumerate() {
                                    *v += plan.magnitude * layer.std_at(i) * layer.appearance_dir[i / layer.area()];
                                }
                            }
                        }
                    }
                    AnomalyKind::Motion => {
                        if let Some(obj) = objects.first_mut() {
                            let pattern = zero_mean_pattern(d, layer.len(), &mut prng);
                            for (frame, p) in obj[l].iter_mut().zip(&pattern) {
                                for (i, v) in frame.iter_mut().enumerate() {
                                    *v += plan.magnitude * layer.std_at(i) * p[i];
                                }
                            }
                        }
                    }
                }
            }
        }

        let [l2, l3] = &model.layers;
        let pair = |maps: &[Vec<Vec<f64>>; 2], t: usize| MapPair {
            layer2: l2.to_map(2, &maps[0][t]),
            layer3: l3.to_map(3, &maps[1][t]),
        };
        clips.push(ClipFeatures {
            video_id: id.clone(),
            anchor_frame: anchor,
            frame_maps: (0..d).map(|t| pair(&frames, t)).collect(),
            objects: objects
                .iter()
                .zip(&boxes)
                .map(|(maps, &bbox)| ClipObject { bbox, maps: (0..d).map(|t| pair(maps, t)).collect() })
                .collect(),
            frame_indices,
        });
        // Keep channel means reachable for diagnostics of the layer model.
        debug_assert!(model.layers.iter().all(|l| l.channel_mean.len() == l.dist.channels));
    }
    clips
}

/// `d` random fields whose mean over time is exactly zero per element and
/// whose expected mean square over time is 1.
fn zero_mean_pattern(d: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut p: Vec<Vec<f64>> = (0..d).map(|_| (0..len).map(|_| normal(rng)).collect()).collect();
    let scale = (d as f64 / (d as f64 - 1.0)).sqrt();
    for i in 0..len {
        let mean = p.iter().map(|f| f[i]).sum::<f64>() / d as f64;
        for f in p.iter_mut() {
            f[i] = (f[i] - mean) * scale;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { videos_train: 1, videos_test: 2, frames_per_video: 12, ..Default::default() }
    }

    #[test]
    fn shapes_and_counts() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.len(), 9);
        assert_eq!(ds.test.len(), 18);
        let c = &ds.test[0];
        c.validate().unwrap();
        assert_eq!(c.frame_maps[0].layer2.shape().len(), 16 * 8 * 8);
        assert_eq!(c.frame_maps[0].layer3.shape().len(), 32 * 4 * 4);
        assert!((1..=4).contains(&c.object_count()));
        assert_eq!(c.anchor_frame, 3);
    }

    #[test]
    fn no_anomalies_means_zero_labels() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.labels.len(), 2);
        assert!(ds.labels.values().all(|l| l.len() == 12 && l.iter().all(|&v| v == 0)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn empty_ranges_remove_objects() {
        let spec = SynthSpec {
            empty_windows: vec![EmptyRange { split: Split::Test, video: 1, start: 5, end: 8 }],
            ..small()
        };
        let ds = generate(&spec).unwrap();
        for c in &ds.test {
            let expect_empty = c.video_id == "test_001" && (5..8).contains(&c.anchor_frame);
            assert_eq!(c.objects.is_empty(), expect_empty);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.anomalies.push(AnomalyPlan { video: 5, start: 0, end: 2, kind: AnomalyKind::Scene, magnitude: 1.0 });
        assert!(generate(&s).is_err());
        let mut s = small();
        s.anomalies.push(AnomalyPlan { video: 0, start: 4, end: 20, kind: AnomalyKind::Motion, magnitude: 1.0 });
        assert!(s.validate().is_err());
        let mut s = small();
        s.anomalies.push(AnomalyPlan { video: 0, start: 4, end: 8, kind: AnomalyKind::Motion, magnitude: 1.0 });
        s.empty_windows.push(EmptyRange { split: Split::Test, video: 0, start: 6, end: 7 });
        assert!(s.validate().is_err());
        assert!(SynthSpec::from_json(r#"{"window": 1}"#).is_err());
    }

    #[test]
    fn zero_mean_pattern_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = zero_mean_pattern(4, 50, &mut rng);
        for i in 0..50 {
            assert!(p.iter().map(|f| f[i]).sum::<f64>().abs() < 1e-12);
        }
    }
}
