//! Local (per-object) and global (per-frame) feature construction.

use crate::config::{ChannelGrouping, PipelineConfig};
use crate::error::{Error, Result};
use crate::feature_io::{ClipFeatures, LayerFeatureMap, MapPair};
use crate::scalar::Scalar;
use crate::tensor::{avg_pool_2d, reduce_plane, resample_2d, GlobalPool, Map3, Series2, Tensor, Tensor5};

/// `(n, c', d, h, w)` object features of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureTensor<T> {
    pub lf: Tensor5<T>,
    pub video_id: String,
    pub anchor_frame: u64,
}

/// `(c, d)` frame context features of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatureTensor<T> {
    pub gf: Series2<T>,
    pub video_id: String,
    pub anchor_frame: u64,
    pub frame_indices: Vec<u64>,
}

pub fn layer_tensor<T: Scalar>(map: &LayerFeatureMap) -> Map3<T> {
    Tensor::from_parts(
        [map.channels, map.height, map.width],
        map.data.iter().map(|&v| T::from_f32_exact(v)).collect(),
    )
}

fn pooled<T: Scalar>(map: &LayerFeatureMap, cfg: &PipelineConfig) -> Result<Map3<T>> {
    avg_pool_2d(
        &layer_tensor(map),
        cfg.fusion_pool.kernel(),
        cfg.fusion_pool.stride(),
        cfg.fusion_padding,
    )
}

/// Pools both layers, aligns them on the `anchor` layer's grid and
/// concatenates channels with the anchor layer first.
fn fuse_pair<T: Scalar>(pair: &MapPair, cfg: &PipelineConfig, anchor_layer2: bool) -> Result<Map3<T>> {
    let l2 = pooled::<T>(&pair.layer2, cfg)?;
    let l3 = pooled::<T>(&pair.layer3, cfg)?;
    let (first, second) = if anchor_layer2 { (l2, l3) } else { (l3, l2) };
    let [c1, h, w] = first.dims();
    let second = resample_2d(&second, (h, w))?;
    let c2 = second.dims()[0];
    let mut data = first.into_data();
    data.extend_from_slice(second.data());
    Ok(Tensor::from_parts([c1 + c2, h, w], data))
}

/// Object features: pooled layer-2 and layer-3 maps on the layer-2 grid,
/// stacked over time and compressed to `cfg.split_channels` channels.
pub fn build_local_features<T: Scalar>(
    clip: &ClipFeatures,
    cfg: &PipelineConfig,
) -> Result<LocalFeatureTensor<T>> {
    if clip.objects.is_empty() {
        return Err(Error::EmptyObjects {
            video_id: clip.video_id.clone(),
            anchor_frame: clip.anchor_frame,
        });
    }
    clip.validate()?;
    let n = clip.objects.len();
    let d = clip.window_len();
    let mut fused: Vec<Map3<T>> = Vec::with_capacity(n * d);
    for obj in &clip.objects {
        for pair in &obj.maps {
            fused.push(fuse_pair(pair, cfg, true)?);
        }
    }
    let [c, h, w] = fused[0].dims();
    let area = h * w;
    // fused is indexed [object][time]; lf wants [object][channel][time].
    let mut data = Vec::with_capacity(n * c * d * area);
    for i in 0..n {
        for ch in 0..c {
            for t in 0..d {
                let m = &fused[i * d + t];
                data.extend_from_slice(&m.data()[ch * area..(ch + 1) * area]);
            }
        }
    }
    let stacked = Tensor::from_parts([n, c, d, h, w], data);
    let lf = split_pool_grouped(&stacked, cfg.split_channels, cfg.channel_grouping)?;
    Ok(LocalFeatureTensor {
        lf,
        video_id: clip.video_id.clone(),
        anchor_frame: clip.anchor_frame,
    })
}

/// Channel compression by averaging `c'` contiguous channel groups.
pub fn split_pool<T: Scalar>(x: &Tensor5<T>, groups: usize) -> Result<Tensor5<T>> {
    split_pool_grouped(x, groups, ChannelGrouping::Contiguous)
}

/// Channel index lists per group. When `groups` does not divide `channels`
/// the first `channels % groups` groups hold one extra channel.
pub fn channel_groups(channels: usize, groups: usize, grouping: ChannelGrouping) -> Result<Vec<Vec<usize>>> {
    if groups == 0 {
        return Err(Error::parameter("split pooling needs at least one group"));
    }
    if groups > channels {
        return Err(Error::parameter(format!(
            "cannot split {channels} channels into {groups} groups"
        )));
    }
    let base = channels / groups;
    let extra = channels % groups;
    Ok(match grouping {
        ChannelGrouping::Contiguous => {
            let mut start = 0;
            (0..groups)
                .map(|g| {
                    let size = base + usize::from(g < extra);
                    let members = (start..start + size).collect();
                    start += size;
                    members
                })
                .collect()
        }
        ChannelGrouping::Strided => (0..groups).map(|g| (g..channels).step_by(groups).collect()).collect(),
    })
}

pub fn split_pool_grouped<T: Scalar>(
    x: &Tensor5<T>,
    groups: usize,
    grouping: ChannelGrouping,
) -> Result<Tensor5<T>> {
    let [n, c, d, h, w] = x.dims();
    let members = channel_groups(c, groups, grouping)?;
    if groups == c && grouping == ChannelGrouping::Contiguous {
        return Ok(x.clone());
    }
    let vol = d * h * w;
    let src = x.data();
    let mut out = Vec::with_capacity(n * groups * vol);
    let mut acc = vec![0.0f64; vol];
    for i in 0..n {
        for group in &members {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &ch in group {
                let block = &src[(i * c + ch) * vol..(i * c + ch + 1) * vol];
                for (a, v) in acc.iter_mut().zip(block) {
                    *a += v.to_f64_lossless();
                }
            }
            let size = group.len() as f64;
            out.extend(acc.iter().map(|a| T::from_f64_lossy(a / size)));
        }
    }
    Ok(Tensor::from_parts([n, groups, d, h, w], out))
}

/// Frame context features: pooled maps on the layer-3 grid, each channel
/// reduced to `mean + max` over space, stacked over time.
pub fn build_global_features<T: Scalar>(
    clip: &ClipFeatures,
    cfg: &PipelineConfig,
) -> Result<GlobalFeatureTensor<T>> {
    let d = clip.window_len();
    if clip.frame_maps.len() != d || d == 0 {
        return Err(Error::validation(format!(
            "clip {}@{} has {} frame maps for {d} frames",
            clip.video_id,
            clip.anchor_frame,
            clip.frame_maps.len()
        )));
    }
    let mut columns = Vec::with_capacity(d);
    for pair in &clip.frame_maps {
        let g = fuse_pair::<T>(pair, cfg, false)?;
        let [_, h, w] = g.dims();
        let col: Vec<T> = g
            .data()
            .chunks_exact(h * w)
            .map(|plane| {
                let avg = reduce_plane(plane, GlobalPool::Avg).to_f64_lossless();
                let max = reduce_plane(plane, GlobalPool::Max).to_f64_lossless();
                T::from_f64_lossy(avg + max)
            })
            .collect();
        columns.push(col);
    }
    let c = columns[0].len();
    if columns.iter().any(|col| col.len() != c) {
        return Err(Error::validation("frame maps change channel count within the window"));
    }
    let gf = Tensor::from_fn([c, d], |[ch, t]| columns[t][ch]);
    Ok(GlobalFeatureTensor {
        gf,
        video_id: clip.video_id.clone(),
        anchor_frame: clip.anchor_frame,
        frame_indices: clip.frame_indices.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::{ClipObject, SquareBox};

    fn constant_map(layer_id: u8, c: usize, h: usize, w: usize, v: f32) -> LayerFeatureMap {
        LayerFeatureMap::new(layer_id, c, h, w, vec![v; c * h * w]).unwrap()
    }

    fn constant_clip(n: usize, d: usize, v: f32) -> ClipFeatures {
        let pair = || MapPair {
            layer2: constant_map(2, 4, 8, 8, v),
            layer3: constant_map(3, 4, 4, 4, v),
        };
        ClipFeatures {
            video_id: "const".into(),
            anchor_frame: d as u64 - 1,
            frame_indices: (0..d as u64).collect(),
            frame_maps: (0..d).map(|_| pair()).collect(),
            objects: (0..n)
                .map(|_| ClipObject {
                    bbox: SquareBox { x: 0.0, y: 0.0, side: 8.0 },
                    maps: (0..d).map(|_| pair()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn constant_maps_survive_local_fusion() {
        let cfg = PipelineConfig { split_channels: 4, ..Default::default() };
        let local = build_local_features::<f64>(&constant_clip(1, 2, 1.0), &cfg).unwrap();
        assert_eq!(local.lf.dims(), [1, 4, 2, 8, 8]);
        assert!(local.lf.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn no_objects_is_reported() {
        let cfg = PipelineConfig::default();
        assert!(matches!(
            build_local_features::<f32>(&constant_clip(0, 3, 1.0), &cfg),
            Err(Error::EmptyObjects { .. })
        ));
    }

    #[test]
    fn constant_frames_give_twice_the_value() {
        let cfg = PipelineConfig::default();
        let global = build_global_features::<f64>(&constant_clip(0, 3, 0.75), &cfg).unwrap();
        assert_eq!(global.gf.dims(), [8, 3]);
        assert!(global.gf.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn split_pool_group_means() {
        let x = Tensor::new([1, 4, 1, 1, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(split_pool(&x, 2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(split_pool(&x, 4).unwrap(), x);
        let strided = split_pool_grouped(&x, 2, ChannelGrouping::Strided).unwrap();
        assert_eq!(strided.data(), &[2.0, 3.0]);
    }

    #[test]
    fn uneven_groups_put_larger_first() {
        assert_eq!(
            channel_groups(5, 2, ChannelGrouping::Contiguous).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4]]
        );
        assert_eq!(
            channel_groups(7, 3, ChannelGrouping::Contiguous).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]
        );
        assert_eq!(
            channel_groups(5, 2, ChannelGrouping::Strided).unwrap(),
            vec![vec![0, 2, 4], vec![1, 3]]
        );
    }

    #[test]
    fn split_pool_parameter_errors() {
        let x = Tensor::<f32, 5>::zeros([1, 3, 1, 1, 1]);
        assert!(matches!(split_pool(&x, 0), Err(Error::Parameter(_))));
        assert!(matches!(split_pool(&x, 4), Err(Error::Parameter(_))));
    }
}
