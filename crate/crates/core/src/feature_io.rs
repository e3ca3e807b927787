//! Clip feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VPCF" | u16 version
//! repeated per clip:
//!   u32 header_len | header_len bytes of JSON (ClipHeader)
//!   raw f32 blocks, in order:
//!     for each frame t:              layer-2 map, layer-3 map
//!     for each object i, frame t:    layer-2 map, layer-3 map
//! ```
//!
//! The header carries every shape plus `tensor_bytes`, the exact length of
//! the raw block section that follows it.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"VPCF";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureMap {
    pub layer_id: u8,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LayerFeatureMap {
    pub fn new(layer_id: u8, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self { layer_id, channels, height, width, data };
        m.validate()?;
        Ok(m)
    }

    pub fn shape(&self) -> MapShape {
        MapShape { channels: self.channels, height: self.height, width: self.width }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.layer_id, 2 | 3) {
            return Err(Error::validation(format!("layer id {} is not 2 or 3", self.layer_id)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::validation(format!("layer {} map has a zero extent", self.layer_id)));
        }
        if self.data.len() != self.channels * self.height * self.width {
            return Err(Error::validation(format!(
                "layer {} map declares {}x{}x{} but holds {} values",
                self.layer_id,
                self.channels,
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("layer {} map contains NaN or Inf", self.layer_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The layer-2 and layer-3 maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPair {
    pub layer2: LayerFeatureMap,
    pub layer3: LayerFeatureMap,
}

/// Square box in source-pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareBox {
    pub x: f32,
    pub y: f32,
    pub side: f32,
}

/// One detected object: its box on the anchor frame and its crops' maps for
/// every frame of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipObject {
    pub bbox: SquareBox,
    pub maps: Vec<MapPair>,
}

/// Backbone features for one sliding window of `d` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub video_id: String,
    pub anchor_frame: u64,
    pub frame_indices: Vec<u64>,
    pub frame_maps: Vec<MapPair>,
    pub objects: Vec<ClipObject>,
}

impl ClipFeatures {
    pub fn window_len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.frame_indices.len();
        if d < 2 {
            return Err(Error::validation(format!("window of {d} frames, need at least 2")));
        }
        if self.frame_indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::validation("frame indices are not strictly increasing"));
        }
        if self.frame_maps.len() != d {
            return Err(Error::validation(format!(
                "{} frame map pairs for a window of {d} frames",
                self.frame_maps.len()
            )));
        }
        check_pairs(&self.frame_maps, "frame")?;
        let mut object_shapes: Option<(MapShape, MapShape)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.maps.len() != d {
                return Err(Error::validation(format!(
                    "object {i} has {} map pairs for a window of {d} frames",
                    obj.maps.len()
                )));
            }
            let shapes = check_pairs(&obj.maps, "object")?;
            match object_shapes {
                None => object_shapes = Some(shapes),
                Some(prev) if prev != shapes => {
                    return Err(Error::validation(format!("object {i} map shapes differ from object 0")));
                }
                _ => {}
            }
            let b = obj.bbox;
            if !(b.x.is_finite() && b.y.is_finite() && b.side.is_finite()) || b.side <= 0.0 {
                return Err(Error::validation(format!("object {i} box {b:?} is not a valid square")));
            }
        }
        Ok(())
    }
}

/// All pairs in `pairs` share one layer-2 shape and one layer-3 shape.
fn check_pairs(pairs: &[MapPair], what: &str) -> Result<(MapShape, MapShape)> {
    let first = pairs.first().ok_or_else(|| Error::validation(format!("no {what} maps")))?;
    let shapes = (first.layer2.shape(), first.layer3.shape());
    for (t, p) in pairs.iter().enumerate() {
        if p.layer2.layer_id != 2 || p.layer3.layer_id != 3 {
            return Err(Error::validation(format!("{what} map pair {t} has swapped layer ids")));
        }
        p.layer2.validate()?;
        p.layer3.validate()?;
        if (p.layer2.shape(), p.layer3.shape()) != shapes {
            return Err(Error::validation(format!("{what} map pair {t} changes shape within the window")));
        }
    }
    Ok(shapes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipHeader {
    video_id: String,
    anchor_frame: u64,
    frame_indices: Vec<u64>,
    frame_layer2: MapShape,
    frame_layer3: MapShape,
    object_boxes: Vec<SquareBox>,
    object_layer2: Option<MapShape>,
    object_layer3: Option<MapShape>,
    tensor_bytes: u64,
}

impl ClipHeader {
    fn for_clip(clip: &ClipFeatures) -> Self {
        let d = clip.frame_indices.len();
        let frame_layer2 = clip.frame_maps[0].layer2.shape();
        let frame_layer3 = clip.frame_maps[0].layer3.shape();
        let first_obj = clip.objects.first().map(|o| (o.maps[0].layer2.shape(), o.maps[0].layer3.shape()));
        let mut floats = d * (frame_layer2.len() + frame_layer3.len());
        if let Some((l2, l3)) = first_obj {
            floats += clip.objects.len() * d * (l2.len() + l3.len());
        }
        Self {
            video_id: clip.video_id.clone(),
            anchor_frame: clip.anchor_frame,
            frame_indices: clip.frame_indices.clone(),
            frame_layer2,
            frame_layer3,
            object_boxes: clip.objects.iter().map(|o| o.bbox).collect(),
            object_layer2: first_obj.map(|s| s.0),
            object_layer3: first_obj.map(|s| s.1),
            tensor_bytes: (floats * 4) as u64,
        }
    }

    /// Byte length implied by the declared shapes.
    fn implied_tensor_bytes(&self) -> Option<u64> {
        let d = self.frame_indices.len();
        let mut floats = d * (self.frame_layer2.len() + self.frame_layer3.len());
        let n = self.object_boxes.len();
        match (self.object_layer2, self.object_layer3) {
            (Some(l2), Some(l3)) => floats += n * d * (l2.len() + l3.len()),
            (None, None) if n == 0 => {}
            _ => return None,
        }
        Some(floats as u64 * 4)
    }
}

/// Number of bytes one clip occupies in a feature file.
pub fn encoded_clip_len(clip: &ClipFeatures) -> Result<usize> {
    let header = serde_json::to_vec(&ClipHeader::for_clip(clip))?;
    Ok(4 + header.len() + ClipHeader::for_clip(clip).tensor_bytes as usize)
}

/// Writes a complete feature file; returns the number of bytes written.
pub fn write_clips<W: Write>(clips: &[ClipFeatures], mut sink: W) -> Result<u64> {
    for clip in clips {
        clip.validate().map_err(|e| {
            Error::validation(format!("clip {}@{}: {e}", clip.video_id, clip.anchor_frame))
        })?;
    }
    sink.write_all(FEATURE_MAGIC)?;
    sink.write_all(&FEATURE_VERSION.to_le_bytes())?;
    let mut written = 6u64;
    let mut buf = Vec::new();
    for clip in clips {
        buf.clear();
        let header = serde_json::to_vec(&ClipHeader::for_clip(clip))?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for pair in &clip.frame_maps {
            push_floats(&mut buf, &pair.layer2.data);
            push_floats(&mut buf, &pair.layer3.data);
        }
        for obj in &clip.objects {
            for pair in &obj.maps {
                push_floats(&mut buf, &pair.layer2.data);
                push_floats(&mut buf, &pair.layer3.data);
            }
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn push_floats(buf: &mut Vec<u8>, vals: &[f32]) {
    buf.reserve(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads every clip of a feature file, validating each one.
pub fn read_clips<R: Read>(source: R) -> Result<Vec<ClipFeatures>> {
    ClipReader::new(source)?.collect()
}

/// Streaming reader yielding clips in file order.
pub struct ClipReader<R> {
    source: R,
    index: usize,
    done: bool,
}

impl<R: Read> ClipReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut preamble = [0u8; 6];
        source
            .read_exact(&mut preamble)
            .map_err(|_| Error::Format("file shorter than the feature preamble".into()))?;
        if &preamble[..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &preamble[..4])));
        }
        let version = u16::from_le_bytes([preamble[4], preamble[5]]);
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        Ok(Self { source, index: 0, done: false })
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corruption { clip: self.index, reason: reason.into() }
    }

    fn read_next(&mut self) -> Result<Option<ClipFeatures>> {
        let mut len_buf = [0u8; 4];
        match read_fully(&mut self.source, &mut len_buf)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(self.corrupt("truncated header length")),
        }
        let header_len = u32::from_le_bytes(len_buf) as usize;
        let mut header_buf = vec![0u8; header_len];
        if read_fully(&mut self.source, &mut header_buf)? != header_len {
            return Err(self.corrupt("truncated header"));
        }
        let header: ClipHeader = serde_json::from_slice(&header_buf)
            .map_err(|e| self.corrupt(format!("unparseable header: {e}")))?;
        match header.implied_tensor_bytes() {
            Some(n) if n == header.tensor_bytes => {}
            Some(n) => {
                return Err(self.corrupt(format!(
                    "header declares {} tensor bytes but shapes imply {n}",
                    header.tensor_bytes
                )))
            }
            None => return Err(self.corrupt("object shapes inconsistent with object count")),
        }
        let mut block = vec![0u8; header.tensor_bytes as usize];
        let got = read_fully(&mut self.source, &mut block)?;
        if got != block.len() {
            return Err(self.corrupt(format!(
                "tensor block truncated after {got} of {} bytes",
                block.len()
            )));
        }
        let clip = assemble(header, &block);
        let index = self.index;
        clip.validate().map_err(|e| match e {
            Error::Validation(m) => Error::validation(format!("clip {index}: {m}")),
            other => other,
        })?;
        Ok(Some(clip))
    }
}

impl<R: Read> Iterator for ClipReader<R> {
    type Item = Result<ClipFeatures>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.read_next();
        match &item {
            Ok(Some(_)) => self.index += 1,
            _ => self.done = true,
        }
        item.transpose()
    }
}

/// Like `read_exact` but reports how many bytes were available before EOF.
fn read_fully<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

fn assemble(header: ClipHeader, block: &[u8]) -> ClipFeatures {
    let mut cursor = block;
    let mut take_map = |layer_id: u8, shape: MapShape| {
        let (head, rest) = cursor.split_at(shape.len() * 4);
        cursor = rest;
        LayerFeatureMap {
            layer_id,
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data: head.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        }
    };
    let d = header.frame_indices.len();
    let frame_maps = (0..d)
        .map(|_| MapPair {
            layer2: take_map(2, header.frame_layer2),
            layer3: take_map(3, header.frame_layer3),
        })
        .collect();
    let objects = match (header.object_layer2, header.object_layer3) {
        (Some(l2), Some(l3)) => header
            .object_boxes
            .iter()
            .map(|&bbox| ClipObject {
                bbox,
                maps: (0..d)
                    .map(|_| MapPair { layer2: take_map(2, l2), layer3: take_map(3, l3) })
                    .collect(),
            })
            .collect(),
        _ => Vec::new(),
    };
    ClipFeatures {
        video_id: header.video_id,
        anchor_frame: header.anchor_frame,
        frame_indices: header.frame_indices,
        frame_maps,
        objects,
    }
}
