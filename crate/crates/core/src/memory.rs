//! Memory banks: greedy coreset construction, exact nearest-neighbour
//! queries and the on-disk bank format.
//!
//! Bank file layout (little-endian):
//!
//! ```text
//! "VPCB" | u16 version | u32 header_len | JSON BankHeader | M*dim items
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::config::BuildStrategy;
use crate::error::{Error, Result};
use crate::partition::{PatchKind, PatchSet};
use crate::scalar::{squared_distance, Scalar};

pub const BANK_MAGIC: &[u8; 4] = b"VPCB";
pub const BANK_VERSION: u16 = 1;

/// Candidates per parallel chunk in the greedy update.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    pub kind: PatchKind,
    pub dim: usize,
    /// `M x dim`, rows in selection order.
    pub items: Vec<T>,
    pub ratio: f64,
    pub strategy: BuildStrategy,
    pub seed: u64,
    pub fingerprint: String,
    /// Number of patches the bank was selected from.
    pub source_patches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankOptions {
    pub ratio: f64,
    pub strategy: BuildStrategy,
    pub seed: u64,
    pub projection_dim: Option<usize>,
    pub fingerprint: String,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn len(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, i: usize) -> &[T] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact Euclidean nearest item; ties go to the lowest index.
    pub fn nearest(&self, query: &[T]) -> Result<Neighbor> {
        nearest_distance(self, query)
    }

    /// Covering radius of `points` by this bank: `max_x min_m |x - m|`.
    pub fn covering_radius(&self, points: &[T]) -> Result<f64> {
        points
            .chunks_exact(self.dim)
            .map(|x| self.nearest(x).map(|n| n.distance))
            .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    }
}

/// Bank size for `n` input patches at `ratio`.
pub fn coreset_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Greedy farthest-point selection of `max(1, round(ratio * N))` rows.
///
/// The first pick is row `seed mod N`; each following pick is the row with
/// the largest distance to its nearest already-picked row, lowest index on
/// ties. Returned in selection order.
pub fn coreset_subsample<T: Scalar>(data: &[T], dim: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    coreset_select(data, dim, ratio, seed, None)
}

/// [`coreset_subsample`] with distances optionally measured after a seeded
/// Gaussian random projection to `projection_dim` dimensions.
pub fn coreset_select<T: Scalar>(
    data: &[T],
    dim: usize,
    ratio: f64,
    seed: u64,
    projection_dim: Option<usize>,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::parameter(format!("coreset ratio {ratio} outside (0, 1]")));
    }
    if dim == 0 || data.is_empty() {
        return Err(Error::parameter("coreset of an empty patch matrix"));
    }
    if !data.len().is_multiple_of(dim) {
        return Err(Error::parameter(format!("{} values do not form rows of {dim}", data.len())));
    }
    let n = data.len() / dim;
    let k = coreset_size(n, ratio);
    let start = (seed % n as u64) as usize;
    match projection_dim {
        Some(p) if p < dim => {
            let projected = random_projection(data, dim, p, seed);
            Ok(greedy_farthest(&projected, p, k, start))
        }
        _ => Ok(greedy_farthest(data, dim, k, start)),
    }
}

fn random_projection<T: Scalar>(data: &[T], dim: usize, out_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e37_79b9_7f4a);
    let scale = 1.0 / (out_dim as f64).sqrt();
    let proj: Vec<f64> = (0..dim * out_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    data.chunks_exact(dim)
        .flat_map(|row| {
            let proj = &proj;
            (0..out_dim).map(move |j| {
                row.iter()
                    .enumerate()
                    .map(|(i, v)| v.to_f64_lossless() * proj[i * out_dim + j])
                    .sum::<f64>()
            })
        })
        .collect()
}

fn greedy_farthest<T: Scalar>(data: &[T], dim: usize, k: usize, start: usize) -> Vec<usize> {
    let n = data.len() / dim;
    // Squared distance to the nearest selected row; negative marks selected.
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(k);
    let mut next = start;
    loop {
        picked.push(next);
        min_d2[next] = -1.0;
        if picked.len() == k {
            break;
        }
        let center = &data[next * dim..(next + 1) * dim];
        let best = min_d2
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(chunk, slots)| {
                let mut best: Option<(f64, usize)> = None;
                for (off, slot) in slots.iter_mut().enumerate() {
                    if *slot < 0.0 {
                        continue;
                    }
                    let j = chunk * CHUNK + off;
                    let d2 = squared_distance(&data[j * dim..(j + 1) * dim], center);
                    if d2 < *slot {
                        *slot = d2;
                    }
                    if best.is_none_or(|(b, _)| *slot > b) {
                        best = Some((*slot, j));
                    }
                }
                best
            })
            .reduce(|| None, pick_farther);
        match best {
            Some((_, j)) => next = j,
            None => break,
        }
    }
    picked
}

/// Larger distance wins; equal distances keep the lower index.
fn pick_farther(a: Option<(f64, usize)>, b: Option<(f64, usize)>) -> Option<(f64, usize)> {
    match (a, b) {
        (Some(x), Some(y)) => {
            if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                Some(y)
            } else {
                Some(x)
            }
        }
        (x, None) => x,
        (None, y) => y,
    }
}

/// Builds a bank from per-video patch sets.
pub fn build_bank<T: Scalar>(videos: &[PatchSet<T>], opts: &BankOptions) -> Result<MemoryBank<T>> {
    let first = videos.first().ok_or_else(|| Error::EmptyBank("no patch sets".into()))?;
    let (kind, dim) = (first.kind, first.dim);
    if let Some(bad) = videos.iter().find(|v| v.kind != kind || v.dim != dim) {
        return Err(Error::validation(format!(
            "mixed patch sets: {} dim {} alongside {} dim {}",
            kind.name(),
            dim,
            bad.kind.name(),
            bad.dim
        )));
    }
    let source_patches: usize = videos.iter().map(PatchSet::len).sum();
    if source_patches == 0 {
        return Err(Error::EmptyBank(format!("no {} patches to memorize", kind.name())));
    }
    let mut items = Vec::new();
    match opts.strategy {
        BuildStrategy::PerVideoThenConcat => {
            for video in videos.iter().filter(|v| !v.is_empty()) {
                let picks = coreset_select(&video.data, dim, opts.ratio, opts.seed, opts.projection_dim)?;
                for i in picks {
                    items.extend_from_slice(video.row(i));
                }
            }
        }
        BuildStrategy::ConcatThenSubsample => {
            let mut all = Vec::with_capacity(source_patches * dim);
            for video in videos {
                all.extend_from_slice(&video.data);
            }
            let picks = coreset_select(&all, dim, opts.ratio, opts.seed, opts.projection_dim)?;
            for i in picks {
                items.extend_from_slice(&all[i * dim..(i + 1) * dim]);
            }
        }
    }
    Ok(MemoryBank {
        kind,
        dim,
        items,
        ratio: opts.ratio,
        strategy: opts.strategy,
        seed: opts.seed,
        fingerprint: opts.fingerprint.clone(),
        source_patches,
    })
}

/// Exact nearest bank item by linear scan with `f64` accumulation.
pub fn nearest_distance<T: Scalar>(bank: &MemoryBank<T>, query: &[T]) -> Result<Neighbor> {
    if query.len() != bank.dim {
        return Err(Error::validation(format!(
            "query of dim {} against a {} bank of dim {}",
            query.len(),
            bank.kind.name(),
            bank.dim
        )));
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank(format!("{} bank has no items", bank.kind.name())));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, item) in bank.items.chunks_exact(bank.dim).enumerate() {
        let d2 = squared_distance(item, query);
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    Ok(Neighbor { distance: best.0.sqrt(), index: best.1 })
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    kind: PatchKind,
    dim: usize,
    len: usize,
    ratio: f64,
    strategy: BuildStrategy,
    seed: u64,
    fingerprint: String,
    dtype: String,
    source_patches: usize,
}

pub fn write_bank<T: Scalar, W: Write>(bank: &MemoryBank<T>, mut sink: W) -> Result<u64> {
    let header = serde_json::to_vec(&BankHeader {
        kind: bank.kind,
        dim: bank.dim,
        len: bank.len(),
        ratio: bank.ratio,
        strategy: bank.strategy,
        seed: bank.seed,
        fingerprint: bank.fingerprint.clone(),
        dtype: T::DTYPE.into(),
        source_patches: bank.source_patches,
    })?;
    let mut buf = Vec::with_capacity(10 + header.len() + bank.items.len() * T::BYTES);
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for &v in &bank.items {
        v.write_le(&mut buf);
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn read_bank<T: Scalar, R: Read>(mut source: R) -> Result<MemoryBank<T>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let fail = |m: &str| Error::Format(format!("bank file: {m}"));
    if bytes.len() < 10 || &bytes[..4] != BANK_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BANK_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body_start = 10 + header_len;
    let header: BankHeader = serde_json::from_slice(bytes.get(10..body_start).ok_or_else(|| fail("truncated header"))?)
        .map_err(|e| fail(&e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(fail(&format!("stored as {} but read as {}", header.dtype, T::DTYPE)));
    }
    if header.dim == 0 || header.len == 0 {
        return Err(fail("empty bank"));
    }
    let expected = header.len * header.dim * T::BYTES;
    let body = &bytes[body_start.min(bytes.len())..];
    if body.len() != expected {
        return Err(fail(&format!("item block holds {} bytes, header implies {expected}", body.len())));
    }
    let items: Vec<T> = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    if items.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite item"));
    }
    Ok(MemoryBank {
        kind: header.kind,
        dim: header.dim,
        items,
        ratio: header.ratio,
        strategy: header.strategy,
        seed: header.seed,
        fingerprint: header.fingerprint,
        source_patches: header.source_patches,
    })
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_bank<T: Scalar>(bank: &MemoryBank<T>, path: &Path) -> Result<u64> {
    let mut buf = Vec::new();
    let n = write_bank(bank, &mut buf)?;
    crate::atomic_write(path, &buf)?;
    Ok(n)
}

/// Loads a bank; with `expected_fingerprint` set, a bank memorized under a
/// different patch geometry is refused.
pub fn load_bank<T: Scalar>(path: &Path, expected_fingerprint: Option<&str>) -> Result<MemoryBank<T>> {
    let bank = read_bank(fs::File::open(path)?)?;
    if let Some(expected) = expected_fingerprint {
        if bank.fingerprint != expected {
            return Err(Error::ConfigDrift { expected: expected.into(), found: bank.fingerprint });
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::Provenance;

    fn set(kind: PatchKind, dim: usize, rows: &[&[f64]]) -> PatchSet<f64> {
        let mut s = PatchSet::empty(kind, dim);
        for r in rows {
            s.push(r, Provenance { video_id: "v".into(), anchor_frame: 0, object_index: 0, frame_index: None });
        }
        s
    }

    fn opts(ratio: f64, strategy: BuildStrategy) -> BankOptions {
        BankOptions { ratio, strategy, seed: 0, projection_dim: None, fingerprint: "fp".into() }
    }

    #[test]
    fn line_points_pick_far_end() {
        let pts = [0.0f64, 1.0, 10.0];
        assert_eq!(coreset_subsample(&pts, 1, 2.0 / 3.0, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let pts = [0.0f64, 0.0, 5.0, 5.0, 1.0, 1.0, 0.0, 0.0];
        let mut picks = coreset_subsample(&pts, 2, 1.0, 0).unwrap();
        assert_eq!(picks, vec![0, 1, 2, 3]);
        picks.sort();
        assert_eq!(picks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicate_rows_are_still_each_picked_once() {
        let pts = [1.0f64; 6];
        assert_eq!(coreset_subsample(&pts, 1, 1.0, 4).unwrap(), vec![4, 0, 1, 2, 3, 5]);
    }

    #[test]
    fn size_never_zero() {
        assert_eq!(coreset_size(10, 0.01), 1);
        assert_eq!(coreset_size(1000, 0.25), 250);
        assert_eq!(coreset_size(15, 0.1), 2);
        assert_eq!(coreset_size(3, 1.0), 3);
    }

    #[test]
    fn coreset_parameter_errors() {
        assert!(matches!(coreset_subsample(&[1.0f32], 1, 0.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(coreset_subsample(&[1.0f32], 1, 1.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(coreset_subsample::<f32>(&[], 1, 0.5, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn projection_keeps_selection_valid() {
        let pts: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64).collect();
        let picks = coreset_select(&pts, 8, 0.2, 3, Some(3)).unwrap();
        assert_eq!(picks.len(), 10);
        let mut uniq = picks.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn nearest_hand_example() {
        let bank = build_bank(
            &[set(PatchKind::Spatial, 2, &[&[0.0, 0.0], &[3.0, 4.0]])],
            &opts(1.0, BuildStrategy::ConcatThenSubsample),
        )
        .unwrap();
        let n = bank.nearest(&[0.0, 1.0]).unwrap();
        assert_eq!(n, Neighbor { distance: 1.0, index: 0 });
        let exact = bank.nearest(&[3.0, 4.0]).unwrap();
        assert_eq!(exact, Neighbor { distance: 0.0, index: 1 });
        assert!(matches!(bank.nearest(&[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn strategies_agree_for_one_video() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let videos = [set(PatchKind::Temporal, 2, &refs)];
        let a = build_bank(&videos, &opts(0.2, BuildStrategy::PerVideoThenConcat)).unwrap();
        let b = build_bank(&videos, &opts(0.2, BuildStrategy::ConcatThenSubsample)).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn build_errors() {
        let mixed = [set(PatchKind::Spatial, 1, &[&[0.0]]), set(PatchKind::Temporal, 1, &[&[0.0]])];
        assert!(matches!(
            build_bank(&mixed, &opts(1.0, BuildStrategy::ConcatThenSubsample)),
            Err(Error::Validation(_))
        ));
        let empty = [PatchSet::<f64>::empty(PatchKind::Spatial, 3)];
        assert!(matches!(
            build_bank(&empty, &opts(1.0, BuildStrategy::PerVideoThenConcat)),
            Err(Error::EmptyBank(_))
        ));
    }

    #[test]
    fn bank_file_roundtrip_and_drift() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spatial.vpcb");
        let bank = MemoryBank {
            kind: PatchKind::Spatial,
            dim: 3,
            items: vec![0.5f32, -1.0, 2.25],
            ratio: 0.1,
            strategy: BuildStrategy::PerVideoThenConcat,
            seed: 7,
            fingerprint: "abc".into(),
            source_patches: 10,
        };
        save_bank(&bank, &path).unwrap();
        assert_eq!(load_bank::<f32>(&path, Some("abc")).unwrap(), bank);
        assert_eq!(load_bank::<f32>(&path, None).unwrap(), bank);
        assert!(matches!(load_bank::<f32>(&path, Some("xyz")), Err(Error::ConfigDrift { .. })));
        assert!(matches!(load_bank::<f64>(&path, None), Err(Error::Format(_))));

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(read_bank::<f32, _>(&bytes[..]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(read_bank::<f32, _>(&bytes[..]), Err(Error::Format(_))));
    }
}
