//! Dense row-major tensors and the pooling / resampling kernels used by the
//! fusion and partition stages.
//!
//! Every reduction accumulates in `f64` and stores back in the tensor's own
//! element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor of rank `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T, const R: usize> {
    dims: [usize; R],
    data: Vec<T>,
}

/// `(channels, height, width)` feature map.
pub type Map3<T> = Tensor<T, 3>;
/// `(n, c, h, w)`.
pub type Tensor4<T> = Tensor<T, 4>;
/// `(n, c, d, h, w)`: objects, channels, time, height, width.
pub type Tensor5<T> = Tensor<T, 5>;
/// `(channels, time)` sequence.
pub type Series2<T> = Tensor<T, 2>;

impl<T: Scalar, const R: usize> Tensor<T, R> {
    /// Builds a tensor, checking the length and that every value is finite.
    pub fn new(dims: [usize; R], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::validation(format!(
                "tensor of dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts(dims: [usize; R], data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: [usize; R]) -> Self {
        Self::from_parts(dims, vec![T::zero(); dims.iter().product()])
    }

    pub fn filled(dims: [usize; R], value: T) -> Self {
        Self::from_parts(dims, vec![value; dims.iter().product()])
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(dims: [usize; R], mut f: impl FnMut([usize; R]) -> T) -> Self {
        let len = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = [0usize; R];
        for _ in 0..len {
            data.push(f(idx));
            for axis in (0..R).rev() {
                idx[axis] += 1;
                if idx[axis] < dims[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> [usize; R] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; R]) -> usize {
        let mut off = 0;
        for axis in 0..R {
            debug_assert!(idx[axis] < self.dims[axis]);
            off = off * self.dims[axis] + idx[axis];
        }
        off
    }

    #[inline]
    pub fn get(&self, idx: [usize; R]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`; out-of-range taps replicate the edge.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalPool {
    Avg,
    Max,
}

fn check_window(kernel: (usize, usize), stride: (usize, usize)) -> Result<()> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::parameter(format!(
            "kernel {kernel:?} and stride {stride:?} must be positive"
        )));
    }
    Ok(())
}

/// Output length and leading pad along one axis.
fn pooled_extent(input: usize, kernel: usize, stride: usize, pad: Padding) -> Result<(usize, usize)> {
    match pad {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::dimension(format!("kernel {kernel} exceeds input extent {input}")));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            if input == 0 {
                return Err(Error::dimension("empty spatial extent"));
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                return Err(Error::dimension(format!(
                    "kernel {kernel} exceeds padded extent {}",
                    input + total
                )));
            }
            Ok((out, total / 2))
        }
    }
}

/// Mean over each `kernel` window of every channel.
pub fn avg_pool_2d<T: Scalar>(
    map: &Map3<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: Padding,
) -> Result<Map3<T>> {
    check_window(kernel, stride)?;
    let [c, h, w] = map.dims();
    let (oh, pad_top) = pooled_extent(h, kernel.0, stride.0, pad)?;
    let (ow, pad_left) = pooled_extent(w, kernel.1, stride.1, pad)?;
    let norm = (kernel.0 * kernel.1) as f64;
    let src = map.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..kernel.0 {
                    let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                    let iy = iy.clamp(0, h as isize - 1) as usize;
                    for kx in 0..kernel.1 {
                        let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                        let ix = ix.clamp(0, w as isize - 1) as usize;
                        acc += plane[iy * w + ix].to_f64_lossless();
                    }
                }
                out.push(T::from_f64_lossy(acc / norm));
            }
        }
    }
    Ok(Tensor::from_parts([c, oh, ow], out))
}

/// Per-channel mean or maximum over the whole spatial extent.
pub fn global_pool_2d<T: Scalar>(map: &Map3<T>, mode: GlobalPool) -> Result<Vec<T>> {
    let [c, h, w] = map.dims();
    if h == 0 || w == 0 {
        return Err(Error::dimension("global pooling over an empty spatial extent"));
    }
    let area = h * w;
    Ok(map
        .data()
        .chunks_exact(area)
        .take(c)
        .map(|plane| reduce_plane(plane, mode))
        .collect())
}

#[inline]
pub(crate) fn reduce_plane<T: Scalar>(plane: &[T], mode: GlobalPool) -> T {
    match mode {
        GlobalPool::Avg => {
            let sum: f64 = plane.iter().map(|v| v.to_f64_lossless()).sum();
            T::from_f64_lossy(sum / plane.len() as f64)
        }
        GlobalPool::Max => plane.iter().copied().fold(T::neg_infinity(), T::max),
    }
}

/// Mean over the time axis of an `(n, c, d, h, w)` tensor.
pub fn temporal_global_pool<T: Scalar>(lf: &Tensor5<T>) -> Result<Tensor4<T>> {
    let [n, c, d, h, w] = lf.dims();
    if d == 0 {
        return Err(Error::dimension("temporal pooling over zero frames"));
    }
    let area = h * w;
    let src = lf.data();
    let mut out = Vec::with_capacity(n * c * area);
    let mut acc = vec![0.0f64; area];
    for block in src.chunks_exact(d * area).take(n * c) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for frame in block.chunks_exact(area) {
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += v.to_f64_lossless();
            }
        }
        out.extend(acc.iter().map(|a| T::from_f64_lossy(a / d as f64)));
    }
    Ok(Tensor::from_parts([n, c, h, w], out))
}

/// Stride-1 max pooling along time with the last frame replicated on the
/// right, so the output keeps the input length:
/// `out[t] = max(seq[t ..= min(t + kernel - 1, d - 1)])`.
pub fn temporal_max_pool<T: Scalar>(seq: &Series2<T>, kernel: usize) -> Result<Series2<T>> {
    let [c, d] = seq.dims();
    if d == 0 {
        return Err(Error::dimension("temporal max pooling over zero frames"));
    }
    if kernel == 0 {
        return Err(Error::parameter("temporal kernel must be positive"));
    }
    let mut out = Vec::with_capacity(c * d);
    for row in seq.data().chunks_exact(d) {
        for t in 0..d {
            let end = (t + kernel).min(d);
            out.push(row[t..end].iter().copied().fold(T::neg_infinity(), T::max));
        }
    }
    Ok(Tensor::from_parts([c, d], out))
}

/// Bilinear resampling with half-pixel centers (corner alignment off).
pub fn resample_2d<T: Scalar>(map: &Map3<T>, target: (usize, usize)) -> Result<Map3<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::dimension(format!("resample target {target:?} has a zero extent")));
    }
    let [c, h, w] = map.dims();
    if h == 0 || w == 0 {
        return Err(Error::dimension("resample source has a zero extent"));
    }
    if (h, w) == target {
        return Ok(map.clone());
    }
    let ys: Vec<_> = (0..th).map(|y| source_taps(y, h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| source_taps(x, w, tw)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].to_f64_lossless();
                let top = (1.0 - lx) * at(y0, x0) + lx * at(y0, x1);
                let bottom = (1.0 - lx) * at(y1, x0) + lx * at(y1, x1);
                out.push(T::from_f64_lossy((1.0 - ly) * top + ly * bottom));
            }
        }
    }
    Ok(Tensor::from_parts([c, th, tw], out))
}

/// `(lower, upper, weight_of_upper)` for one output coordinate.
fn source_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, vals: &[f64]) -> Map3<f64> {
        Tensor::new([c, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Tensor::<f32, 2>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32, 2>::new([1, 2], vec![0.0, f32::NAN]).is_err());
        assert!(Tensor::<f32, 2>::new([1, 2], vec![0.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::<f64, 3>::from_fn([2, 3, 4], |[a, b, c]| (a * 100 + b * 10 + c) as f64);
        assert_eq!(t.get([1, 2, 3]), 123.0);
        assert_eq!(t.data()[t.offset([1, 0, 2])], 102.0);
    }

    #[test]
    fn avg_pool_blocks_of_sixteen() {
        let vals: Vec<f64> = (1..=16).map(f64::from).collect();
        let out = avg_pool_2d(&map(1, 4, 4, &vals), (2, 2), (2, 2), Padding::Valid).unwrap();
        assert_eq!(out.dims(), [1, 2, 2]);
        assert_eq!(out.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn avg_pool_identity_and_constant() {
        let vals: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let m = map(3, 2, 2, &vals);
        assert_eq!(avg_pool_2d(&m, (1, 1), (1, 1), Padding::Valid).unwrap(), m);
        let k = Tensor::filled([2, 5, 5], 1.25f64);
        for pad in [Padding::Same, Padding::Valid] {
            let out = avg_pool_2d(&k, (3, 3), (1, 1), pad).unwrap();
            assert!(out.data().iter().all(|&v| v == 1.25));
        }
    }

    #[test]
    fn same_padding_keeps_extent_and_replicates_edges() {
        // 1x3 row [0, 3, 6] with a 1x3 kernel: edges see replicated neighbours.
        let m = map(1, 1, 3, &[0.0, 3.0, 6.0]);
        let out = avg_pool_2d(&m, (1, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!(out.dims(), [1, 1, 3]);
        assert_eq!(out.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn avg_pool_rejects_oversized_kernel() {
        let m = Tensor::<f32, 3>::zeros([1, 3, 3]);
        assert!(matches!(
            avg_pool_2d(&m, (4, 4), (4, 4), Padding::Valid),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            avg_pool_2d(&m, (0, 1), (1, 1), Padding::Valid),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn global_pool_modes() {
        let m = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool_2d(&m, GlobalPool::Avg).unwrap(), vec![2.5]);
        assert_eq!(global_pool_2d(&m, GlobalPool::Max).unwrap(), vec![4.0]);
        let px = map(2, 1, 1, &[-1.0, 7.0]);
        for mode in [GlobalPool::Avg, GlobalPool::Max] {
            assert_eq!(global_pool_2d(&px, mode).unwrap(), vec![-1.0, 7.0]);
        }
        assert!(global_pool_2d(&Tensor::<f64, 3>::zeros([1, 0, 2]), GlobalPool::Avg).is_err());
    }

    #[test]
    fn temporal_global_pool_two_slices() {
        // n=1, c=1, d=2, 1x2: slices A=[1,2], B=[3,6]
        let lf = Tensor::new([1, 1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 6.0]).unwrap();
        let out = temporal_global_pool(&lf).unwrap();
        assert_eq!(out.dims(), [1, 1, 1, 2]);
        assert_eq!(out.data(), &[2.0, 4.0]);
        assert!(temporal_global_pool(&Tensor::<f64, 5>::zeros([1, 1, 0, 1, 1])).is_err());
    }

    #[test]
    fn temporal_max_pool_rule() {
        let s = Tensor::new([1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(temporal_max_pool(&s, 2).unwrap().data(), &[2.0, 3.0, 3.0]);
        let single = Tensor::new([2, 1], vec![4.0f64, -1.0]).unwrap();
        assert_eq!(temporal_max_pool(&single, 2).unwrap(), single);
        let flat = Tensor::filled([3, 5], 2.0f64);
        assert_eq!(temporal_max_pool(&flat, 2).unwrap(), flat);
    }

    #[test]
    fn resample_identity_and_constant() {
        let m = map(1, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(resample_2d(&m, (2, 2)).unwrap(), m);
        let k = Tensor::filled([2, 3, 3], -0.75f64);
        for target in [(1, 1), (4, 7), (9, 2)] {
            let out = resample_2d(&k, target).unwrap();
            assert!(out.data().iter().all(|&v| (v + 0.75).abs() < 1e-15));
        }
        assert!(resample_2d(&m, (0, 3)).is_err());
    }

    /// Independent bilinear reference: explicit interpolation formula on
    /// continuous coordinates, clamped at the borders.
    fn bilinear_oracle(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
        let sample = |y: f64, x: f64| {
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as usize, x0 as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * w + x1] * (1.0 - fy) * fx
                + src[y1 * w + x0] * fy * (1.0 - fx)
                + src[y1 * w + x1] * fy * fx
        };
        let mut out = Vec::new();
        for oy in 0..th {
            for ox in 0..tw {
                let y = (oy as f64 + 0.5) * h as f64 / th as f64 - 0.5;
                let x = (ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5;
                out.push(sample(y, x));
            }
        }
        out
    }

    #[test]
    fn resample_upsample_matches_oracle() {
        let m = map(1, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let out = resample_2d(&m, (4, 4)).unwrap();
        let want = bilinear_oracle(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // first row: [0, 0.25, 0.75, 1]
        assert_eq!(&out.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    proptest! {
        #[test]
        fn avg_never_exceeds_max(vals in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let m = map(1, 1, vals.len(), &vals);
            let avg = global_pool_2d(&m, GlobalPool::Avg).unwrap()[0];
            let max = global_pool_2d(&m, GlobalPool::Max).unwrap()[0];
            prop_assert!(avg <= max + 1e-9);
        }

        #[test]
        fn temporal_max_pool_dominates(vals in prop::collection::vec(-10f64..10.0, 1..24)) {
            let s = Tensor::new([1, vals.len()], vals.clone()).unwrap();
            let out = temporal_max_pool(&s, 2).unwrap();
            for (o, v) in out.data().iter().zip(&vals) {
                prop_assert!(o >= v);
            }
        }

        #[test]
        fn resample_matches_oracle(h in 1usize..6, w in 1usize..6, th in 1usize..9, tw in 1usize..9, seed in 0u64..1000) {
            let vals: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 7.0).collect();
            let out = resample_2d(&map(1, h, w, &vals), (th, tw)).unwrap();
            let want = bilinear_oracle(&vals, h, w, th, tw);
            for (a, b) in out.data().iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
