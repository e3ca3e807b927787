//! Training-free video anomaly detection over precomputed backbone features.

pub mod config;
pub mod error;
pub mod eval;
pub mod feature_io;
pub mod fusion;
pub mod memory;
pub mod partition;
pub mod pipeline;
pub mod scalar;
pub mod scoring;
pub mod synthetic;
pub mod tensor;

use std::io::Write;
use std::path::Path;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use feature_io::ClipFeatures;
pub use scalar::Scalar;

pub type Tensor5F32 = tensor::Tensor5<f32>;
pub type Tensor5F64 = tensor::Tensor5<f64>;
pub type PatchSet32 = partition::PatchSet<f32>;
pub type PatchSet64 = partition::PatchSet<f64>;
pub type MemoryBank32 = memory::MemoryBank<f32>;
pub type MemoryBank64 = memory::MemoryBank<f64>;
pub type Banks32 = pipeline::Banks<f32>;
pub type Banks64 = pipeline::Banks<f64>;
pub type LocalFeatures32 = fusion::LocalFeatureTensor<f32>;
pub type LocalFeatures64 = fusion::LocalFeatureTensor<f64>;
pub type GlobalFeatures32 = fusion::GlobalFeatureTensor<f32>;
pub type GlobalFeatures64 = fusion::GlobalFeatureTensor<f64>;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
