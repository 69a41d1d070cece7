pub mod coarse2fine;
pub mod correspondence;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod trainer;
pub mod window;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use coarse2fine::{StudentConfig, StudentParams};
pub use correspondence::{FlowField, MappingConfig, OcclusionMask, ProbMap};
pub use encoder::{EncoderConfig, EncoderParams, FeatureMap};
pub use losses::LabelDist;
pub use numerics::tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ProbMap32 = ProbMap<f32>;
pub type ProbMap64 = ProbMap<f64>;
pub type LabelDist32 = LabelDist<f32>;
pub type LabelDist64 = LabelDist<f64>;
pub type Encoder32 = EncoderParams<f32>;
pub type Encoder64 = EncoderParams<f64>;
pub type Student32 = StudentParams<f32>;
pub type Student64 = StudentParams<f64>;

/// Sizes the global worker pool used by the parallel kernels. Results do not
/// depend on the thread count; call at most once, before any other work.
pub fn init_thread_pool(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
