//! From-scratch 2-D U-Net for two-class slab segmentation.
//!
//! Topology: per stage two 3x3 conv + instance norm + leaky ReLU blocks, the
//! first conv of every stage after the first with stride 2; the decoder
//! upsamples by nearest neighbour followed by a 3x3 conv, concatenates the
//! skip connection and applies two more blocks; a 1x1 conv produces the two
//! class logits. Convs that feed a normalization have no bias.
//!
//! Everything is generic over [`Real`] so gradient checks run in `f64` and
//! training in `f32`.

mod infer;
mod loss;
mod model;
mod net;
mod ops;
mod train;

pub use infer::{classical_baseline, foreground_probability, otsu_threshold, predict, predict_ensemble};
pub use loss::{loss_dice_ce, soft_dice, LossTerms, LossWeights};
pub use model::{
    load_model, save_model, AnyModel, ModelHeader, ModelMetadata, TensorEntry, MODEL_MAGIC, MODEL_VERSION,
};
pub use net::{
    backward, forward_tensor, image_gradients, loss_and_gradients, parameter_count, preprocess, unet_forward,
    ForwardCache, ParamTensor, UNetParams,
};
pub use train::{
    cross_validate, kfold_split, train, Augmentation, EpochRecord, Optimizer, TrainConfig, TrainOutcome, TrainSample,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Training resolution used throughout, mm/px.
pub const DEFAULT_SPACING_MM: f64 = 0.5;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("config/shape mismatch: {0}")]
    ConfigShapeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image spacing {got:?} mm/px differs from the model resolution; resample to {expected} mm/px first")]
    ResolutionMismatch { got: Option<f64>, expected: f64 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model load failure: {0}")]
    ModelLoadFailure(String),
    #[error("model write failure: {0}")]
    ModelWriteFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Nearest-neighbour x2 followed by a 3x3 conv with bias.
    NearestConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    pub kernel: usize,
    pub convs_per_stage: usize,
    pub upsampling: Upsampling,
    pub normalization: Normalization,
    pub norm_eps: f64,
    pub negative_slope: f64,
    /// Resolution the network is trained and run at, mm/px.
    pub spacing_mm: f64,
}

impl UNetConfig {
    pub fn new(channels: Vec<usize>) -> Self {
        Self {
            stages: channels.len(),
            channels,
            in_channels: 3,
            classes: 2,
            kernel: 3,
            convs_per_stage: 2,
            upsampling: Upsampling::NearestConv,
            normalization: Normalization::Instance,
            norm_eps: 1e-5,
            negative_slope: 0.01,
            spacing_mm: DEFAULT_SPACING_MM,
        }
    }

    /// Seven stages, 32 to 512 channels.
    pub fn full() -> Self {
        Self::new(vec![32, 64, 128, 256, 512, 512, 512])
    }

    /// Three stages, 16/32/64 channels.
    pub fn desk() -> Self {
        Self::new(vec![16, 32, 64])
    }

    /// Two stages, 4/8 channels, for gradient checks and overfitting tests.
    pub fn tiny() -> Self {
        Self::new(vec![4, 8])
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let bad = |m: String| Err(UNetError::ConfigShapeMismatch(m));
        if self.stages == 0 || self.channels.len() != self.stages {
            return bad(format!("{} stages but channels {:?}", self.stages, self.channels));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.classes != 2 || self.kernel != 3 || self.convs_per_stage != 2 {
            return bad(format!(
                "supported: classes 2, kernel 3, convs_per_stage 2 (got {}, {}, {})",
                self.classes, self.kernel, self.convs_per_stage
            ));
        }
        if !(self.norm_eps > 0.0) || !(self.negative_slope >= 0.0) || !(self.spacing_mm > 0.0) {
            return bad("norm_eps, negative_slope and spacing_mm must be positive".into());
        }
        Ok(())
    }

    /// Input sides must be multiples of this after padding.
    pub fn divisor(&self) -> usize {
        1 << (self.stages - 1)
    }
}

/// Floating-point element type of a network.
pub trait Real:
    num_traits::Float
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = op(A) op(B) + beta C` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn of(v: f64) -> Self {
                v as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(a.0.len() >= extent(m, k, a.1, a.2));
                assert!(b.0.len() >= extent(k, n, b.1, b.2));
                assert!(c.0.len() >= extent(m, n, c.1, c.2));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Channel-major activation tensor `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self, UNetError> {
        if data.len() != c * h * w {
            return Err(UNetError::ShapeMismatch(format!(
                "{} values for {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn plane(&self, ch: usize) -> &[T] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    pub fn get(&self, ch: usize, r: usize, col: usize) -> T {
        self.data[(ch * self.h + r) * self.w + col]
    }

    /// Zero-pads bottom and right to `h x w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = Self::zeros(self.c, h, w);
        for ch in 0..self.c {
            for r in 0..self.h {
                let src = &self.data[(ch * self.h + r) * self.w..][..self.w];
                out.data[(ch * h + r) * w..][..self.w].copy_from_slice(src);
            }
        }
        out
    }

    /// Top-left `h x w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = Self::zeros(self.c, h, w);
        for ch in 0..self.c {
            for r in 0..h {
                let src = &self.data[(ch * self.h + r) * self.w..][..w];
                out.data[(ch * h + r) * w..][..w].copy_from_slice(src);
            }
        }
        out
    }
}
