//! Software model of a multi-scale deformable attention accelerator.
//!
//! * [`reference`]: floating-point golden model and its fixed-point twin.
//! * [`pruning`]: frequency-weighted fmap pruning and probability-aware
//!   point pruning, plus the on-disk mask format.
//! * [`geometry`]: range narrowing, bank mapping and fmap reuse.
//! * [`sim`]: cycle, traffic and energy model of the datapath.

pub mod error;
pub mod geometry;
pub mod pruning;
pub mod reference;
pub mod sim;
pub mod tensor;

pub use error::{DefaError, Result};
pub use geometry::{BankMapping, BoundedRange, Neighborhood, PixelRect, SamplingPlan, SRAM_BANKS};
pub use pruning::{FmapMask, FrequencyMap, MaskFile, PointMask};
pub use reference::{AttentionProbs, AttnOptions, WeightSet};
pub use sim::{BlockInputs, BlockResult, CycleReport, EnergyReport, HardwareConfig, ModeFlags, Parallelism, Traffic};
pub use tensor::{FmapLayout, LevelOrder, LevelShape, Matrix, ModelConfig, QuantTensor, ReferencePoints};
