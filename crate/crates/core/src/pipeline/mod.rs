//! Dataset synthesis and ingestion, augmentation, sampling, checkpoints,
//! and the three training stages.

pub mod augment;
pub mod checkpoint;
pub mod manifest;
pub mod sampling;
pub mod synth;
pub mod train;

pub use augment::{augment, AugmentConfig, GeomOp};
pub use checkpoint::Checkpoint;
pub use manifest::{Dataset, Manifest, SamplePair, Split};
pub use sampling::{chunk_batches, oversample_plan, pk_batches};
pub use synth::{synth_dataset, Imbalance, SplitSpec, SynthConfig};
pub use train::{
    compute_hog, evaluate, extract_hog_stage, finetune, load_cfnet, load_classifier, predict, pretrain,
    reconstruction_psnr, save_classifier, CurveRow, EpochRecord, FinetuneConfig, FinetuneOutcome, HogFeatures,
    HogSource, LrSchedule, PretrainConfig, PretrainOutcome,
};
