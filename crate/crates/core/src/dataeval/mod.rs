//! Synthetic datasets, video files, metrics and evaluation protocols.

pub mod features;
pub mod io;
pub mod metrics;
pub mod protocol;
pub mod synthetic;

pub use features::FeatureEmbedder;
pub use io::{load_dataset, load_manifest, read_video, save_dataset, write_video, Manifest};
pub use metrics::{frechet_from_moments, frechet_proxy, mse, psnr};
pub use protocol::{
    config_hash, debiased_run, eval_protocol_debiased, eval_protocol_standard, evaluate, standard_run, ClipPredictor,
    EvalConfig, EvalReport, ModelPredictor, NoisePredictor, OraclePredictor, Protocol, ProtocolRun,
};
pub use synthetic::{
    coinflip_outcomes, gen_bouncing, gen_coinflip, generate, Dataset, SyntheticKind, SyntheticSpec,
};
