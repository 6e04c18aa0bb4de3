//! Synthetic multimodal world: each modality's raw observations are generated
//! from a shared, label-bearing essence latent and a modality-specific style
//! latent, then mapped into detector features by a simulated perceptor.

mod config;
mod oracle;
mod perceptor;
mod split;
mod world;

pub use config::WorldConfig;
pub use oracle::{bayes_auc_oracle, essence_bayes_auc};
pub use perceptor::{
    apply_perceptor, build_perceptor, fit_isolated_perceptor, perceive_semantic, perceptor_noise_key,
    random_init_map, semantic_map, ModalityDataset, PerceptorMap, PerceptorMode,
};
pub use split::{split_dataset, Split};
pub use world::{generate_world, ModalityParams, RawSamples, SyntheticWorld};
