//! Training objectives and the shared training loop.

mod cdann;
mod hparams;
mod optim;
mod penalties;
mod record;
mod train;

pub use cdann::{one_hot, DiscPass, Discriminator};
pub use hparams::{
    default_or_sample_hparams, get, hparam_space, Algorithm, Dist, Family, HParamEntry, HParamMode, HParams,
};
pub use optim::{Adam, Optimizer, Sgd};
pub use penalties::{
    eqrm_quantile_node, eqrm_quantile_risk, ib_penalty, irm_penalty, mixup_combine, ogm_coefficients,
    quantile_weights, sum_vars, urm_penalty, urm_penalty_node,
};
pub use record::{run_id, setting_name, Checkpoint, RunRecord};
pub use train::{
    derive_run_seed, dg_loss, init_fusion, mixup_loss, mml_fuse, train_run, Batch, Model, RunOutput, RunSpec,
    TrainSettings, DEFAULT_EVAL_CADENCE,
    DEFAULT_STEPS, EMA_DECAY, EQRM_MIN_STEPS_AFTER_BURNIN, REPLICATE_NOTE, UNALIGNED_NOTE,
};
