//! Toy-scale translator: ViT encoder, detail pyramid, U-Net decoder and Tanh heads.

mod graph;
mod params;
mod resize;
mod tensor;

pub use graph::{BatchNormStats, Graph, Var};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use resize::{interp_matrix, resize_plane, Interp};
pub use tensor::Tensor;
mod translator;

pub use translator::{
    normalize_input, rgb_to_planes, ForwardRng, LoraConfig, Translator, TranslatorConfig, ViTConfig, BOTTLENECK_STRIDE,
    IMAGENET_MEAN, IMAGENET_STD, INIT_STD,
};
mod augment;
mod loss;
mod optim;

pub use augment::{augment_pair, hed_jitter, hflip, vflip, zero_box, AugmentConfig};
pub use loss::{per_marker_mse, scale_target, unscale_output, weighted_mse, LossConfig, SIGMA_FLOOR, TARGET_RANGE};
pub use optim::{clip_grad_norm, learning_rate, Adam};
mod predict;
mod train;

pub use predict::{global_pearson, predict_tile, predict_tiles};
pub use train::{write_loss_curve, StepRecord, TrainConfig, TrainEvent, TrainSample, Trainer, ValidationRecord};
mod checkpoint;
mod gradcheck;

pub use checkpoint::{
    load_checkpoint, load_trainer_state, save_checkpoint, save_trainer_state, sidecar_path, state_path, write_weights,
    CheckpointMeta,
};
pub use gradcheck::{check_gradients, finite_difference_check, GradCheckReport, DENOM_FLOOR, FD_STEP};
