//! The Mobile-UNet: a MobileNetV2 encoder whose stride-2 stages are mirrored
//! by five 4×4 transposed convolutions, with four encoder skips added into
//! the decoder and each fusion refined by an inverted residual block.

mod checkpoint;
mod config;
pub mod container;
mod model;

pub use checkpoint::{
    history_path, import_encoder_tensors, import_pretrained_encoder, load_model, load_weights,
    save_checkpoint, save_weights, sidecar_path, write_history_csv, HistoryEntry, ImportReport, Sidecar,
};
pub use config::{
    default_decoder, EncoderStage, ModelConfig, ShapePlan, Task, DEFAULT_INPUT_SIZE, MOBILENET_V2_STAGES,
    STEM_CHANNELS,
};
pub use model::{is_encoder_name, ForwardVars, Model, Normalization, ProbabilityModel};
