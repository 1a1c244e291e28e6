mod checkpoint;
mod config;
mod count;
mod encoder;
mod heads;
mod layout;

pub use checkpoint::Checkpoint;
pub use config::{EncoderConfig, INIT_STD, LAYER_NORM_EPS, SEGMENT_VOCAB};
pub use count::{count_parameters, encoder_parameters, head_parameters};
pub use encoder::{EmbeddingTying, EncoderInput, EncoderModel, EncoderOutput, SharedEmbeddings};
pub use heads::{Head, HeadKind};
pub use layout::{init_parameters, init_value, register, Init, ParamSpec};
