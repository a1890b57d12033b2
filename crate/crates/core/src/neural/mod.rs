//! From-scratch encoder-decoder transformer that reads a ciphertext and
//! writes out its 27-entry decode dictionary.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use config::{count_params, ModelConfig, TGT_LEN};
pub use model::{
    argmax_symbol, backward, batch_loss_and_grad, decoder_input, forward, loss, predict_dictionary,
    DictionaryPrediction,
};
pub use params::{init_model, ModelParams, Scalar};
pub use train::{train, TrainOptions, TrainOutcome, TrainRecord};
