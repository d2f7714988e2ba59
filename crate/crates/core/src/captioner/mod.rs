//! Toy multimodal captioner on synthetic data.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{synth_dataset, DatasetSpec, Item, Split, SyntheticDataset, BOS, EOS, PAD, UNK};
pub use decode::{beam_decode, enumerate_best, greedy_decode, Hypothesis, ItemDecoder, StepModel};
pub use model::{Captioner, DataShape, DecoderState, InferenceParams, ModelConfig};
pub use train::{evaluate, train, train_with, EpochRecord, Evaluation, TrainConfig};

impl SyntheticDataset {
    /// Input shapes for a model trained on this dataset.
    pub fn data_shape(&self) -> DataShape {
        DataShape {
            d_raw: vec![self.spec.d_raw; self.spec.n_modalities],
            extents: self.extents(),
            vocab: self.spec.vocab_size,
        }
    }
}
