//! Per-slice activity embeddings.

pub mod sgns;
pub mod slice;
pub mod store;
pub mod token;
pub mod tune;

pub use sgns::{negative_sample, sgns_pair_gradient, sgns_pair_loss, train_slice, train_slices, NegativeSampler, SgnsConfig, SliceEmbeddings, TrainingMode};
pub use slice::{context_pairs, event_pairs, slice_events, TimeSlice};
pub use store::{read_embeddings, write_embeddings, EmbeddingManifest};
pub use token::{ActivityToken, TokenGranularity, Vocabulary};
pub use tune::{tune_hyperparameters, SearchSpace, TuneResult};
