//! Discriminative graphs of words for text classification.
//!
//! Each class gets its own PMI-weighted co-occurrence graph; together they
//! form a block-diagonal graph with one disconnected subgraph per class.
//! The crate builds these graphs, measures how well their spectral
//! embeddings separate classes, and trains a GCN + Bi-LSTM model that scores
//! how plausibly a sentence is a walk inside each class subgraph.

pub mod config;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod sparse;
pub mod spectral;
pub mod train;

pub use config::ExperimentConfig;
pub use corpus::{load_corpus, tokenize, Corpus, DatasetProfile, LoadOptions, LoadReport, Sentence, VocabIndex, WordId};
pub use error::{Error, Result};
pub use graph::{build_dgow, build_mgow, normalize_adjacency, Dgow, WordGraph};
pub use io::{Bundle, GraphFile};
pub use model::{Aggregator, DgowGnn, ModelConfig, Prediction};
pub use spectral::{similarity_report, similarity_report_for, spectral_embed, Construction, SimilarityOptions, SimilarityTable, SpectralOptions};
pub use train::{evaluate, fit, train_repeats, Evaluation, TrainConfig, TrainReport};
