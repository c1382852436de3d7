//! Hierarchical occupation classification of job advertisements.
//!
//! Job ads (title, description, skills) are cleaned and tokenized, turned
//! into fixed-size vectors, and classified against multi-level occupation
//! taxonomies (UK ONS SOC, US O*NET) by per-level feed-forward heads.
//! Level outputs can be routed top-down, combined across levels, pruned for
//! ancestry consistency, and fused across features.

pub mod corpus;
pub mod embed;
pub mod ensemble;
pub mod evalmetrics;
pub mod hierarchy;
pub mod nnet;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod taxonomy;
pub mod textprep;
pub mod train;
pub mod tune;

pub use scalar::Scalar;

pub type Network64 = nnet::Network<f64>;
pub type Network32 = nnet::Network<f32>;
pub type Classifier64 = nnet::Classifier<f64>;
pub type Classifier32 = nnet::Classifier<f32>;
pub type ModelBundle64 = pipeline::ModelBundle<f64>;
pub type ModelBundle32 = pipeline::ModelBundle<f32>;
pub type LevelBank64 = hierarchy::LevelBank<f64>;
pub type LcpnRouter64 = hierarchy::LcpnRouter<f64>;
pub type Dataset64 = train::Dataset<f64>;
