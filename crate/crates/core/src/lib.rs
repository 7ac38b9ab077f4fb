//! Monte-Carlo tree search for sequence decoding, with AlphaZero-style joint
//! training of a policy/value model and policy-gradient baselines.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the trainers and the CLI use.

pub mod batcher;
pub mod bleu;
pub mod corpus;
pub mod mcts;
pub mod model;
pub mod scalar;
pub mod train;

pub use scalar::Real;

pub type BleuScore = bleu::BleuScore<f64>;
pub type Evaluation = model::Evaluation<f64>;
pub type TrainingSample = model::TrainingSample<f64>;
pub type TrainParams = model::TrainParams<f64>;
pub type LossReport = model::LossReport<f64>;
pub type TabularModel = model::TabularModel<f64>;
pub type TabularModelF32 = model::TabularModel<f32>;
pub type AnyModel = model::AnyModel<f64>;
pub type SearchParams = mcts::SearchParams<f64>;
pub type VisitDist = mcts::VisitDist<f64>;
pub type SearchTree = mcts::SearchTree<f64>;
pub type Translation = mcts::Translation<f64>;
