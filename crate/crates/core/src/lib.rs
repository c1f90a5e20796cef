//! Deep gamma-hierarchy topic modeling with hybrid stochastic-gradient MCMC
//! and autoencoding variational inference.
//!
//! The decoder is a stack of gamma-distributed topic-weight layers emitting
//! word counts through a Poisson likelihood. Global topic matrices are
//! sampled by a Fisher-preconditioned stochastic-gradient MCMC with per-topic,
//! per-layer adaptive step sizes; per-document latents come from a Weibull
//! upward-downward variational encoder trained jointly with the sampler. A
//! small batch Gibbs chain serves as a correctness oracle, and a supervised
//! head turns the multi-layer latents into a Bayesian softmax classifier.
//!
//! The numeric core is generic over the scalar type via [`real::Real`]
//! (f32 and f64 both implement it); the aliases below pin the f64
//! instantiations that the CLI and the evaluation protocol use.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod dist;
pub mod encoder;
pub mod eval;
pub mod gibbs;
pub mod opt;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod supervised;
pub mod trainer;

pub use config::TrainConfig;
pub use real::Real;
pub use rng::RngStream;

pub type GlobalParams = decoder::GlobalParams<f64>;
pub type EncoderParams = encoder::EncoderParams<f64>;
pub type SamplerState = sampler::SamplerState<f64>;
pub type Trainer = trainer::Trainer<f64>;
pub type PosteriorCollection = trainer::PosteriorCollection<f64>;
pub type GibbsState = gibbs::GibbsState<f64>;
pub type ClassifierParams = supervised::ClassifierParams<f64>;
pub type SupervisedModel = supervised::SupervisedModel<f64>;
