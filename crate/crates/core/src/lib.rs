//! Conversational recommendation that links behaviour sequences and
//! natural-language descriptions through a discrete set of latent intents.

pub mod corpus;
pub mod nn;
pub mod remote;
pub mod text_embed;
pub mod encoder;
pub mod intents;
pub mod checkpoint;
pub mod model;
pub mod trainer;
pub mod conversation;
pub mod eval;
pub mod pipeline;
