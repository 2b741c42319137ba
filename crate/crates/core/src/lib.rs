//! Relation extraction with a convolutional classifier over word, position
//! and character-level word representations, trained with Nadam and scored
//! with the document-level chemical-induced disease protocol.

pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
