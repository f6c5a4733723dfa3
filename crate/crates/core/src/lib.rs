//! Knowledge-graph augmented multi-hop reading for drug–drug interaction
//! prediction.
//!
//! The pipeline has two halves. The knowledge side ([`kb`], [`kg_embed`])
//! loads drug–protein action triplets and protein pathway pairs and learns
//! translational entity embeddings. The reading side ([`corpus`], [`graph`],
//! [`reader`], [`gat`]) turns a question, its support documents and
//! candidate drugs into a typed reasoning graph, builds question-aware node
//! representations fused with the knowledge embeddings, and scores the
//! candidates with a gated multi-relation graph attention stack.
//! [`trainer`] ties the two halves together for training, evaluation,
//! cross-validation, sweeps and ablations.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod gat;
pub mod graph;
pub mod kb;
pub mod kg_embed;
pub mod model;
pub mod nn;
pub mod reader;
pub mod trainer;

pub use error::{Error, Result};
