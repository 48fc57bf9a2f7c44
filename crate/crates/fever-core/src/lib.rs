//! End-to-end claim verification over FEVER-format corpora: document
//! retrieval from a local title index, trainable sentence retrieval with
//! pointwise and pairwise ranking losses plus hard negative mining, a
//! three-class claim verifier, and the strict evidence-aware scorer.

pub mod corpus;
pub mod docretrieval;
pub mod encoder;
pub mod metrics;
pub mod sentretrieval;
pub mod synthetic;
pub mod tokenizer;
pub mod verification;

pub use corpus::{Candidate, Claim, ClaimLabel, Corpus, WikiPage};
pub use encoder::{EncoderConfig, ModelParams};
pub use tokenizer::{EncodedPair, Vocabulary};
