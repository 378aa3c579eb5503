//! Distant-supervision pretraining on emoji-labelled short texts, transfer
//! to small target tasks, and the analyses that go with it.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod train;
pub mod transfer;
