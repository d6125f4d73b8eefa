//! Toy-scale inference stack for an open-weight mixture-of-experts
//! transformer: tensors, MXFP4 codec, attention, MoE, model assembly,
//! checkpoints, the harmony chat format and a decoding engine.

pub mod attention;
pub mod checkpoint;
pub mod engine;
pub mod harmony;
pub mod model;
pub mod moe;
pub mod quant;
pub mod tensor;
pub mod tokenizer;
pub mod tools;
