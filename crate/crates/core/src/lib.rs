//! Blockwise learnable sparsity allocation for pruning transformer weights,
//! with optional joint weight quantization and a sparse-matmul cycle model.

pub mod cli;
pub mod hwsim;
pub mod importance;
pub mod io;
pub mod model;
pub mod pruner;
pub mod quant;
pub mod sparsity;
pub mod tensor;
