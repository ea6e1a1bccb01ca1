//! relmark: a desk-scale benchmark for reasoning architectures.

pub mod gemm;
