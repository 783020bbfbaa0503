//! Hand-rolled neural-net substrate: GEMM-lowered conv kernels and a small
//! reverse-mode tape. Forward-only evaluation (scoring) calls the kernels in
//! `ops` directly; training records the same kernels on the tape.

pub mod ops;
pub mod tape;

pub use tape::{Gradients, Tape, VarId};
