//! End-to-end plumbing: configuration, file formats, synthetic scenes,
//! AP evaluation, the full detection pipeline and the self-test suite.

pub mod config;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod selftest;
pub mod synth;
