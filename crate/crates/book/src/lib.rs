//! The guide's chapters, compiled so that every listing runs as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod chapter1 {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod chapter2 {}
#[doc = include_str!("../../../book/src/estimatability.md")]
pub mod chapter3 {}
#[doc = include_str!("../../../book/src/consensus.md")]
pub mod chapter4 {}
#[doc = include_str!("../../../book/src/qp-as.md")]
pub mod chapter5 {}
#[doc = include_str!("../../../book/src/dqp-svas.md")]
pub mod chapter6 {}
#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod chapter7 {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod chapter8 {}
#[doc = include_str!("../../../book/src/multiple-imputation.md")]
pub mod chapter9 {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod chapter10 {}
