//! Compiles and runs the listings of the guide in `book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod chapter0 {}

#[doc = include_str!("../../../book/src/drivers.md")]
pub mod chapter1 {}

#[doc = include_str!("../../../book/src/solving.md")]
pub mod chapter2 {}

#[doc = include_str!("../../../book/src/wasserstein.md")]
pub mod chapter3 {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod chapter4 {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod chapter5 {}
