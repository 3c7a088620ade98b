//! Doc-test harness for the guide.
//!
//! Each chapter of `book/src` is included as the docs of one module, so
//! `cargo test --doc -p tada-book` runs every listing in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/alignment.md")]
pub mod alignment {}
#[doc = include_str!("../../../book/src/masks.md")]
pub mod masks {}
#[doc = include_str!("../../../book/src/codec.md")]
pub mod codec {}
#[doc = include_str!("../../../book/src/durations.md")]
pub mod durations {}
#[doc = include_str!("../../../book/src/flow.md")]
pub mod flow {}
#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
