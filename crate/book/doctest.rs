// mdbook cannot compile listings against a local crate, so every chapter is
// pulled in as a module doc and `cargo test --doc` runs the listings instead.
// One module per chapter keeps failures traceable to their file.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/model.md")]
pub mod model {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/negatives.md")]
pub mod negatives {}
#[doc = include_str!("src/annotation.md")]
pub mod annotation {}
#[doc = include_str!("src/events.md")]
pub mod events {}
#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("src/reference.md")]
pub mod reference {}
