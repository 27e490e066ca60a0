//! Command-line surface.

pub use crate::expr::parse_expr;

pub fn run<I: IntoIterator<Item = String>>(_argv: I) -> i32 {
    0
}
