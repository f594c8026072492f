//! Holds only the `acceptance` test target. It lives in its own package so
//! that `cargo test --workspace` runs it after every other suite.
