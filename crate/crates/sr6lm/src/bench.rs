//! Pipeline benchmarks (to be filled in).
