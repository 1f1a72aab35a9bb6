//! Deterministic simulator (to be filled in).
