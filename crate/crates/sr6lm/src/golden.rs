//! Golden vector loader (to be filled in).
