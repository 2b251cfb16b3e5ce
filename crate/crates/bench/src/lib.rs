//! Criterion benches for the query index and the metrics; see `benches/`.
