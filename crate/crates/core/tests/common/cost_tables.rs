//! Published per-sample costs used as fixed reference values.

/// Rounds to `digits` decimals as an integer count of the last digit.
pub fn at_precision(v: f64, digits: i32) -> i64 {
    (v * 10f64.powi(digits)).round() as i64
}

/// MoCo costs of query/key lengths with dual token dropout on 224px images.
pub const DUAL_DROPOUT: [(usize, usize, f64); 9] = [
    (20, 20, 0.4),
    (20, 40, 0.5),
    (20, 197, 1.3),
    (50, 50, 1.0),
    (50, 100, 1.3),
    (50, 197, 1.8),
    (100, 100, 2.0),
    (100, 197, 2.5),
    (197, 197, 4.0),
];

/// Symmetric patch scaling on 240px crops: patch, grid tokens, cost.
pub const SYMMETRIC_PATCH: [(usize, usize, f64); 5] = [(16, 225, 4.59), (20, 144, 2.94), (24, 100, 2.04), (30, 64, 1.31), (40, 36, 0.73)];

/// Asymmetric patch scaling on 240px crops: query patch, key patch, cost.
pub const ASYMMETRIC_PATCH: [(usize, usize, f64); 4] = [(30, 16, 2.1), (30, 20, 1.7), (30, 24, 1.5), (30, 30, 1.3)];
