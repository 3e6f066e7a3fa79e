//! Scalar test problem `d = e²m³ + m·exp(−|0.2 − e|) + η`.

/// Noise-free response plus `noise`.
pub fn nonlinear_forward(m: f64, e: f64, noise: f64) -> f64 {
    e * e * m * m * m + m * (-(0.2 - e).abs()).exp() + noise
}
