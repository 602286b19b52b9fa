use rand::Rng;
use super::Scalar;

/// Truncated normal draw, resampling anything beyond two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z = standard_normal(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect()
}

/// Box-Muller; the second variate of each pair is discarded so every draw
/// consumes exactly two uniforms.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = truncated_normal(&mut rng, 10_000, 0.02);
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
        // Truncation at 2 sigma shrinks the standard deviation to ~0.88 sigma.
        assert!((var.sqrt() - 0.0176).abs() < 1e-3, "std {}", var.sqrt());
    }
}
