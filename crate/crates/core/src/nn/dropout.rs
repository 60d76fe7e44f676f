use ndarray::Array2;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) keyed by a counter tuple.
#[inline]
pub(crate) fn uniform(seed: u64, step: u64, layer: usize, row: usize, unit: usize) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ step);
    h = splitmix64(h ^ layer as u64);
    h = splitmix64(h ^ row as u64);
    h = splitmix64(h ^ unit as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - p)`.
pub(crate) fn mask(seed: u64, step: u64, layer: usize, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        if uniform(seed, step, layer, r, c) >= p {
            keep_scale
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_fraction_matches_probability() {
        let m = mask(1, 2, 0, 200, 100, 0.5);
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64;
        assert!((kept - 0.5).abs() < 0.02, "{kept}");
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
