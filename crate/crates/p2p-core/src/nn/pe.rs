//! Fixed 2D sine/cosine positional encodings for flattened feature grids.

use ndarray::Array2;

/// Encodings for an `s` x `s` grid flattened row-major, one row per cell,
/// `c` features per row. The first half of the features encodes y, the
/// second half x, with interleaved sin/cos at geometrically spaced
/// frequencies (temperature 10000).
pub fn sine_grid(s: usize, c: usize) -> Array2<f64> {
    assert!(c % 4 == 0, "encoding width must be divisible by 4");
    let half = c / 2;
    let quarter = half / 2;
    let temperature: f64 = 10000.0;
    let scale = std::f64::consts::TAU;
    let mut out = Array2::<f64>::zeros((s * s, c));
    for y in 0..s {
        for x in 0..s {
            let row = y * s + x;
            // Normalized positions in (0, 1], as in common detection codebases.
            let ny = (y as f64 + 1.0) / s as f64 * scale;
            let nx = (x as f64 + 1.0) / s as f64 * scale;
            for i in 0..quarter {
                let div = temperature.powf(2.0 * i as f64 / half as f64);
                out[[row, 2 * i]] = (ny / div).sin();
                out[[row, 2 * i + 1]] = (ny / div).cos();
                out[[row, half + 2 * i]] = (nx / div).sin();
                out[[row, half + 2 * i + 1]] = (nx / div).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let a = sine_grid(4, 8);
        let b = sine_grid(4, 8);
        assert_eq!(a.dim(), (16, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn rows_distinguish_positions() {
        let a = sine_grid(8, 16);
        let r0 = a.row(0);
        let r1 = a.row(1);
        let diff: f64 = r0.iter().zip(r1).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3);
    }
}
