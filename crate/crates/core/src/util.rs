//! Small shared helpers.

/// Row-wise argmax of a (rows, cols) matrix; first index wins ties.
pub fn argmax_rows(values: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Shannon entropy (nats) of each row of a (rows, cols) probability matrix.
pub fn entropy_rows(probs: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            probs[r * cols..(r + 1) * cols]
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum()
        })
        .collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Derive a stream-specific seed from a base seed and a role string.
/// Uses FNV-1a so the mapping is stable across platforms.
pub fn derive_seed(base: u64, role: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in role.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    base.wrapping_mul(0x9e3779b97f4a7c15) ^ h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.1, 0.2, 0.9, 0.9], 2, 3), vec![0, 1]);
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let h = entropy_rows(&[0.25; 4], 1, 4);
        assert!((h[0] - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ_by_role() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
