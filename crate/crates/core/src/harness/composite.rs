//! Front-to-back alpha compositing of depth-sorted samples.

/// `C = Σ_i c_i·α_i·Π_{j<i}(1 − α_j)` over a front-to-back list.
///
/// ```
/// use motion_nodes::harness::composite_alpha;
///
/// let c = composite_alpha(&[([1.0, 0.0, 0.0], 0.5), ([0.0, 0.0, 1.0], 1.0)]);
/// assert_eq!(c, [0.5, 0.0, 0.5]);
/// assert_eq!(composite_alpha(&[]), [0.0; 3]);
/// ```
pub fn composite_alpha(ordered: &[([f64; 3], f64)]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    for (color, alpha) in ordered {
        for ch in 0..3 {
            out[ch] += color[ch] * alpha * transmittance;
        }
        transmittance *= 1.0 - alpha;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn opaque_front_dominates() {
        let c = [0.3, 0.6, 0.9];
        let out = composite_alpha(&[(c, 1.0 - 1e-9), ([1.0, 1.0, 1.0], 0.9)]);
        for ch in 0..3 {
            assert!((out[ch] - c[ch]).abs() < 1e-8);
        }
    }

    #[test]
    fn transparent_front_passes_back() {
        let out = composite_alpha(&[([1.0, 1.0, 1.0], 0.0), ([0.2, 0.4, 0.6], 0.5)]);
        assert_eq!(out, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn zero_alpha_tail_is_ignored_and_range_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let mut list: Vec<([f64; 3], f64)> = (0..n)
                .map(|_| ([rng.random(), rng.random(), rng.random()], rng.random_range(0.0..1.0)))
                .collect();
            let out = composite_alpha(&list);
            assert!(out.iter().all(|c| (0.0..=1.0).contains(c)));
            list.push(([1.0, 1.0, 1.0], 0.0));
            assert_eq!(composite_alpha(&list), out);
        }
    }
}
