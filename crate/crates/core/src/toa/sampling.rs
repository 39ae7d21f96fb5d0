use rand::seq::SliceRandom;
use rand::Rng;

/// First-order inclusion probabilities for drawing `m` of `p.len()` items
/// proportionally to `p`: `pi_j = m' * p_j / sum(p over uncapped)`, with
/// items whose value would exceed one fixed at one. Sums to `m`.
pub fn inclusion_probabilities(p: &[f64], m: usize) -> Vec<f64> {
    let n = p.len();
    assert!(m <= n, "cannot include {m} of {n} items");
    let mut pi = vec![0.0; n];
    let mut capped = vec![false; n];
    loop {
        let slots = (m - capped.iter().filter(|&&c| c).count()) as f64;
        let free: Vec<usize> = (0..n).filter(|&j| !capped[j]).collect();
        let mass: f64 = free.iter().map(|&j| p[j]).sum();
        let mut changed = false;
        for &j in &free {
            // Zero-weight leftovers share any remaining slots evenly.
            let v = if mass > 0.0 { slots * p[j] / mass } else { slots / free.len() as f64 };
            if v >= 1.0 {
                capped[j] = true;
                changed = true;
            }
            pi[j] = v.min(1.0);
        }
        if !changed {
            return pi;
        }
    }
}

/// Fixed-size random-order systematic sampling: exactly `m` distinct indices,
/// index `j` included with probability `pi[j]`. Returned sorted.
pub fn systematic_sample<R: Rng>(pi: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    let n = pi.len();
    let mut kept: Vec<usize> = (0..n).filter(|&j| pi[j] >= 1.0).collect();
    let mut rest: Vec<usize> = (0..n).filter(|&j| pi[j] < 1.0 && pi[j] > 0.0).collect();
    let need = m.saturating_sub(kept.len());
    if need > 0 {
        rest.shuffle(rng);
        let total: f64 = rest.iter().map(|&j| pi[j]).sum();
        // Rescale the grid so rounding in `total` cannot drop the last point.
        let step = total / need as f64;
        let u: f64 = rng.random::<f64>();
        let mut cum = 0.0;
        let mut k = 0;
        for &j in &rest {
            cum += pi[j];
            while k < need && (u + k as f64) * step < cum {
                kept.push(j);
                k += 1;
            }
        }
        if k < need {
            // Only reachable through floating-point slack at the very end.
            for &j in rest.iter().rev() {
                if k == need {
                    break;
                }
                if !kept.contains(&j) {
                    kept.push(j);
                    k += 1;
                }
            }
        }
    }
    kept.sort_unstable();
    kept.dedup();
    kept
}
