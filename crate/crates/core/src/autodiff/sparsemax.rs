//! Euclidean projection onto the probability simplex.

use crate::error::{Error, Result};

/// Projects `z` onto `{p : p >= 0, sum(p) = 1}`.
///
/// Sorts descending, takes the largest support size `K` with
/// `1 + K * z_(K) > sum_{j <= K} z_(j)`, sets `tau = (sum_{j <= K} z_(j) - 1) / K`
/// and returns `max(z - tau, 0)`.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty { op: "sparsemax" });
    }
    let mut out = vec![0.0; z.len()];
    sparsemax_into(z, &mut out);
    Ok(out)
}

pub(crate) fn sparsemax_into(z: &[f64], out: &mut [f64]) {
    let (tau, support) = threshold(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - tau).max(0.0);
    }
    if support == 1 {
        // a single winner gets exactly 1 regardless of rounding in tau
        for o in out.iter_mut() {
            if *o > 0.0 {
                *o = 1.0;
            }
        }
    }
}

fn threshold(z: &[f64]) -> (f64, usize) {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut support = 1;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    ((support_sum - 1.0) / support as f64, support)
}

/// Vector-Jacobian product of sparsemax given its output.
///
/// Entries with output exactly zero are treated as off-support.
pub(crate) fn sparsemax_backward_into(output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&p, &g) in output.iter().zip(grad_out) {
        if p > 0.0 {
            sum += g;
            count += 1;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    for ((gi, &p), &g) in grad_in.iter_mut().zip(output).zip(grad_out) {
        if p > 0.0 {
            *gi += g - mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_splits_evenly() {
        assert_eq!(sparsemax(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn constant_vector_is_uniform() {
        for c in [-3.0, 0.0, 2.5, 1e3] {
            assert_eq!(sparsemax(&[c; 4]).unwrap(), vec![0.25; 4]);
        }
    }

    #[test]
    fn dominant_entry_takes_everything() {
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(sparsemax(&[]), Err(Error::Empty { .. })));
    }

    #[test]
    fn single_entry_is_one() {
        assert_eq!(sparsemax(&[-7.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_is_centered_on_support() {
        let p = [0.7, 0.3, 0.0];
        let mut g = [0.0; 3];
        sparsemax_backward_into(&p, &[1.0, 3.0, 5.0], &mut g);
        assert_eq!(g, [-1.0, 1.0, 0.0]);
    }
}
