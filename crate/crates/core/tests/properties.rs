use proptest::collection::vec;
use proptest::prelude::*;

use clausenet::config::clause_len;
use clausenet::crossmodal::{build_adjacency, normalize};
use clausenet::data::{generate_synthetic, parse_jsonl, to_jsonl, window_edges};
use clausenet::logic::{label_probabilities, nll, t_and, t_and_all, t_or, t_or_all};
use clausenet::objects::{top_k, MetaPredicate};
use clausenet::{sparsemax, Graph, SyntheticSpec, Tensor};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    vec(-5.0..5.0f64, 1..30)
}

proptest! {
    #[test]
    fn sparsemax_lies_on_simplex(z in logits()) {
        let p = sparsemax(&z).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparsemax_shift_invariant(z in logits(), c in -10.0..10.0f64) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        for (a, b) in sparsemax(&z).unwrap().iter().zip(sparsemax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sparsemax_permutation_equivariant(z in logits(), seed in any::<u64>()) {
        let n = z.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let p = sparsemax(&z).unwrap();
        let q = sparsemax(&permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((q[j] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsemax_preserves_order(z in logits()) {
        let p = sparsemax(&z).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] >= z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn sparsemax_rows_match_vector_form(rows in 1usize..5, z in vec(-3.0..3.0f64, 24)) {
        let cols = 24 / rows.max(1);
        let data = z[..rows * cols].to_vec();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(rows, cols, data.clone()).unwrap());
        let y = g.sparsemax_rows(x).unwrap();
        for r in 0..rows {
            let want = sparsemax(&data[r * cols..(r + 1) * cols]).unwrap();
            prop_assert_eq!(g.value(y).row_slice(r), &want[..]);
        }
    }

    #[test]
    fn tnorms_stay_in_unit_interval(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let x = t_and(a, b).unwrap();
        let y = t_or(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= a.min(b) && y >= a.max(b));
    }

    #[test]
    fn tnorm_folds_respect_bounds(values in vec(0.0..=1.0f64, 0..12)) {
        let all = t_and_all(&values).unwrap();
        let any = t_or_all(&values).unwrap();
        let min = values.iter().copied().fold(1.0, f64::min);
        let max = values.iter().copied().fold(0.0, f64::max);
        prop_assert!(all <= min + 1e-15);
        prop_assert!(any >= max - 1e-15);
    }

    #[test]
    fn tnorms_reject_out_of_range(a in 1.0001..5.0f64) {
        prop_assert!(t_and(a, 0.5).is_err());
        prop_assert!(t_or(0.5, -a).is_err());
    }

    #[test]
    fn label_probabilities_normalize(truths in vec(0.0..=1.0f64, 2..6), gold in 0usize..2) {
        let p = label_probabilities(&truths);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(nll(&truths, gold) >= -1e-12);
    }

    #[test]
    fn top_k_picks_largest(scores in vec(-10.0..10.0f64, 1..20), k in 1usize..8) {
        let picked = top_k(&scores, k);
        prop_assert_eq!(picked.len(), k);
        let kept = k.min(scores.len());
        let worst_kept = picked[..kept].iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (i, &s) in scores.iter().enumerate() {
            if !picked[..kept].contains(&i) {
                prop_assert!(s <= worst_kept);
            }
        }
        let best = picked[0];
        prop_assert!(picked[kept..].iter().all(|&i| i == best));
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops(m in 1usize..8, z in 1usize..5, w in 0usize..3) {
        let a = build_adjacency(&window_edges(m, w), m, z).unwrap();
        let n = m + z * z;
        for i in 0..n {
            prop_assert_eq!(a.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        for t in 0..m {
            for p in m..n {
                prop_assert_eq!(a.get(t, p), 1.0);
            }
        }
        let norm = normalize(&a).unwrap();
        for i in 0..n {
            for j in 0..n {
                let di: f64 = a.row_slice(i).iter().sum();
                let dj: f64 = a.row_slice(j).iter().sum();
                prop_assert!((norm.get(i, j) - a.get(i, j) / (di * dj).sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn candidate_lists_match_counts(m in 0usize..7, r in 0usize..7) {
        for kind in MetaPredicate::ALL {
            let c = kind.candidates(m, r);
            prop_assert_eq!(c.len(), kind.candidate_count(m, r));
            for constant in &c {
                let t = constant.tokens();
                let v = constant.patches();
                prop_assert!(t.iter().all(|&i| i < m) && v.iter().all(|&j| j < r));
                if t.len() == 2 {
                    prop_assert_ne!(t[0], t[1]);
                }
                if v.len() == 2 {
                    prop_assert_ne!(v[0], v[1]);
                }
            }
        }
    }

    #[test]
    fn clause_length_is_monotone_in_beta(k in 1usize..12, a in 0.01..1.0f64, b in 0.01..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(clause_len(k, lo) <= clause_len(k, hi));
        prop_assert!(clause_len(k, hi) <= 5 * k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jsonl_round_trip(seed in any::<u64>(), n in 1usize..6) {
        let spec = SyntheticSpec { seed, ..Default::default() };
        let samples = generate_synthetic(&spec, n).unwrap();
        let text = to_jsonl(&samples).unwrap();
        let back = parse_jsonl(&text, &spec.meta(), "mem").unwrap();
        prop_assert_eq!(back, samples);
    }

    #[test]
    fn synthetic_generation_is_pure(seed in any::<u64>()) {
        let spec = SyntheticSpec { seed, ..Default::default() };
        prop_assert_eq!(generate_synthetic(&spec, 4).unwrap(), generate_synthetic(&spec, 4).unwrap());
    }
}
