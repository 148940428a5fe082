//! Property tests for the numeric invariants.

use proptest::prelude::*;
use webhc_core::nn::{gated_attention, AttentionParams, GateParams};
use webhc_core::rng::Rng;
use webhc_core::tape::Tape;
use webhc_core::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to 1 within 1e-6 for |x| <= 1e4.
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in 0u64..1_000_000,
        scale in 0.0f64..1e4,
    ) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * scale)
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax_lastdim(x).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let sum: f64 = out.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row {r} sums to {sum}");
        }
        prop_assert!(out.all_finite());
    }

    /// Concat then narrow along the same axis is the identity.
    #[test]
    fn concat_then_split_is_identity(
        axis in 0usize..2,
        a_len in 1usize..5,
        b_len in 1usize..5,
        other in 1usize..5,
        seed in 0u64..1_000_000,
    ) {
        let mut rng = Rng::new(seed);
        let shape_of = |n: usize| if axis == 0 { [n, other] } else { [other, n] };
        let a = Tensor::<f64>::randn(&shape_of(a_len), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&shape_of(b_len), 1.0, &mut rng);
        let mut tape = Tape::new();
        let an = tape.leaf(a.clone());
        let bn = tape.leaf(b.clone());
        let c = tape.concat(&[an, bn], axis).unwrap();
        let a_back = tape.narrow(c, axis, 0, a_len).unwrap();
        let b_back = tape.narrow(c, axis, a_len, b_len).unwrap();
        prop_assert!(tape.value(a_back).exact_eq(&a));
        prop_assert!(tape.value(b_back).exact_eq(&b));
    }

    /// Zero-gate identity across random shapes, params, and inputs.
    #[test]
    fn zero_gate_identity(
        rows in 1usize..6,
        hist_rows in 1usize..7,
        heads in 1usize..3,
        seed in 0u64..1_000_000,
    ) {
        let d = heads * 4;
        let mut rng = Rng::new(seed);
        let p = AttentionParams::<f64>::init(d, heads, &mut rng);
        let gate = GateParams::<f64>::init(heads);
        let x = Tensor::randn(&[rows, d], 1.0, &mut rng);
        let hist = Tensor::randn(&[hist_rows, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let an = p.register(&mut tape, "attn").unwrap();
        let gn = gate.register(&mut tape, "gate").unwrap();
        let xn = tape.leaf(x.clone());
        let hn = tape.leaf(hist);
        let out = gated_attention(&mut tape, xn, hn, &an, &gn).unwrap();
        prop_assert!(tape.value(out).exact_eq(&x));
    }
}
