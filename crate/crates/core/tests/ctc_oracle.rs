use proptest::prelude::*;
use unitforge::ctc::*;
use unitforge::tensor::{finite_difference_check, log_sum_exp, Tensor};

fn normalize(t: usize, v: usize, logits: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for r in 0..t {
        let row = &logits[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

/// Random row-normalized `[T, V]` log-probabilities plus a target that may or may not be feasible.
fn instance(max_t: usize, max_v: usize, max_y: usize) -> impl Strategy<Value = (Tensor, Vec<u32>)> {
    (1..=max_t, 2..=max_v).prop_flat_map(move |(t, v)| {
        (
            prop::collection::vec(-3.0f64..3.0, t * v),
            prop::collection::vec(1..v as u32, 0..=max_y),
        )
            .prop_map(move |(logits, y)| (normalize(t, v, &logits), y))
    })
}

/// Every alignment of length `t` over `v` symbols.
fn all_alignments(t: usize, v: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..v as u32).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn loss_matches_brute_force((lp, y) in instance(6, 4, 3)) {
        let y = UnitSequence::new(y).unwrap();
        let (t, _) = (lp.shape()[0], lp.shape()[1]);
        match ctc_nll(&lp, &y) {
            Ok(loss) => {
                let bf = ctc_brute_force(&lp, &y).unwrap();
                prop_assert!((loss - bf).abs() < 1e-8, "lattice {loss} vs oracle {bf}");
            }
            Err(unitforge::Error::InfeasibleAlignment { required, available }) => {
                prop_assert!(y.min_frames() > t);
                prop_assert_eq!(required, y.min_frames());
                prop_assert_eq!(available, t);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn forward_backward_agree_at_every_slice((lp, y) in instance(7, 4, 3)) {
        let y = UnitSequence::new(y).unwrap();
        prop_assume!(y.min_frames() <= lp.shape()[0]);
        let lat = AlignmentLattice::compute(&lp, &y).unwrap();
        let s = lat.extended_target().len();
        let t = lat.frames();
        let end = log_sum_exp(&[lat.alpha(t - 1, s - 1), if s > 1 { lat.alpha(t - 1, s - 2) } else { f64::NEG_INFINITY }]);
        let start = log_sum_exp(&[lat.beta(0, 0), if s > 1 { lat.beta(0, 1) } else { f64::NEG_INFINITY }]);
        prop_assert!((end - start).abs() < 1e-8);
        for k in 0..t {
            prop_assert!((lat.slice_mass(k) - lat.log_likelihood()).abs() < 1e-8);
        }
    }

    #[test]
    fn feasible_targets_partition_unit_mass((lp, _) in instance(4, 3, 0)) {
        let total = partition_sum(&lp).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-6, "partition {total}");
    }

    #[test]
    fn greedy_alignment_is_the_exhaustive_argmax((lp, _) in instance(5, 4, 0)) {
        let (t, v) = (lp.shape()[0], lp.shape()[1]);
        let (y, best) = greedy_decode(&lp);
        let got = alignment_log_prob(&lp, &best);
        let max = all_alignments(t, v)
            .iter()
            .map(|a| alignment_log_prob(&lp, a))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((got - max).abs() < 1e-12);
        prop_assert!(!y.as_slice().contains(&BLANK));
        prop_assert!(y.len() <= t);
        prop_assert_eq!(collapse(&best), y);
    }

    #[test]
    fn exhaustive_beam_finds_the_marginal_argmax((lp, _) in instance(5, 3, 0)) {
        let (t, v) = (lp.shape()[0], lp.shape()[1]);
        let width = v.pow(t as u32);
        let decoded = prefix_beam_decode(&lp, width).unwrap();
        let mut best = (f64::NEG_INFINITY, UnitSequence::empty());
        for y in feasible_targets(t, v).unwrap() {
            let p = -ctc_brute_force(&lp, &y).unwrap();
            if p > best.0 {
                best = (p, y);
            }
        }
        let got = -ctc_nll(&lp, &decoded).unwrap();
        prop_assert!((got - best.0).abs() < 1e-9, "beam {decoded:?} {got} vs {:?} {}", best.1, best.0);
    }

    #[test]
    fn wider_beam_never_does_worse((lp, _) in instance(8, 4, 0)) {
        let narrow = prefix_beam_decode(&lp, 2).unwrap();
        let wide = prefix_beam_decode(&lp, 8).unwrap();
        let pn = -ctc_nll(&lp, &narrow).unwrap();
        let pw = -ctc_nll(&lp, &wide).unwrap();
        prop_assert!(pw >= pn - 1e-12, "beam 8 {pw} < beam 2 {pn}");
    }

    #[test]
    fn collapse_output_never_contains_blank(a in prop::collection::vec(0u32..4, 0..12)) {
        let y = collapse(&a);
        prop_assert!(!y.as_slice().contains(&BLANK));
        prop_assert!(y.len() <= a.len());
        prop_assert!(y.min_frames() <= a.len());
    }
}

#[test]
fn partition_for_two_uniform_frames() {
    let lp = Tensor::filled(&[2, 2], -(2f64).ln());
    let p_empty = (-ctc_brute_force(&lp, &UnitSequence::empty()).unwrap()).exp();
    let p_a = (-ctc_brute_force(&lp, &UnitSequence::new(vec![1]).unwrap()).unwrap()).exp();
    assert!((p_empty - 0.25).abs() < 1e-12);
    assert!((p_a - 0.75).abs() < 1e-12);
    assert!((partition_sum(&lp).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn brute_force_refuses_large_instances() {
    let lp = Tensor::filled(&[11, 4], -(4f64).ln());
    assert!(matches!(
        ctc_brute_force(&lp, &UnitSequence::empty()),
        Err(unitforge::Error::OracleSize(_))
    ));
}

#[test]
fn gradient_through_log_softmax_on_random_instances() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (t, v) = (rng.random_range(3..7), rng.random_range(2..5));
        let x = Tensor::new(vec![t, v], (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y: Vec<u32> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..v as u32)).collect();
        let y = UnitSequence::new(y).unwrap();
        if y.min_frames() > t {
            continue;
        }
        let err = finite_difference_check(
            |tape, var| {
                let lp = tape.log_softmax_last_dim(var)?;
                ctc_loss(tape, lp, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
