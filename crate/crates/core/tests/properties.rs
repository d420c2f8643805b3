use mlso_core::config::{parse_pairs, RunConfig};
use mlso_core::objectives::{infer, loss_scalewise, loss_supervised, loss_valsd};
use mlso_core::sop::{cooccurrence, maxexp, maxexp_pm_hard, maxexp_pm_soft, sigme};
use mlso_core::{Tape, Tensor};
use proptest::prelude::*;

fn scores(nq: usize, l: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, nq * l * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        way in 2usize..8,
        shot in 1usize..4,
        levels in 1usize..4,
        scales in 1usize..4,
        lr in 1e-5f64..1e-1,
        pn in prop::sample::select(vec!["none", "maxexp", "maxexp_pm", "sigme"]),
        matching in prop::sample::select(vec!["none", "cm", "gm", "ot", "gr"]),
    ) {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.set("way", &way.to_string()).unwrap();
        cfg.set("shot", &shot.to_string()).unwrap();
        cfg.set("levels", &levels.to_string()).unwrap();
        cfg.set("scales", &scales.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("pn", pn).unwrap();
        cfg.set("matching", matching).unwrap();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(RunConfig::from_pairs(&parse_pairs(&text).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn scalewise_with_one_scale_is_supervised(
        (nq, l, d) in (1usize..4, 2usize..5, 1usize..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..nq * l * d).map(|_| rng.random()).collect();
        let labels: Vec<usize> = (0..l).collect();
        let qc: Vec<usize> = (0..nq).map(|q| q % l).collect();
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![nq, l, d], data.clone()).unwrap(), false);
        let b = t.leaf(Tensor::new(vec![nq, l, d, 1], data).unwrap(), false);
        let la = loss_supervised(&mut t, a, &qc, &labels).unwrap();
        let lb = loss_scalewise(&mut t, b, &qc, &labels, 1).unwrap();
        prop_assert!((t.value(la).item().unwrap() - t.value(lb).item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_level_inference_is_argmax(v in scores(1, 6, 1)) {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] > w[0]));
        let best = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        prop_assert_eq!(infer(&Tensor::new(vec![6, 1], v).unwrap()).unwrap(), best);
    }

    #[test]
    fn uniform_logits_give_log_class_count(b in 1usize..10, c in 2usize..12, shift in -5.0f64..5.0) {
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::full(&[b, c], shift), false);
        let l = loss_valsd(&mut t, logits, &labels).unwrap();
        prop_assert!((t.value(l).item().unwrap() - (c as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn pn_functions_stay_in_range(p in 0.0f64..1.0, eta in 1.0f64..60.0) {
        prop_assert!(cooccurrence(p, eta) <= maxexp(p, eta) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&maxexp(p, eta)));
        let s = sigme(p, eta);
        prop_assert!((0.0..=1.0).contains(&s));
        let hard = maxexp_pm_hard(2.0 * p - 1.0, eta, 0.5);
        prop_assert!((-1.0..=1.0).contains(&hard));
        let soft = maxexp_pm_soft(2.0 * p - 1.0, eta, 0.5, 1600.0);
        prop_assert!((soft - hard).abs() < 0.05);
    }
}
