use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numkernel::{check_gradient, matmul, GradCheckConfig};

fn small_config(top_k: usize) -> LMoEConfig {
    LMoEConfig {
        num_experts: 4,
        top_k,
        query_dim: 6,
        lang_dim: 5,
        routed_hidden: 7,
        shared_hidden: 9,
        router_init: 0.5,
        ..LMoEConfig::default()
    }
}

fn build(cfg: &LMoEConfig, seed: u64) -> (ParamSet, LMoELayer, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let layer = LMoELayer::new(cfg, 5, &mut params, &mut rng, "moe").unwrap();
    let q = Tensor::randn(8, cfg.query_dim, 1.0, &mut rng);
    let lang = crate::numkernel::l2_normalize_rows(&Tensor::randn(5, cfg.lang_dim, 1.0, &mut rng)).values;
    (params, layer, q, lang)
}

fn set(params: &mut ParamSet, id: crate::numkernel::ParamId, f: impl Fn(usize, usize) -> f64) {
    let t = params.value(id);
    let (r, c) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, f(i, j));
        }
    }
    params.set_value(id, out);
}

#[test]
fn config_defaults_and_validation() {
    let c = LMoEConfig::default();
    assert_eq!((c.num_experts, c.top_k), (4, 2));
    assert_eq!((c.shared_hidden, c.routed_hidden), (1024, 512));
    assert!(c.validate().is_ok());
    assert!(LMoEConfig { top_k: 5, ..c.clone() }.validate().is_err());
    assert!(LMoEConfig { top_k: 0, ..c.clone() }.validate().is_err());
    assert!(LMoEConfig { router: "nope".into(), ..c.clone() }.validate().is_err());
    assert!(LMoEConfig { lang_dim: 0, ..c }.validate().is_err());
}

#[test]
fn projection_cases() {
    let cfg = LMoEConfig {
        lang_dim: 6,
        ..small_config(2)
    };
    let (mut params, layer, q, _) = build(&cfg, 1);
    set(&mut params, layer.projection.weight, |i, j| f64::from(u8::from(i == j)));
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let p = layer.project_queries(&mut tape, &params, qv).unwrap();
    assert_eq!(tape.value(p), &q);

    set(&mut params, layer.projection.weight, |_, _| 0.0);
    set(&mut params, layer.projection.bias, |_, j| j as f64 - 2.0);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let p = layer.project_queries(&mut tape, &params, qv).unwrap();
    for r in 0..8 {
        assert_eq!(tape.value(p).row(r), &[-2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
    }

    let (params, layer, q, _) = build(&small_config(2), 2);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let p = layer.project_queries(&mut tape, &params, qv).unwrap();
    let oracle = matmul(&q, params.value(layer.projection.weight)).unwrap();
    for (a, b) in tape.value(p).data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros(2, 3));
    assert!(layer.project_queries(&mut tape, &params, bad).is_err());
}

#[test]
fn route_cases() {
    let (mut params, layer, _, _) = build(&small_config(2), 3);
    set(&mut params, layer.router.weight, |_, _| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = Tensor::uniform(6, 5, 1.0, &mut rng);
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let (_, d) = layer.route(&mut tape, &params, sv).unwrap();
    for r in 0..6 {
        assert!(d.weights.row(r).iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert_eq!(d.indices[r], vec![0, 1]);
    }

    set(&mut params, layer.router.bias, |_, j| if j == 2 { 60.0 } else { 0.0 });
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let (_, d) = layer.route(&mut tape, &params, sv).unwrap();
    assert!(d.selected.iter().all(|sel| (sel[0] - 1.0).abs() < 1e-12));
    assert!(d.indices.iter().all(|sel| sel[0] == 2));

    let (params, layer, _, _) = build(&small_config(2), 4);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::uniform(10, 5, 1.0, &mut rng);
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let (_, d) = layer.route(&mut tape, &params, sv).unwrap();
        for r in 0..10 {
            let row = d.weights.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w > 0.0));
            for (&i, &w) in d.indices[r].iter().zip(&d.selected[r]) {
                assert_eq!(w, row[i]);
            }
            assert!(d.selected[r][0] >= d.selected[r][1]);
        }
    }

    let mut tape = Tape::new();
    let wrong = tape.constant(Tensor::zeros(3, 7));
    assert!(layer.route(&mut tape, &params, wrong).is_err());
}

fn forward_value(params: &ParamSet, layer: &LMoELayer, q: &Tensor, lang: &Tensor) -> (Tensor, RoutingDecision) {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let lv = tape.constant(lang.clone());
    let out = layer.forward(&mut tape, params, qv, lv).unwrap();
    (tape.value(out.output).clone(), out.decision)
}

#[test]
fn shared_only_degeneracy() {
    let (mut params, layer, q, lang) = build(&small_config(2), 5);
    for e in &layer.experts {
        e.zero(&mut params);
    }
    let (out, _) = forward_value(&params, &layer, &q, &lang);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let s = layer.shared.forward(&mut tape, &params, qv).unwrap();
    assert_eq!(&out, tape.value(s));
}

#[test]
fn dense_limit_matches_weighted_mixture() {
    let cfg = small_config(4);
    let (params, layer, q, lang) = build(&cfg, 6);
    let (out, d) = forward_value(&params, &layer, &q, &lang);
    let eval = |ff: &crate::nn::FeedForward| {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let y = ff.forward(&mut tape, &params, qv).unwrap();
        tape.value(y).clone()
    };
    let shared = eval(&layer.shared);
    let experts: Vec<Tensor> = layer.experts.iter().map(eval).collect();
    for r in 0..q.rows() {
        for c in 0..q.cols() {
            let mut want = shared.get(r, c);
            for (i, e) in experts.iter().enumerate() {
                want += d.weights.get(r, i) * e.get(r, c);
            }
            assert!((out.get(r, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn sparse_forward_matches_masked_dense_oracle() {
    for renormalize in [false, true] {
        let cfg = LMoEConfig {
            renormalize,
            ..small_config(2)
        };
        let (params, layer, q, lang) = build(&cfg, 7);
        let (out, d) = forward_value(&params, &layer, &q, &lang);
        let eval = |ff: &crate::nn::FeedForward| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let y = ff.forward(&mut tape, &params, qv).unwrap();
            tape.value(y).clone()
        };
        let shared = eval(&layer.shared);
        let experts: Vec<Tensor> = layer.experts.iter().map(eval).collect();
        for r in 0..q.rows() {
            let total: f64 = d.selected[r].iter().sum();
            for c in 0..q.cols() {
                let mut want = shared.get(r, c);
                for (&i, &w) in d.indices[r].iter().zip(&d.selected[r]) {
                    let w = if renormalize { w / total } else { w };
                    want += w * experts[i].get(r, c);
                }
                assert!((out.get(r, c) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_gradient_matches_finite_differences() {
    for seed in 0..3 {
        for router in [LANGUAGE_GUIDED, FEATURE_ROUTED] {
            let cfg = LMoEConfig {
                router: router.into(),
                ..small_config(2)
            };
            let (mut params, layer, q, lang) = build(&cfg, 10 + seed);
            let report = check_gradient(
                &mut params,
                |tape, ps| {
                    let qv = tape.constant(q.clone());
                    let lv = tape.constant(lang.clone());
                    let out = layer.forward(tape, ps, qv, lv)?;
                    Ok(tape.mean(out.output))
                },
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "{router} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn scale_invariance_of_language_routing() {
    let (params, layer, q, lang) = build(&small_config(2), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let decide = |scales: Option<&[f64]>| {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let lv = tape.constant(lang.clone());
        let p = layer.project_queries(&mut tape, &params, qv).unwrap();
        let p = match scales {
            Some(s) => {
                let col = tape.constant(Tensor::matrix(s.len(), 1, s.to_vec()).unwrap());
                tape.mul_col(p, col).unwrap()
            }
            None => p,
        };
        let s = layer.strategy().router_input(&mut tape, qv, p, lv).unwrap();
        let sv = tape.value(s).clone();
        let (_, d) = layer.route(&mut tape, &params, s).unwrap();
        (sv, d)
    };
    let (s0, d0) = decide(None);
    let scales: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, 0.01..50.0)).collect();
    let (s1, d1) = decide(Some(&scales));
    for (a, b) in s0.data().iter().zip(s1.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(d0.indices, d1.indices);
    for (a, b) in d0.weights.data().iter().zip(d1.weights.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn decision_from_rows(rows: Vec<Vec<f64>>, top_k: usize) -> RoutingDecision {
    RoutingDecision::from_weights(Tensor::from_rows(&rows).unwrap(), top_k).unwrap()
}

#[test]
fn balance_analytic_values() {
    // uniform weights with round-robin selections: M·Σ (top_k/M)(1/M) = top_k
    for top_k in 1..=4 {
        let m = 4;
        let b = 8;
        let indices: Vec<Vec<usize>> = (0..b).map(|q| (0..top_k).map(|j| (q + j) % m).collect()).collect();
        let d = RoutingDecision {
            weights: Tensor::full(b, m, 0.25),
            selected: vec![vec![0.25; top_k]; b],
            indices,
        };
        assert!((d.balance_value().unwrap() - top_k as f64).abs() < 1e-9);
        let tie_broken = decision_from_rows(vec![vec![0.25; 4]; 8], top_k);
        assert!((tie_broken.balance_value().unwrap() - top_k as f64).abs() < 1e-9);
    }
    let conc = decision_from_rows(vec![vec![1.0 - 3e-12, 1e-12, 1e-12, 1e-12]; 6], 1);
    assert!((conc.balance_value().unwrap() - 4.0).abs() < 1e-9);
    let single = decision_from_rows(vec![vec![0.25; 4]], 1);
    assert!((single.balance_value().unwrap() - 1.0).abs() < 1e-12);

    let empty = RoutingDecision {
        weights: Tensor::zeros(0, 4),
        indices: vec![],
        selected: vec![],
    };
    assert!(empty.balance_value().is_err());
    let mut tape = Tape::new();
    let w = tape.constant(empty.weights.clone());
    assert!(balance_loss(&mut tape, w, &empty).is_err());
}

#[test]
fn balance_tape_matches_value_and_gradient() {
    let cfg = small_config(2);
    for seed in 0..5 {
        let (mut params, layer, q, lang) = build(&cfg, 20 + seed);
        let (_, d) = forward_value(&params, &layer, &q, &lang);
        let mut tape = Tape::new();
        let w = tape.constant(d.weights.clone());
        let l = balance_loss(&mut tape, w, &d).unwrap();
        assert!((tape.value(l).item() - d.balance_value().unwrap()).abs() < 1e-12);

        let report = check_gradient(
            &mut params,
            |tape, ps| {
                let qv = tape.constant(q.clone());
                let lv = tape.constant(lang.clone());
                let out = layer.forward(tape, ps, qv, lv)?;
                let bal = balance_loss(tape, out.weights, &out.decision)?;
                let m = tape.mean(out.output);
                tape.add(m, bal)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn concentration_sequence_is_monotone() {
    // Eight queries start spread round-robin over four experts; one at a time
    // a query moves its mass to expert 0.
    let eps = 1e-3;
    let concentrated = |e: usize| -> Vec<f64> {
        (0..4).map(|i| if i == e { 1.0 - 3.0 * eps } else { eps }).collect()
    };
    let mut rows: Vec<Vec<f64>> = (0..8).map(|q| concentrated(q % 4)).collect();
    let mut last = decision_from_rows(rows.clone(), 1).balance_value().unwrap();
    assert!((last - 1.0).abs() < 1e-2);
    for q in [1, 2, 3, 5, 6, 7] {
        rows[q] = concentrated(0);
        let l = decision_from_rows(rows.clone(), 1).balance_value().unwrap();
        assert!(l >= last - 1e-12, "{l} < {last}");
        last = l;
    }
    assert!(last > 3.9);

    // softening-to-sharpening sequence on a single favored expert
    let mut last = 0.0;
    for t in 0..20 {
        let s = t as f64 * 0.5;
        let logits = vec![vec![s, 0.0, 0.0, 0.0]; 5];
        let w = crate::numkernel::row_softmax(&Tensor::from_rows(&logits).unwrap()).unwrap();
        let l = RoutingDecision::from_weights(w, 1).unwrap().balance_value().unwrap();
        assert!(l >= last);
        last = l;
    }
}

#[test]
fn routing_matrix_cases() {
    let d = RoutingDecision {
        weights: Tensor::full(1, 4, 0.25),
        indices: vec![vec![1, 3]],
        selected: vec![vec![0.25, 0.25]],
    };
    let m = routing_matrix(&d, &[0], 3).unwrap();
    assert_eq!(m.counts[0], vec![0, 1, 0, 1]);
    assert_eq!(m.counts[1], vec![0; 4]);
    assert_eq!(m.purity(0), Some(1.0));
    assert_eq!(m.purity(1), None);
    assert!(routing_matrix(&d, &[0, 1], 3).is_err());

    let (params, layer, q, lang) = build(&small_config(2), 30);
    let (_, d) = forward_value(&params, &layer, &q, &lang);
    let labels = [0, 1, 2, 0, 1, 2, 0, 0];
    let m = routing_matrix(&d, &labels, 3).unwrap();
    for c in 0..3 {
        let n = labels.iter().filter(|&&l| l == c).count();
        assert_eq!(m.counts[c].iter().sum::<usize>(), 2 * n);
        assert_eq!(m.class_queries(c), n);
    }
}
