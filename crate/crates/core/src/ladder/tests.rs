use super::*;
use crate::rng;

fn small_dims() -> LadderDims {
    LadderDims {
        x: 6,
        pa: 2,
        z: vec![2, 3],
        h: 4,
        hidden: 5,
    }
}

fn random_model(variant: Variant, seed: u64, spread: f64) -> LadderModel {
    let mut m = LadderModel::new(variant, small_dims(), seed).unwrap();
    let mut r = rng::stream(seed, 77, 0);
    for v in m.params.values.iter_mut() {
        *v += spread * rng::normal(&mut r);
    }
    m
}

fn batch(seed: u64, n: usize, dims: &LadderDims) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, 78, 0);
    (rng::normals(&mut r, n * dims.x), rng::normals(&mut r, n * dims.pa))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn kl_closed_form() {
    let mut t = Tape::new();
    let d = 5;
    let mq = t.constant(1, d, vec![1.0; d]);
    let zero = t.constant(1, d, vec![0.0; d]);
    let kl = gaussian_kl(&mut t, mq, zero, zero, zero);
    assert!((t.scalar(kl) - 0.5 * d as f64).abs() < 1e-15);
    let same = gaussian_kl(&mut t, mq, mq, mq, mq);
    assert_eq!(t.scalar(same), 0.0);
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for (k, variant) in [Variant::Exogenous, Variant::Mediator].into_iter().enumerate() {
        let m = random_model(variant, 10 + k as u64, 0.3);
        let (x, pa) = batch(3, 3, &m.dims);
        let seeds = [1, 2, 3];
        let (_, g) = m.free_energy_grad(&x, &pa, &seeds).unwrap();
        let f = |m: &LadderModel| m.elbo(&x, &pa, &seeds).unwrap().mean_free_energy();
        let h = 1e-5;
        for j in 0..m.params.len() {
            let mut a = m.clone();
            a.params.values[j] += h;
            let mut b = m.clone();
            b.params.values[j] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-5);
            assert!(rel <= 1e-4, "{variant} param {j}: fd {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn decode_is_pure_and_sigma_is_bounded() {
    let m = random_model(Variant::Mediator, 4, 2.0);
    let z = LatentStack {
        z: vec![vec![0.3, -1.0], vec![2.0, 0.1, -0.4]],
        u_z: None,
        pa: vec![],
    };
    let a = m.decode(&z, &[0.5, -0.5]).unwrap();
    let b = m.decode(&z, &[0.5, -0.5]).unwrap();
    assert_eq!(a, b);
    let (lo, hi) = (LOG_SCALE_MIN.exp(), LOG_SCALE_MAX.exp());
    assert!(a.1.iter().all(|s| *s >= lo && *s <= hi));
}

#[test]
fn zeroed_residuals_decode_the_initial_state() {
    let mut m = random_model(Variant::Exogenous, 5, 0.5);
    let outputs: Vec<(usize, usize)> = m
        .params
        .slots()
        .iter()
        .filter(|s| s.name.starts_with("residual") && s.name.ends_with('2'))
        .map(|s| (s.offset, s.rows * s.cols))
        .collect();
    assert_eq!(outputs.len(), 2 * m.layers());
    for (o, len) in outputs {
        m.params.values[o..o + len].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let p = m.params.bind_frozen(&mut tape);
    let h = m.h_top(&mut tape, &p, 1);
    let (mu0, _) = m.decode_h(&mut tape, &p, h);
    let mu0 = tape.value(mu0).to_vec();
    for seed in 0..3 {
        let mut r = rng::stream(seed, 1, 1);
        let z = LatentStack {
            z: vec![rng::normals(&mut r, 2), rng::normals(&mut r, 3)],
            u_z: None,
            pa: vec![],
        };
        let (mu, _) = m.decode(&z, &rng::normals(&mut r, 2)).unwrap();
        assert_eq!(mu, mu0);
    }
}

#[test]
fn epsilon_abduction() {
    assert_eq!(abduct_epsilon(&[3.0; 4], &[1.0; 4], &[2.0; 4]).unwrap(), vec![1.0; 4]);
    assert_eq!(abduct_epsilon(&[0.7], &[0.7], &[0.1]).unwrap(), vec![0.0]);
    assert!(abduct_epsilon(&[1.0], &[0.0], &[0.0]).is_err());
    let mut r = rng::stream(8, 0, 0);
    for _ in 0..100 {
        let x = rng::normals(&mut r, 8);
        let mu = rng::normals(&mut r, 8);
        let s: Vec<f64> = rng::normals(&mut r, 8).iter().map(|v| (0.5 * v).exp()).collect();
        let e = abduct_epsilon(&x, &mu, &s).unwrap();
        for k in 0..8 {
            assert!((mu[k] + s[k] * e[k] - x[k]).abs() <= 1e-9);
        }
    }
}

#[test]
fn mixture_examples() {
    let (m, s) = mixture_params(&[0.0], &[1.0], &[0.0], &[3.0], 0.5).unwrap();
    assert_eq!(m, vec![0.0]);
    assert!((s[0] - 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(
        mixture_params(&[1.0], &[2.0], &[3.0], &[4.0], 1.0).unwrap(),
        (vec![1.0], vec![2.0])
    );
    assert_eq!(
        mixture_params(&[1.0], &[2.0], &[3.0], &[4.0], 0.0).unwrap(),
        (vec![3.0], vec![4.0])
    );
    assert!(matches!(
        mixture_params(&[0.0], &[1.0], &[0.0], &[1.0], 1.5),
        Err(Error::OutOfRange(_))
    ));
}

#[test]
fn mixture_matches_second_moment_form() {
    let mut r = rng::stream(21, 0, 0);
    for _ in 0..1000 {
        let v = rng::normals(&mut r, 4);
        let pi = rng::open01(&mut r);
        let (sp, sq) = (v[1].exp(), v[3].exp());
        let (m, s) = mixture_params(&[v[0]], &[sp], &[v[2]], &[sq], pi).unwrap();
        let second = pi * (sp * sp + v[0] * v[0]) + (1.0 - pi) * (sq * sq + v[2] * v[2]);
        assert!((s[0] * s[0] - (second - m[0] * m[0])).abs() <= 1e-9 * second.max(1.0));
    }
}

#[test]
fn posterior_reparameterization_roundtrip() {
    let m = random_model(Variant::Mediator, 6, 0.5);
    let (x, pa) = batch(4, 1, &m.dims);
    for seed in 0..50 {
        let st = m.abduct_mediator(&x, &pa, seed).unwrap();
        let lp = m.layer_params(&x, &pa, seed).unwrap();
        let u = st.u_z.as_ref().unwrap();
        for i in 0..m.layers() {
            for k in 0..m.dims.z[i] {
                let back = lp[i].mu_q[k] + lp[i].sigma_q[k] * u[i][k];
                assert!((back - st.z[i][k]).abs() <= 1e-9);
            }
        }
        assert_eq!(st, m.abduct_mediator(&x, &pa, seed).unwrap());
    }
}

#[test]
fn exogenous_prior_ignores_parents() {
    let m = random_model(Variant::Exogenous, 7, 0.5);
    let z = LatentStack {
        z: vec![vec![0.1, 0.2], vec![-1.0, 0.0, 1.0]],
        u_z: None,
        pa: vec![],
    };
    let a = m.prior_log_density(&z, &[0.0, 0.0]).unwrap();
    let b = m.prior_log_density(&z, &[5.0, -3.0]).unwrap();
    assert_eq!(a, b);
    let med = random_model(Variant::Mediator, 7, 0.5);
    assert_ne!(
        med.prior_log_density(&z, &[0.0, 0.0]).unwrap(),
        med.prior_log_density(&z, &[5.0, -3.0]).unwrap()
    );
}

#[test]
fn null_counterfactuals_compose() {
    let ex = random_model(Variant::Exogenous, 8, 0.5);
    let med = random_model(Variant::Mediator, 8, 0.5);
    let (x, pa) = batch(5, 20, &ex.dims);
    for r in 0..20 {
        let xr = &x[r * 6..(r + 1) * 6];
        let pr = &pa[r * 2..(r + 1) * 2];
        let a = ex.counterfactual_exogenous(xr, pr, pr, r as u64).unwrap();
        assert!(max_abs_diff(&a, xr) <= 1e-6);
        assert_eq!(a, ex.counterfactual_exogenous(xr, pr, pr, r as u64).unwrap());
        let (b, zc) = med.counterfactual_mediator(xr, pr, pr, 0.0, r as u64).unwrap();
        assert!(max_abs_diff(&b, xr) <= 1e-6);
        assert_eq!(zc.z, med.abduct_mediator(xr, pr, r as u64).unwrap().z);
    }
}

#[test]
fn variants_are_enforced() {
    let ex = random_model(Variant::Exogenous, 9, 0.1);
    let med = random_model(Variant::Mediator, 9, 0.1);
    let (x, pa) = batch(1, 1, &ex.dims);
    assert!(matches!(ex.effects(&x, &pa, &pa, 0.5, 0), Err(Error::Variant(_))));
    assert!(matches!(ex.abduct_mediator(&x, &pa, 0), Err(Error::Variant(_))));
    assert!(matches!(med.counterfactual_exogenous(&x, &pa, &pa, 0), Err(Error::Variant(_))));
    assert!(matches!(med.counterfactual_mediator(&x, &pa, &pa, 1.5, 0), Err(Error::OutOfRange(_))));
}

/// Makes every posterior net compute exactly the prior of its layer.
fn tie_posterior_to_prior(m: &mut LadderModel) {
    let h = m.dims.h;
    for i in 0..m.layers() {
        let (prior, post) = m.prior_posterior_slots(i);
        for (ps, qs) in prior.iter().zip(&post) {
            let src = m.params.get(*ps).to_vec();
            let dst = m.params.get_mut(*qs);
            if src.len() == dst.len() {
                dst.copy_from_slice(&src);
            } else {
                let (cin, qin) = (src.len() / m.dims.hidden, dst.len() / m.dims.hidden);
                for r in 0..m.dims.hidden {
                    dst[r * qin..r * qin + h].iter_mut().for_each(|v| *v = 0.0);
                    dst[r * qin + h..(r + 1) * qin].copy_from_slice(&src[r * cin..(r + 1) * cin]);
                }
            }
        }
    }
}

#[test]
fn full_prior_weight_on_a_tied_model_composes() {
    let mut m = random_model(Variant::Mediator, 12, 0.5);
    tie_posterior_to_prior(&mut m);
    let (x, pa) = batch(6, 1, &m.dims);
    let lp = m.layer_params(&x, &pa, 3).unwrap();
    for l in &lp {
        assert_eq!(l.mu_p, l.mu_q);
        assert_eq!(l.sigma_p, l.sigma_q);
    }
    let (xc, _) = m.counterfactual_mediator(&x, &pa, &pa, 1.0, 3).unwrap();
    assert!(max_abs_diff(&xc, &x) <= 1e-6);
}

#[test]
fn effects_telescope_and_vanish_on_null_queries() {
    let m = random_model(Variant::Mediator, 13, 0.5);
    let (x, pa) = batch(7, 1, &m.dims);
    let null = m.effects(&x, &pa, &pa, 0.0, 1).unwrap();
    assert!(null.de.iter().chain(&null.ie).chain(&null.te).all(|v| *v == 0.0));
    let cf = [pa[0] + 1.0, pa[1] - 2.0];
    for pi in [0.0, 0.3, 0.9, 1.0] {
        let e = m.effects(&x, &pa, &cf, pi, 2).unwrap();
        assert!(e.telescoping_error <= 1e-9);
        assert!(e.norms.te > 0.0);
    }
}

#[test]
fn training_lowers_free_energy() {
    let mut m = LadderModel::new(Variant::Mediator, small_dims(), 1).unwrap();
    let (x, pa) = batch(9, 64, &m.dims);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let before = m.clone();
    let rep = m.train(&x, &pa, &cfg).unwrap();
    assert!(rep.trace.is_empty());
    assert_eq!(m.params, before.params);
    assert_eq!(rep.c, m.mean_free_energy(&x, &pa, cfg.seed).unwrap());
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let rep = m.train(&x, &pa, &cfg).unwrap();
    assert!(rep.trace[39] < rep.trace[0]);
    let mut again = before.clone();
    assert_eq!(again.train(&x, &pa, &cfg).unwrap(), rep);
    assert_eq!(again.params, m.params);
}

#[test]
fn non_finite_data_is_rejected() {
    let mut m = LadderModel::new(Variant::Exogenous, small_dims(), 1).unwrap();
    let (mut x, pa) = batch(9, 4, &m.dims);
    x[3] = f64::NAN;
    assert!(matches!(m.train(&x, &pa, &TrainConfig::default()), Err(Error::Divergence(_))));
}

#[test]
fn graph_abduction_with_a_ladder_node_is_consistent() {
    use crate::mechanisms::{AffineFlowMechanism, FeatureMap, ParentFeature};
    use crate::scm::{Intervention, NodeDef, ScmGraph, Value, VariableKind, VariableSpec};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    for variant in [Variant::Exogenous, Variant::Mediator] {
        let model = Arc::new(random_model(variant, 14, 0.3));
        let enc = FeatureMap::identity(vec![ParentFeature::Continuous; 2]);
        let mech = LadderMechanism::new(model, enc, 0.0).unwrap();
        let g = ScmGraph::new(vec![
            NodeDef::new(VariableSpec::continuous("a"), &[], Arc::new(AffineFlowMechanism::linear(&[], 0.0, 0.0))),
            NodeDef::new(VariableSpec::continuous("b"), &["a"], Arc::new(AffineFlowMechanism::linear(&[0.5], 1.0, -1.0))),
            NodeDef::new(VariableSpec::new("x", VariableKind::Tensor { shape: vec![6] }), &["a", "b"], Arc::new(mech)),
        ])
        .unwrap();
        for w in g.sample_observational(3, 5).unwrap() {
            assert!(g.consistency_error(&w).unwrap() <= 1e-9);
            let ev: BTreeMap<String, Value> = w.endogenous.clone();
            let abducted = g.abduct(&ev, 9).unwrap();
            assert!(g.consistency_error(&abducted).unwrap() <= 1e-9);
            let cf = g.counterfactual_world(&abducted, &Intervention::none()).unwrap();
            let (x, xc) = (w.value("x").unwrap(), cf.value("x").unwrap());
            assert!(max_abs_diff(x.as_tensor().unwrap(), xc.as_tensor().unwrap()) <= 1e-6);
            let moved = g
                .counterfactual_world(&abducted, &Intervention::hard([("a", Value::Scalar(2.0))]))
                .unwrap();
            assert_eq!(moved.value("b").unwrap(), &Value::Scalar(2.0 * 0.5 + 1.0 + (-1f64).exp() * {
                let b = w.scalar("b").unwrap();
                let a = w.scalar("a").unwrap();
                (b - 0.5 * a - 1.0) / (-1f64).exp()
            }));
        }
    }
}
