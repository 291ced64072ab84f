use super::*;
use proptest::prelude::*;

fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    matrix(rows, cols, data).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng::stream(seed, 99, 0);
    DMatrix::from_fn(rows, cols, |_, _| rng::normal(&mut g))
}

/// Least squares through the SVD pseudo-inverse, independent of the
/// normal equations.
fn lstsq_oracle(z: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    ridge_oracle(z, p, 0.0)
}

/// Ridge solution `V·diag(s/(s² + δ))·Uᵀ·Z` from the thin SVD of `P`.
fn ridge_oracle(z: &DMatrix<f64>, p: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let svd = p.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let f = DMatrix::from_diagonal(&svd.singular_values.map(|s| s / (s * s + delta)));
    vt.transpose() * f * u.transpose() * z
}

/// Mean squared error of the best rank-`k` approximation of centered `x`.
fn pca_oracle(x: &DMatrix<f64>, k: usize) -> f64 {
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let sv = xc.svd(false, false).singular_values;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[k..].iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn hand_example_is_exact() {
    let p = m(2, 2, &[1.0, 0.0, 1.0, 1.0]);
    let z = m(2, 1, &[2.0, 4.0]);
    let fit = glm_fit(&z, &p, 0.0).unwrap();
    assert_eq!(fit.b, m(2, 1, &[2.0, 2.0]));
    let u = glm_abduct(&fit, &z, &p).unwrap();
    assert_eq!(u, DMatrix::zeros(2, 1));
}

#[test]
fn second_hand_example_is_an_exact_fit() {
    // Two rows and two coefficients interpolate any targets.
    let p = m(2, 2, &[1.0, 0.0, 1.0, 1.0]);
    let z = m(2, 1, &[2.0, 5.0]);
    let fit = glm_fit(&z, &p, 0.0).unwrap();
    let oracle = lstsq_oracle(&z, &p);
    assert!((&fit.b - &oracle).amax() < 1e-12);
    assert!((&fit.b - m(2, 1, &[2.0, 3.0])).amax() < 1e-12);
    assert!(glm_abduct(&fit, &z, &p).unwrap().amax() < 1e-12);
}

#[test]
fn hand_prediction() {
    let params = GlmParams {
        b: m(2, 1, &[2.0, 2.0]),
        jitter: 0.0,
    };
    let z = glm_predict(&params, &DMatrix::zeros(1, 1), &m(1, 2, &[1.0, 2.0])).unwrap();
    assert_eq!(z, m(1, 1, &[6.0]));
}

#[test]
fn exact_fit_recovers_coefficients() {
    let p = DesignStats::identity(vec!["a".into(), "b".into()]).design(&random(30, 2, 1)).unwrap();
    let b0 = random(3, 5, 2);
    let z = &p * &b0;
    let fit = glm_fit(&z, &p, 0.0).unwrap();
    assert!((&fit.b - &b0).amax() < 1e-12);
    assert!(glm_abduct(&fit, &z, &p).unwrap().amax() < 1e-12);
}

#[test]
fn duplicated_column_needs_jitter() {
    let raw = random(20, 1, 3);
    let dup = DMatrix::from_fn(20, 2, |r, _| raw[(r, 0)]);
    let p = DesignStats::fit(vec!["a".into(), "a2".into()], &dup).unwrap().design(&dup).unwrap();
    let z = random(20, 2, 4);
    assert!(matches!(glm_fit(&z, &p, 0.0), Err(Error::SingularMatrix(_))));
    let fit = glm_fit(&z, &p, 1e-8).unwrap();
    assert!(fit.b.iter().all(|v| v.is_finite()));
    // The ridge splits the shared coefficient evenly.
    assert!((fit.b[(1, 0)] - fit.b[(2, 0)]).abs() < 1e-6);
}

#[test]
fn random_problems_match_the_svd_oracle() {
    let mut g = rng::stream(5, 98, 0);
    for case in 0..100u64 {
        let n = rand::Rng::gen_range(&mut g, 10..=200);
        let mm = rand::Rng::gen_range(&mut g, 1..=8usize).min(n - 2);
        let k = rand::Rng::gen_range(&mut g, 1..=32);
        let raw = random(n, mm, 1000 + case);
        let names = (0..mm).map(|j| format!("p{j}")).collect();
        let p = DesignStats::fit(names, &raw).unwrap().design(&raw).unwrap();
        let z = random(n, k, 2000 + case);
        let fit = glm_fit(&z, &p, 1e-8).unwrap();
        let oracle = ridge_oracle(&z, &p, 1e-8);
        let err = (&fit.b - &oracle).amax();
        assert!(err <= 1e-8, "case {case}: {err}");
        let u = glm_abduct(&fit, &z, &p).unwrap();
        let ortho = (p.transpose() * &u).amax();
        let scale = (p.transpose() * &z).amax();
        assert!(ortho <= 1e-6 * scale, "case {case}: {ortho} vs {scale}");
        let back = glm_predict(&fit, &u, &p).unwrap();
        assert!((&back - &z).amax() <= 1e-12 * z.amax().max(1.0));
    }
}

#[test]
fn permuting_rows_leaves_coefficients_unchanged() {
    let raw = random(50, 3, 6);
    let stats = DesignStats::fit(vec!["a".into(), "b".into(), "c".into()], &raw).unwrap();
    let p = stats.design(&raw).unwrap();
    let z = random(50, 4, 7);
    let perm: Vec<usize> = (0..50).rev().collect();
    let pp = p.select_rows(&perm);
    let zp = z.select_rows(&perm);
    let a = glm_fit(&z, &p, 1e-8).unwrap();
    let b = glm_fit(&zp, &pp, 1e-8).unwrap();
    assert!((&a.b - &b.b).amax() < 1e-12);
}

#[test]
fn design_has_intercept_and_reuses_stats() {
    let raw = m(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]);
    let stats = DesignStats::fit(vec!["a".into(), "c".into()], &raw).unwrap();
    assert_eq!(stats.std[1], 1.0);
    assert!((stats.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
    let p = stats.design(&raw).unwrap();
    assert!(p.column(0).iter().all(|v| *v == 1.0));
    let again = stats.design(&raw).unwrap();
    assert_eq!(p, again);
    let json = serde_json::to_string(&stats).unwrap();
    let back: DesignStats = serde_json::from_str(&json).unwrap();
    assert_eq!(back.design(&raw).unwrap(), p);
    assert!(stats.design(&m(1, 1, &[0.0])).is_err());
}

#[test]
fn momentum_update() {
    let raw = random(40, 2, 8);
    let p = DesignStats::identity(vec!["a".into(), "b".into()]).design(&raw).unwrap();
    let z1 = random(40, 3, 9);
    let z2 = random(40, 3, 10);
    let b1 = glm_fit(&z1, &p, 1e-8).unwrap();
    let b2 = glm_fit(&z2, &p, 1e-8).unwrap();
    let zero = GlmParams {
        b: DMatrix::zeros(3, 3),
        jitter: 1e-8,
    };
    assert_eq!(glm_momentum_update(&b1, &z2, &p, 0.0).unwrap().b, b2.b);

    // Two batches from zero at γ = 0.5 by the recurrence.
    let s1 = glm_momentum_update(&zero, &z1, &p, 0.5).unwrap();
    let s2 = glm_momentum_update(&s1, &z2, &p, 0.5).unwrap();
    let expect = (&b1.b * 0.5) * 0.5 + &b2.b * 0.5;
    assert!((&s2.b - &expect).amax() < 1e-12);

    // Repeating one batch shrinks the gap by γ each step.
    let mut s = zero.clone();
    let mut gap = (&s.b - &b1.b).amax();
    for _ in 0..5 {
        s = glm_momentum_update(&s, &z1, &p, 0.7).unwrap();
        let next = (&s.b - &b1.b).amax();
        assert!((next - 0.7 * gap).abs() < 1e-12 * gap.max(1.0));
        gap = next;
    }
    assert!(glm_momentum_update(&zero, &z1, &p, 1.0).is_err());
}

#[test]
fn predict_is_affine_in_the_residual() {
    let params = GlmParams {
        b: random(3, 4, 11),
        jitter: 1e-8,
    };
    let u = random(5, 4, 12);
    let p = DesignStats::identity(vec!["a".into(), "b".into()]).design(&random(5, 2, 13)).unwrap();
    let alpha = 2.5;
    let lhs = glm_predict(&params, &(&u * alpha), &p).unwrap();
    let rhs = glm_predict(&params, &u, &p).unwrap() * alpha - (&p * &params.b) * (alpha - 1.0);
    assert!((&lhs - &rhs).amax() < 1e-12);
    assert!(glm_predict(&params, &u, &random(5, 2, 14)).is_err());
}

#[test]
fn quantize_examples() {
    let cb = Codebook::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(cb.quantize(&[0.2, 0.1]), 0);
    assert_eq!(cb.quantize(&[0.5, 0.5]), 0);
    assert_eq!(cb.quantize_residual(&[1.0, 1.0]), vec![1.0, 1.0]);

    let cb = Codebook::new(vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]]).unwrap();
    assert_eq!(cb.quantize(&[0.7, 0.7]), 1);
    assert_eq!(cb.quantize_residual(&[0.7, 0.7]), vec![0.5, 0.5]);

    assert!(Codebook::new(vec![vec![1.0, 0.0]]).is_err());
    assert!(Codebook::new(vec![vec![0.0], vec![1.0, 2.0]]).is_err());
    assert!(cb.quantize_latent(&[0.0; 3]).is_err());
}

#[test]
fn quantize_matches_an_exhaustive_scan() {
    let mut g = rng::stream(15, 98, 0);
    let mut entries = vec![vec![0.0; 3]];
    entries.extend((0..20).map(|_| rng::normals(&mut g, 3)));
    let cb = Codebook::new(entries.clone()).unwrap();
    for _ in 0..1000 {
        let z = rng::normals(&mut g, 3);
        let scan = entries
            .iter()
            .map(|e| e.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap()
            .0;
        assert_eq!(cb.quantize(&z), scan);
    }
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn residual_quantization_never_hurts(
        seed in any::<u64>(),
        z in proptest::collection::vec(-3.0f64..3.0, 2),
    ) {
        let mut g = rng::stream(seed, 97, 0);
        let mut entries = vec![vec![0.0; 2]];
        entries.extend((0..8).map(|_| rng::normals(&mut g, 2)));
        let cb = Codebook::new(entries).unwrap();
        let plain = &cb.entries[cb.quantize(&z)];
        let q = cb.quantize_residual(&z);
        prop_assert!(norm(&z, &q) <= norm(&z, plain));
    }

    #[test]
    fn glm_composition_is_exact(seed in any::<u64>(), n in 5usize..30, k in 1usize..6) {
        let raw = random(n, 2, seed);
        let stats = DesignStats::fit(vec!["a".into(), "b".into()], &raw).unwrap();
        let p = stats.design(&raw).unwrap();
        let z = random(n, k, seed ^ 1);
        let fit = glm_fit(&z, &p, 1e-8).unwrap();
        let u = glm_abduct(&fit, &z, &p).unwrap();
        let back = glm_predict(&fit, &u, &p).unwrap();
        prop_assert!((&back - &z).amax() <= 1e-12 * z.amax().max(1.0));
        let again = glm_abduct(&fit, &(&u + &p * &fit.b), &p).unwrap();
        prop_assert!((&again - &u).amax() <= 1e-12 * z.amax().max(1.0));
    }
}

#[test]
fn kmeans_finds_two_tight_clusters() {
    let mut g = rng::stream(16, 98, 0);
    let mut pts = Vec::new();
    for c in [[3.0, 3.0], [-2.0, 4.0]] {
        for _ in 0..100 {
            pts.push(vec![c[0] + 0.01 * rng::normal(&mut g), c[1] + 0.01 * rng::normal(&mut g)]);
        }
    }
    let (cb, trace) = fit_codebook(&pts, 3, 20, 1).unwrap();
    assert_eq!(cb.entries[0], vec![0.0, 0.0]);
    let mean = |lo: usize| -> Vec<f64> {
        (0..2)
            .map(|j| pts[lo..lo + 100].iter().map(|p| p[j]).sum::<f64>() / 100.0)
            .collect()
    };
    for target in [mean(0), mean(100)] {
        assert!(cb.entries[1..].iter().any(|e| norm(e, &target) < 1e-12));
    }
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    let (again, _) = fit_codebook(&pts, 3, 20, 1).unwrap();
    assert_eq!(cb, again);
}

#[test]
fn kmeans_error_never_rises() {
    let mut g = rng::stream(17, 98, 0);
    let pts: Vec<Vec<f64>> = (0..500).map(|_| rng::normals(&mut g, 2)).collect();
    let (cb, trace) = fit_codebook(&pts, 16, 30, 2).unwrap();
    assert_eq!(cb.len(), 16);
    assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn single_entry_codebook_is_zero() {
    let pts = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let (cb, _) = fit_codebook(&pts, 1, 5, 0).unwrap();
    assert_eq!(cb.entries, vec![vec![0.0, 0.0]]);
    assert_eq!(cb.quantize_residual(&[1.0, 2.0]), vec![0.0, 0.0]);
}

#[test]
fn autoencoder_recovers_low_rank_data() {
    let x = random(60, 3, 18) * random(3, 10, 19);
    let ae = fit_linear_autoencoder(&x, 3, &AlsConfig::default()).unwrap();
    assert!(ae.reconstruction_mse(&x).unwrap() <= 1e-9);
    let full = fit_linear_autoencoder(&random(30, 5, 20), 5, &AlsConfig::default()).unwrap();
    assert!(full.reconstruction_mse(&random(30, 5, 20)).unwrap() <= 1e-9);
}

#[test]
fn autoencoder_matches_truncated_svd() {
    for seed in 0..5 {
        let x = random(200, 16, 30 + seed);
        let ae = fit_linear_autoencoder(&x, 4, &AlsConfig::default()).unwrap();
        let got = ae.reconstruction_mse(&x).unwrap();
        let oracle = pca_oracle(&x, 4);
        assert!(got <= oracle * 1.01, "seed {seed}: {got} vs {oracle}");
        assert!(ae.trace.len() <= 200);
    }
}

#[test]
fn autoencoder_rejects_rank_deficiency() {
    let x = random(40, 2, 21) * random(2, 8, 22);
    assert!(matches!(
        fit_linear_autoencoder(&x, 3, &AlsConfig::default()),
        Err(Error::RankDeficient { rank: 2, wanted: 3 })
    ));
    assert!(fit_linear_autoencoder(&random(3, 8, 23), 3, &AlsConfig::default()).is_err());
}

#[test]
fn null_counterfactual_is_the_reconstruction() {
    let x = random(80, 12, 24);
    let pa = random(80, 2, 25);
    let cfg = CodebookConfig {
        latent: 4,
        entries: 8,
        vector: 4,
        iterations: 10,
        jitter: 1e-8,
    };
    let model = fit_vqglm(&x, &pa, vec!["a".into(), "b".into()], &cfg, 3).unwrap();
    let cf = latent_counterfactual(&model, &x, &pa, &pa).unwrap();
    let rec = model.reconstruct(&x).unwrap();
    assert!((&cf - &rec).amax() <= 1e-9);
    let again = fit_vqglm(&x, &pa, vec!["a".into(), "b".into()], &cfg, 3).unwrap();
    assert_eq!(model, again);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = VqGlm::load(dir.path()).unwrap();
    assert_eq!(latent_counterfactual(&loaded, &x, &pa, &pa).unwrap(), cf);
    let mut moved = pa.clone();
    moved.column_mut(0).add_scalar_mut(1.0);
    let shifted = latent_counterfactual(&model, &x, &pa, &moved).unwrap();
    let delta = model.autoencoder.decode(&DMatrix::from_fn(80, 4, |_, j| model.glm.b[(1, j)] / model.design.std[0])).unwrap()
        - model.autoencoder.decode(&DMatrix::zeros(80, 4)).unwrap();
    assert!((&shifted - &cf - delta).amax() < 1e-9);
}

#[test]
fn config_validation() {
    assert!(CodebookConfig::default().validate().is_ok());
    for bad in [
        CodebookConfig { vector: 3, ..Default::default() },
        CodebookConfig { latent: 10, ..Default::default() },
        CodebookConfig { entries: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
