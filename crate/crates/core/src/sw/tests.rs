use super::*;
use crate::data::{CoordFrame, DatasetParts};
use crate::gls::implied_weights;
use crate::oracles::simplex_grid_search;
use rand_distr::{Distribution, StandardNormal};

fn dataset(n: usize, seed: u64, with_y: bool) -> SpatialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>() * 1e4, rng.random::<f64>() * 1e4]).collect();
    let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let y = with_y.then(|| (0..n).map(|i| 1.0 + x1[i] + if z[i] { 0.5 } else { 0.0 } + coords[i][0] / 1e4).collect());
    SpatialDataset::new(
        CoordFrame::Planar,
        DatasetParts {
            ids: (0..n).map(|i| format!("u{i}")).collect(),
            coords,
            cluster: (0..n).map(|i| format!("c{}", i % 5)).collect(),
            covariates: vec![("x1".into(), x1)],
            z,
            y,
        },
    )
    .unwrap()
}

fn check_invariants(ds: &SpatialDataset, fit: &SwFit) {
    let z = ds.z();
    let wc = fit.control_weights(z);
    assert!(wc.iter().all(|&w| w >= 0.0));
    assert!((wc.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    for row in &fit.balance {
        assert!(row.imbalance.abs() <= row.delta + 1e-8, "{}: {} > {}", row.name, row.imbalance, row.delta);
    }
    if let Some(y) = ds.y() {
        let yc: Vec<f64> = (0..ds.n()).filter(|&i| !z[i]).map(|i| y[i]).collect();
        let control: f64 = (0..ds.n()).filter(|&i| !z[i]).map(|i| fit.weights[i] * y[i]).sum();
        let lo = yc.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = yc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(control >= lo - 1e-9 && control <= hi + 1e-9);
    }
}

#[test]
fn re_eigenvectors_are_cluster_directions() {
    let ds = dataset(30, 1, false);
    let st = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
    let (v, tags, warnings) = select_eigenvectors(&[&st], &[5]).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(tags.len(), 5);
    for k in 0..5 {
        let col = v.column(k);
        // constant within clusters
        for i in 0..30 {
            for j in 0..30 {
                if ds.cluster()[i] == ds.cluster()[j] {
                    assert!((col[i] - col[j]).abs() < 1e-12);
                }
            }
        }
        let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
    }
}

#[test]
fn zero_eigenvalue_requests_are_dropped() {
    let ds = dataset(30, 2, false);
    let st = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
    let (_, tags, warnings) = select_eigenvectors(&[&st], &[8]).unwrap();
    assert_eq!(tags.len(), 5);
    assert_eq!(warnings.len(), 1);
}

#[test]
fn sign_convention_is_input_independent() {
    let ds = dataset(20, 3, false);
    let st = SpatialStructure::build_gp_matern(&ds, 1.5, 3000.0, 1.0, 1.0).unwrap();
    let flipped = SpatialStructure::custom(&(st.s() * 1.0), 1.0, 1.0).unwrap();
    let (a, _, _) = select_eigenvectors(&[&st], &[6]).unwrap();
    let (b, _, _) = select_eigenvectors(&[&flipped], &[6]).unwrap();
    assert!((&a - &b).amax() < 1e-8);
    let mut v = a.column(0).into_owned();
    v.neg_mut();
    crate::linalg::canonical_sign(&mut v);
    assert!((v - a.column(0)).amax() == 0.0);
}

#[test]
fn auto_thresholds_follow_the_reference_fit() {
    let ds = dataset(40, 4, false);
    let st = SpatialStructure::build_gp_matern(&ds, 0.5, 4000.0, 1.0, 2.0).unwrap();
    let aug = AugmentedDesign::build(&ds, &[&st], &[4], Basis::Linear).unwrap();
    let iw = implied_weights(&ds, &st).unwrap();
    let total: f64 = (0..40).map(|k| st.eigvals()[k] * iw.l.dot(&st.eigvecs().column(k)).powi(2)).sum();
    for (k, col) in aug.columns.iter().filter(|c| c.group == ColumnGroup::Eigenvector).enumerate() {
        let expect = (total / (40.0 * st.eigvals()[k])).sqrt();
        assert!((col.auto_delta.unwrap() - expect).abs() < 1e-12 * expect.max(1.0));
    }
    let d = aug.resolve_deltas(&DeltaSpec::Default).unwrap();
    assert_eq!(d[0], 0.0);
    assert!(d[1] > 0.0);
}

#[test]
fn basis_expansions() {
    let ds = dataset(30, 5, false);
    let st = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
    let lin = AugmentedDesign::build(&ds, &[&st], &[2], Basis::Linear).unwrap();
    assert_eq!(lin.k(), 3);
    let quad = AugmentedDesign::build(&ds, &[&st], &[2], Basis::Quad).unwrap();
    assert_eq!(quad.k(), 4);
    let inter = AugmentedDesign::build(&ds, &[&st], &[2], Basis::Interact).unwrap();
    assert_eq!(inter.k(), 3 + 6);
    let d = inter.resolve_deltas(&DeltaSpec::Default).unwrap();
    assert_eq!(d[3..], [HIGHER_ORDER_DELTA; 6]);
    for j in 3..9 {
        let c = inter.basis.column(j);
        assert!(c.mean().abs() < 1e-12);
    }
}

#[test]
fn duplicated_treated_group_gives_zero() {
    let n_half = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..n_half).map(|_| rng.random::<f64>()).collect();
    let coords: Vec<[f64; 2]> = (0..n_half).map(|i| [i as f64, 0.0]).collect();
    let mut parts = DatasetParts::default();
    for rep in 0..2 {
        for i in 0..n_half {
            parts.ids.push(format!("{rep}-{i}"));
            parts.coords.push(coords[i]);
            parts.cluster.push("a".into());
            parts.z.push(rep == 0);
        }
    }
    let xx: Vec<f64> = x.iter().chain(x.iter()).copied().collect();
    parts.y = Some(xx.iter().map(|v| 2.0 * v + v * v).collect());
    parts.covariates = vec![("x".into(), xx)];
    let ds = SpatialDataset::new(CoordFrame::Planar, parts).unwrap();
    let aug = AugmentedDesign::build(&ds, &[], &[], Basis::Linear).unwrap();
    let fit = sw_fit(&ds, &aug, &DeltaSpec::Scalar(0.0), &SwOptions::default()).unwrap();
    assert!(fit.tau.unwrap().abs() < 1e-8, "tau {}", fit.tau.unwrap());
}

#[test]
fn unconstrained_is_difference_in_means() {
    let ds = dataset(30, 7, true);
    let st = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
    let aug = AugmentedDesign::build(&ds, &[&st], &[3], Basis::Linear).unwrap();
    let fit = sw_fit(&ds, &aug, &DeltaSpec::Scalar(f64::INFINITY), &SwOptions::default()).unwrap();
    let y = ds.y().unwrap();
    let z = ds.z();
    let mt = (0..30).filter(|&i| z[i]).map(|i| y[i]).sum::<f64>() / ds.n_treated() as f64;
    let mc = (0..30).filter(|&i| !z[i]).map(|i| y[i]).sum::<f64>() / ds.n_control() as f64;
    assert!((fit.tau.unwrap() - (mt - mc)).abs() < 1e-8);
    assert!((fit.risk_ratio.unwrap() - mt / mc).abs() < 1e-8);
}

#[test]
fn toy_matches_grid_search() {
    let n = 12;
    let xs = [0.1, 0.5, 0.2, 0.9, 0.4, 0.3, 0.7, 0.6, 0.8, -0.2, 0.45, 1.1];
    let z: Vec<bool> = (0..n).map(|i| i < 9).collect();
    let y: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
    let ds = SpatialDataset::new(
        CoordFrame::Planar,
        DatasetParts {
            ids: (0..n).map(|i| i.to_string()).collect(),
            coords: (0..n).map(|i| [i as f64, 0.0]).collect(),
            cluster: vec!["a".into(); n],
            covariates: vec![("x".into(), xs.to_vec())],
            z: z.clone(),
            y: Some(y.clone()),
        },
    )
    .unwrap();
    let aug = AugmentedDesign::build(&ds, &[], &[], Basis::Linear).unwrap();
    let fit = sw_fit(&ds, &aug, &DeltaSpec::Scalar(0.05), &SwOptions::default()).unwrap();
    check_invariants(&ds, &fit);
    let tm = xs[..9].iter().sum::<f64>() / 9.0;
    let cx = &xs[9..];
    let (wg, _) = simplex_grid_search(
        3,
        1000,
        |w| w.iter().map(|v| v * v).sum(),
        |w| (w.iter().zip(cx).map(|(a, b)| a * b).sum::<f64>() - tm).abs() <= 0.05,
    )
    .unwrap();
    let yt = y[..9].iter().sum::<f64>() / 9.0;
    let tau_grid = yt - wg.iter().zip(&y[9..]).map(|(a, b)| a * b).sum::<f64>();
    assert!((fit.tau.unwrap() - tau_grid).abs() <= 1e-2);
}

#[test]
fn invariants_on_random_designs() {
    for seed in 0..4 {
        let ds = dataset(60, 10 + seed, true);
        let re = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
        let gp = SpatialStructure::build_gp_matern(&ds, 1.5, 3000.0, 1.0, 1.0).unwrap();
        let aug = AugmentedDesign::build(&ds, &[&re, &gp], &[3, 5], Basis::Linear).unwrap();
        let fit = sw_fit(&ds, &aug, &DeltaSpec::Default, &SwOptions::default()).unwrap();
        check_invariants(&ds, &fit);
        assert!(fit.ess > 1.0 && fit.ess <= ds.n() as f64);
    }
}

#[test]
fn tightening_never_lowers_the_objective() {
    let ds = dataset(45, 20, true);
    let gp = SpatialStructure::build_gp_matern(&ds, 1.5, 3000.0, 1.0, 1.0).unwrap();
    let aug = AugmentedDesign::build(&ds, &[&gp], &[4], Basis::Linear).unwrap();
    let mut last = 0.0;
    for &d in &[1.0, 0.3, 0.1, 0.03, 0.01] {
        let mut deltas = vec![0.0];
        deltas.extend(std::iter::repeat(d).take(4));
        match sw_fit(&ds, &aug, &DeltaSpec::PerColumn(deltas), &SwOptions::default()) {
            Ok(fit) => {
                assert!(fit.dispersion >= last - 1e-9);
                last = fit.dispersion;
            }
            Err(Error::Infeasible { .. }) => break,
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn infeasible_program_suggests_inflation() {
    let ds = dataset(30, 8, true);
    let mut deltas = vec![0.0];
    let gp = SpatialStructure::build_gp_matern(&ds, 0.5, 2000.0, 1.0, 1.0).unwrap();
    let aug = AugmentedDesign::build(&ds, &[&gp], &[25], Basis::Linear).unwrap();
    deltas.extend(std::iter::repeat(0.0).take(aug.k() - 1));
    match sw_fit(&ds, &aug, &DeltaSpec::PerColumn(deltas.clone()), &SwOptions::default()) {
        Err(Error::Infeasible { suggested_inflation: Some(t) }) => {
            assert!(t > 0.0);
            let loose: Vec<f64> = deltas.iter().map(|d| d + t).collect();
            let fit = sw_fit(&ds, &aug, &DeltaSpec::PerColumn(loose), &SwOptions::default()).unwrap();
            check_invariants(&ds, &fit);
            let tight: Vec<f64> = deltas.iter().map(|d| d + 0.9 * t).collect();
            assert!(matches!(
                sw_fit(&ds, &aug, &DeltaSpec::PerColumn(tight), &SwOptions::default()),
                Err(Error::Infeasible { .. })
            ));
        }
        other => panic!("expected infeasible, got {:?}", other.map(|f| f.tau)),
    }
}

#[test]
fn bootstrap_is_thread_count_independent() {
    let ds = dataset(40, 9, true);
    let re = SpatialStructure::build_re(&ds, 1.0, 1.0).unwrap();
    let aug = AugmentedDesign::build(&ds, &[&re], &[2], Basis::Linear).unwrap();
    let opts = SwOptions { bootstrap: 40, seed: 11, ..SwOptions::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sw_fit(&ds, &aug, &DeltaSpec::Default, &opts).unwrap())
    };
    let a = run(1).bootstrap.unwrap();
    let b = run(4).bootstrap.unwrap();
    assert_eq!(a, b);
    assert!(a.se > 0.0 && a.ci_lower < a.ci_upper);
}

#[test]
fn bound_special_cases() {
    let ds = dataset(20, 12, false);
    let gp = SpatialStructure::build_gp_matern(&ds, 1.5, 3000.0, 1.0, 1.0).unwrap();
    let inp = SwBoundInput { moran_i: 1.0, eps1: 2.0, eps2: 0.0, eps3: 0.0, h: 3 };
    assert_eq!(sw_bias_variance_bound(&gp, &inp, None).unwrap().bias_bound, 0.0);
    let w = vec![0.25; 4];
    let b = sw_bias_variance_bound(&gp, &inp, Some((&w, 5, 1.0, 1.0))).unwrap();
    assert!((b.variance.unwrap() - (1.0 / 5.0 + 1.0 / 4.0)).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for k in 0..=10 {
        let i = k as f64 / 10.0;
        let v = sw_bias_variance_bound(&gp, &SwBoundInput { moran_i: i, eps2: 0.1, eps3: 0.05, ..inp }, None)
            .unwrap()
            .bias_bound;
        assert!(v <= prev);
        prev = v;
    }
    let id = SpatialStructure::custom(&DMatrix::identity(5, 5), 1.0, 1.0).unwrap();
    let b = sw_bias_variance_bound(&id, &SwBoundInput { moran_i: 0.5, ..inp }, None).unwrap();
    assert!(b.bias_bound.is_infinite() && b.explanation.is_some());
    assert_eq!(epsilon3(&[1.0, -2.0, 0.0], &[0.1, 0.2, f64::INFINITY]).unwrap(), 0.5);
}
