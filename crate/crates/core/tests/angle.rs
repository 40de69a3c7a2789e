use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sector::angle::{
    analyze, cluster_score, cluster_window, delta, delta_centers, detect_emergent, read_features, score,
    window_partition, write_features, AngleConfig, AngleError, Cluster, ClusterModel, FeatureVector, Synthetic,
};
use sector::cli::scenario::{angle_on_cluster, local_cluster};

fn fv(t: f64, values: Vec<f64>) -> FeatureVector {
    FeatureVector::new("e", t, values)
}

fn model_of(centers: &[Vec<f64>]) -> ClusterModel {
    let k = centers.len();
    ClusterModel {
        clusters: centers
            .iter()
            .map(|c| Cluster { center: c.clone(), variance: 1.0, weight: 1.0 / k as f64, lambda: 1.0 / k as f64, members: 1 })
            .collect(),
        objective: Vec::new(),
        iterations: 0,
    }
}

/// Nearest-neighbour matcher written out longhand.
fn brute_delta(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut best = f64::INFINITY;
        for y in b {
            let mut d = 0.0;
            for i in 0..x.len() {
                d += (x[i] - y[i]) * (x[i] - y[i]);
            }
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total
}

/// The score formula evaluated from its parts.
fn rho_k(x: &[f64], theta: f64, lambda: f64, var: f64, a: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(a).map(|(p, q)| (p - q).powi(2)).sum();
    theta * (-(lambda.powi(2)) * d2 / (2.0 * var)).exp()
}

#[test]
fn partition_example() {
    let w = window_partition(&[fv(0.0, vec![1.0]), fv(5.0, vec![2.0]), fv(15.0, vec![3.0])], 10.0, 0.0).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!(w[0].members.iter().map(|m| m.timestamp).collect::<Vec<_>>(), vec![0.0, 5.0]);
    assert_eq!(w[1].members.iter().map(|m| m.timestamp).collect::<Vec<_>>(), vec![15.0]);
    assert_eq!((w[1].index, w[1].start, w[1].length), (1, 10.0, 10.0));
}

#[test]
fn partition_of_nothing_is_empty() {
    assert!(window_partition(&[], 10.0, 0.0).unwrap().is_empty());
}

#[test]
fn partition_rejects_bad_length() {
    for d in [0.0, -1.0, f64::NAN] {
        assert!(matches!(window_partition(&[fv(0.0, vec![1.0])], d, 0.0), Err(AngleError::BadWindow(_))));
    }
}

#[test]
fn one_cluster_is_the_mean() {
    let pts = [vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0], vec![-1.0, 3.0]];
    let members: Vec<FeatureVector> = pts.iter().map(|p| fv(0.0, p.clone())).collect();
    let m = cluster_window(&members, 1, 3).unwrap();
    let mean = [2.0, 3.0];
    let var = pts.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum::<f64>() / 4.0;
    let c = &m.clusters[0];
    assert!((c.center[0] - mean[0]).abs() < 1e-12 && (c.center[1] - mean[1]).abs() < 1e-12);
    assert!((c.variance - var).abs() < 1e-12);
    assert_eq!((c.weight, c.lambda, c.members), (1.0, 1.0, 4));
}

#[test]
fn two_separated_blobs_are_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let radius = 1.0;
    let noise = Normal::new(0.0, radius / 3.0).unwrap();
    let means = [[0.0, 0.0, 0.0], [20.0, -5.0, 8.0]];
    let mut members = Vec::new();
    let mut blob_means = [[0.0; 3]; 2];
    for (b, m) in means.iter().enumerate() {
        for i in 0..150 {
            let p: Vec<f64> = m.iter().map(|x| x + noise.sample(&mut rng)).collect();
            for d in 0..3 {
                blob_means[b][d] += p[d] / 150.0;
            }
            members.push(FeatureVector::new(format!("b{b}-{i}"), i as f64, p));
        }
    }
    let model = cluster_window(&members, 2, 5).unwrap();
    for bm in &blob_means {
        let near = model.centers().iter().map(|c| c.iter().zip(bm).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min);
        assert!(near < 0.1 * radius, "{near}");
    }
    assert!(model.clusters.iter().all(|c| c.members == 150));
    let lambdas: f64 = model.clusters.iter().map(|c| c.lambda).sum();
    assert!((lambdas - 1.0).abs() < 1e-12);
}

#[test]
fn fit_is_deterministic_and_order_free() {
    let v = Synthetic { windows: 1, planted: None, ..Default::default() }.generate();
    let a = cluster_window(&v, 5, 9).unwrap();
    assert_eq!(a, cluster_window(&v, 5, 9).unwrap());
    let mut rev = v.clone();
    rev.reverse();
    assert_eq!(a, cluster_window(&rev, 5, 9).unwrap());
}

#[test]
fn too_few_members_shrinks_k() {
    let m = cluster_window(&[fv(0.0, vec![1.0]), fv(1.0, vec![4.0])], 5, 1).unwrap();
    assert_eq!(m.k(), 2);
    assert!(m.clusters.iter().all(|c| c.variance > 0.0));
}

#[test]
fn fit_errors() {
    assert!(matches!(cluster_window(&[fv(0.0, vec![1.0])], 0, 1), Err(AngleError::ZeroK)));
    assert!(matches!(cluster_window(&[], 2, 1), Err(AngleError::EmptyModel)));
    assert!(matches!(
        cluster_window(&[fv(0.0, vec![1.0]), fv(0.0, vec![1.0, 2.0])], 1, 1),
        Err(AngleError::Dimension { .. })
    ));
}

#[test]
fn delta_examples() {
    let m = model_of(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![7.0, 7.0]]);
    assert_eq!(delta(&m, &m).unwrap(), 0.0);
    assert_eq!(delta(&model_of(&[vec![0.0, 0.0]]), &model_of(&[vec![3.0, 0.0]])).unwrap(), 9.0);
    assert!(matches!(delta_centers(&[], &[&[1.0][..]]), Err(AngleError::EmptyModel)));
}

#[test]
fn delta_matches_brute_force_for_three_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let got = delta(&model_of(&a), &model_of(&b)).unwrap();
        assert!((got - brute_delta(&a, &b)).abs() <= 1e-12 * got.max(1.0));
    }
}

#[test]
fn constant_series_raises_nothing() {
    let s = vec![Some(2.5); 40];
    assert!(detect_emergent(&s, 10, 3.0).is_empty());
}

#[test]
fn short_series_raises_nothing() {
    let mut s = vec![Some(1.0); 5];
    s.push(Some(1e9));
    assert!(detect_emergent(&s, 10, 3.0).is_empty());
}

#[test]
fn ten_sigma_spike_is_flagged_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let base = Normal::new(5.0, 0.2).unwrap();
    let mut s: Vec<Option<f64>> = (0..40).map(|_| Some(base.sample(&mut rng))).collect();
    // The statistic at 25 compares windows 25 and 26.
    s[25] = Some(5.0 + 10.0 * 0.2);
    let flags = detect_emergent(&s, 10, 3.0);
    assert_eq!(flags, vec![26]);
}

#[test]
fn planted_cluster_is_flagged_and_emergent() {
    let syn = Synthetic::default();
    let (at, planted) = syn.planted.clone().unwrap();
    let report = analyze(&syn.generate(), &AngleConfig::default()).unwrap();
    assert_eq!(report.flagged(), vec![at as i64]);
    let emergent = report.emergent();
    assert!(!emergent.is_empty());
    assert!(emergent
        .iter()
        .any(|c| c.center.iter().zip(&planted).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < 3.0 * syn.spread));
    // Points at the planted center score highest against the emergent set.
    let near = score(&planted, &emergent).unwrap();
    let far = score(&[0.0, 0.0], &emergent).unwrap();
    assert!(near > far);
}

#[test]
fn distributed_run_matches_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = local_cluster(3, dir.path()).unwrap();
    let syn = Synthetic { windows: 14, planted: Some((12, vec![30.0, -10.0])), ..Default::default() };
    let v = syn.generate();
    let cfg = AngleConfig { history: 5, ..Default::default() };
    let dist = angle_on_cluster(&c, &v, &cfg).unwrap();
    let local = analyze(&v, &cfg).unwrap();
    assert_eq!(dist.report, local);
    assert_eq!(dist.report.to_text(), local.to_text());
}

#[test]
fn score_examples() {
    let big = Cluster { center: vec![1.0, 1.0], variance: 0.5, weight: 0.7, lambda: 0.5, members: 7 };
    let small = Cluster { center: vec![4.0, 0.0], variance: 2.0, weight: 0.3, lambda: 0.5, members: 3 };
    assert_eq!(score(&[1.0, 1.0], &[big.clone(), small.clone()]).unwrap(), 0.7);

    let unit = Cluster { center: vec![0.0, 0.0], variance: 1.0, weight: 1.0, lambda: 1.0, members: 1 };
    let r = score(&[1.0, 1.0], &[unit]).unwrap();
    assert!((r - (-1.0f64).exp()).abs() < 1e-9);
    assert!((r - 0.367879).abs() < 1e-6);

    assert!(matches!(score(&[0.0], &[]), Err(AngleError::NoEmergent)));
    assert!(matches!(score(&[0.0], &[big]), Err(AngleError::Dimension { .. })));
}

#[test]
fn score_matches_independent_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let cs: Vec<Cluster> = (0..2)
            .map(|_| Cluster {
                center: (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                variance: rng.gen_range(0.1..4.0),
                weight: rng.gen_range(0.01..1.0),
                lambda: rng.gen_range(0.1..1.0),
                members: 1,
            })
            .collect();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let want = cs.iter().map(|c| rho_k(&x, c.weight, c.lambda, c.variance, &c.center)).fold(f64::NEG_INFINITY, f64::max);
        assert!((score(&x, &cs).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn feature_file_round_trip() {
    let v = Synthetic { windows: 2, planted: None, ..Default::default() }.generate();
    for delim in [',', '\t', ' '] {
        let text = write_features(&v, delim);
        assert_eq!(read_features(text.as_bytes(), delim).unwrap(), v);
    }
    let ragged = "a,0,1,2\nb,1,3\n";
    assert!(matches!(read_features(ragged.as_bytes(), ','), Err(AngleError::Parse { line: 2, .. })));
    let commented = "# entity,t,x\n\na,0,1\n";
    assert_eq!(read_features(commented.as_bytes(), ',').unwrap().len(), 1);
}

#[test]
fn report_has_one_line_per_window() {
    let syn = Synthetic::default();
    let report = analyze(&syn.generate(), &AngleConfig::default()).unwrap();
    let text = report.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), syn.windows);
    for (j, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 4, "{l}");
        assert_eq!(f[0], j.to_string());
        assert!(f[2] == "0" || f[2] == "1");
    }
    assert!(lines[21].starts_with("21\t") && lines[21].split('\t').nth(2) == Some("1"));
    assert_ne!(lines[21].split('\t').nth(3), Some("-"));
}

#[test]
fn empty_windows_are_kept() {
    let v = vec![fv(0.0, vec![0.0]), fv(1.0, vec![1.0]), fv(35.0, vec![2.0])];
    let r = analyze(&v, &AngleConfig { window_len: 10.0, k: 1, ..Default::default() }).unwrap();
    assert_eq!(r.windows.iter().map(|w| w.members).collect::<Vec<_>>(), vec![2, 0, 0, 1]);
    assert!(r.windows.iter().all(|w| w.delta.is_none()));
}

fn arb_centers(k: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, dim), 1..=k)
}

proptest! {
    #[test]
    fn delta_is_nonnegative_zero_on_self_and_order_free(a in arb_centers(6, 3), b in arb_centers(6, 3), rot in 0usize..6) {
        let ma = model_of(&a);
        let mb = model_of(&b);
        let d = delta(&ma, &mb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(delta(&ma, &ma).unwrap(), 0.0);
        let mut a2 = a.clone();
        a2.rotate_left(rot % a.len());
        let mut b2 = b.clone();
        b2.reverse();
        let d2 = delta(&model_of(&a2), &model_of(&b2)).unwrap();
        prop_assert!((d - d2).abs() <= 1e-9 * d.max(1.0));
        prop_assert!((d - brute_delta(&a, &b)).abs() <= 1e-9 * d.max(1.0));
    }

    #[test]
    fn score_is_bounded_and_falls_with_distance(
        theta in 0.01f64..1.0,
        lambda in 0.05f64..1.0,
        var in 0.1f64..10.0,
        r1 in 0.0f64..5.0,
        extra in 0.001f64..5.0,
    ) {
        let c = Cluster { center: vec![0.0, 0.0], variance: var, weight: theta, lambda, members: 1 };
        let near = cluster_score(&[r1, 0.0], &c);
        let far = cluster_score(&[r1 + extra, 0.0], &c);
        prop_assert!(near > 0.0 && near <= theta);
        prop_assert!(far <= near);
        let other = Cluster { center: vec![3.0, 3.0], variance: 1.0, weight: theta / 2.0, lambda, members: 1 };
        let r = score(&[r1, 0.0], &[c, other]).unwrap();
        prop_assert!(r > 0.0 && r <= theta);
    }

    #[test]
    fn partition_conserves_and_places_by_floor(
        ts in proptest::collection::vec(-5_000.0f64..5_000.0, 0..200),
        d in 0.5f64..700.0,
        t0 in -100.0f64..100.0,
    ) {
        let v: Vec<FeatureVector> = ts.iter().map(|&t| fv(t, vec![t])).collect();
        let w = window_partition(&v, d, t0).unwrap();
        prop_assert_eq!(w.iter().map(|w| w.members.len()).sum::<usize>(), v.len());
        for pair in w.windows(2) {
            prop_assert_eq!(pair[1].index, pair[0].index + 1);
        }
        for win in &w {
            prop_assert_eq!(win.start, t0 + win.index as f64 * d);
            for m in &win.members {
                prop_assert_eq!(((m.timestamp - t0) / d).floor() as i64, win.index);
            }
        }
    }

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>(), n in 1usize..120, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<FeatureVector> = (0..n)
            .map(|i| FeatureVector::new(format!("p{i}"), i as f64, (0..2).map(|_| rng.gen_range(-20.0..20.0)).collect()))
            .collect();
        let m = cluster_window(&v, k, seed).unwrap();
        prop_assert!(m.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{:?}", m.objective);
        prop_assert!(m.iterations <= 100);
        prop_assert!(m.clusters.iter().all(|c| c.variance > 0.0));
        let total: usize = m.clusters.iter().map(|c| c.members).sum();
        prop_assert_eq!(total, n);
    }
}
