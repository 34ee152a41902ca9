use ampsim_core::sem::{parse_spec, EdgeSpec, ErrorDistribution, LinearSem, NodeSpec};
use ampsim_core::simulate::{
    draw_dataset, latent_threshold_intercept, Dataset, SeedPolicy, LATENT_SUFFIX,
};
use ampsim_core::stats::{self, batch_mean_se, normal_cdf};
use rayon::prelude::*;

const FOUR_NODE: &str = include_str!("../../../configs/four_node.json");

fn centered(x: &[f64]) -> Vec<f64> {
    let m = stats::mean(x);
    x.iter().map(|v| v - m).collect()
}

fn check_covariance(sem: &LinearSem, ds: &Dataset) {
    let pop = sem.population_covariance().unwrap();
    for a in &pop.names {
        for b in &pop.names {
            let (x, y) = (
                centered(ds.column(a).unwrap()),
                centered(ds.column(b).unwrap()),
            );
            let prods: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
            let (m, se) = batch_mean_se(&prods, 50);
            let want = pop.get(a, b).unwrap();
            assert!(
                (m - want).abs() <= 5.0 * se + 1e-12,
                "cov({a},{b}) = {m} vs {want} (se {se})"
            );
        }
    }
}

#[test]
fn sample_covariance_matches_population() {
    let sem = parse_spec(FOUR_NODE).unwrap();
    let ds = draw_dataset(&sem, 100_000, SeedPolicy::new(11, 0)).unwrap();
    check_covariance(&sem, &ds);
    for node in sem.nodes() {
        let col = ds.column(&node.name).unwrap();
        let (m, se) = batch_mean_se(col, 50);
        assert!((m - node.mean).abs() <= 5.0 * se, "mean of {}", node.name);
    }
}

#[test]
fn uniform_errors_share_the_moments() {
    let sem = parse_spec(FOUR_NODE)
        .unwrap()
        .with_error_distribution(ErrorDistribution::UniformRescaled);
    let ds = draw_dataset(&sem, 100_000, SeedPolicy::new(12, 0)).unwrap();
    check_covariance(&sem, &ds);
    // Root errors are bounded by sqrt(3) times their sd.
    let bav = ds.column("BAV").unwrap();
    assert!(bav.iter().all(|v| v.abs() <= 3f64.sqrt()));
}

#[test]
fn binary_threshold_share_matches_intercept() {
    let p = 0.3;
    let alpha = latent_threshold_intercept(p).unwrap();
    let sem = LinearSem::new(
        vec![
            NodeSpec::new("U", 1.0),
            NodeSpec::new("A", 1.0).with_mean(alpha).binary_threshold(),
            NodeSpec::new("Y", 1.0).free().with_error_variance(1.0),
        ],
        vec![
            EdgeSpec::new("U", "A", 0.5),
            EdgeSpec::new("A", "Y", 0.4),
            EdgeSpec::new("U", "Y", 0.2),
        ],
        ErrorDistribution::Normal,
    )
    .unwrap()
    .solve_error_variances()
    .unwrap();
    assert!((normal_cdf(alpha) - p).abs() < 1e-12);
    let ds = draw_dataset(&sem, 100_000, SeedPolicy::new(13, 0)).unwrap();
    let a = ds.column("A").unwrap();
    let latent = ds.column(&format!("A{LATENT_SUFFIX}")).unwrap();
    assert_eq!(ds.is_observed(&format!("A{LATENT_SUFFIX}")), Some(false));
    for (b, l) in a.iter().zip(latent) {
        assert_eq!(*b, if *l > 0.0 { 1.0 } else { 0.0 });
    }
    let (m, se) = batch_mean_se(a, 50);
    assert!((m - p).abs() <= 5.0 * se, "{m} vs {p}");
    let (v, se) = batch_mean_se(
        &centered(latent).iter().map(|x| x * x).collect::<Vec<_>>(),
        50,
    );
    assert!((v - 1.0).abs() <= 5.0 * se);
}

#[test]
fn datasets_are_identical_across_thread_counts() {
    let sem = parse_spec(FOUR_NODE).unwrap();
    let draw_all = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                (0..12usize)
                    .into_par_iter()
                    .rev()
                    .map(|r| draw_dataset(&sem, 300, SeedPolicy::new(5, r as u64)).unwrap())
                    .collect::<Vec<_>>()
            })
    };
    let one = draw_all(1);
    let many = draw_all(4);
    assert_eq!(one, many);
    let again = draw_dataset(&sem, 300, SeedPolicy::new(5, 11)).unwrap();
    assert_eq!(again, one[0]);
    assert_ne!(one[0], one[1]);
    let p = one[3].provenance().unwrap();
    assert_eq!((p.base_seed, p.replicate_index), (5, 8));
    assert_eq!(p.sem_hash, sem.fingerprint());
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let sem = parse_spec(FOUR_NODE).unwrap();
    let ds = draw_dataset(&sem, 50, SeedPolicy::new(1, 2)).unwrap();
    let back = Dataset::read_csv(ds.to_csv_string().as_bytes()).unwrap();
    for name in ds.names() {
        assert_eq!(back.column(name), ds.column(name));
    }
}
