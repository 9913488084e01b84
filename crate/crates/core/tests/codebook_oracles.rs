mod common;

use vqqat_core::codebook::{group, init_codebook, utilization, Codebook, Metric};
use vqqat_core::data::make_weight_vectors;
use vqqat_core::numerics::{kmeans, kmeans_plus_plus_init, KMeansOptions, Rng};

#[test]
fn kmeans_distortion_never_increases_and_matches_naive_lloyd() {
    for seed in 0..50u64 {
        let mut data_rng = Rng::new(1000 + seed);
        let dim = 2 + (seed as usize % 4);
        let n = 300;
        let k = 4 + (seed as usize % 13);
        let points: Vec<f64> = (0..n * dim).map(|_| data_rng.normal()).collect();

        let res = kmeans(&points, dim, k, &mut Rng::new(seed), &KMeansOptions::default()).unwrap();
        for w in res.distortion_history.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: distortion rose {} -> {}", w[0], w[1]);
        }

        let init = kmeans_plus_plus_init(&points, dim, k, &mut Rng::new(seed)).unwrap();
        let reference = common::naive_lloyd(&points, dim, init, 100);
        let ours = res.distortion();
        assert!(
            (ours - reference).abs() <= 0.05 * reference,
            "seed {seed}: {ours} vs naive {reference}"
        );
    }
}

#[test]
fn l2_assignment_matches_brute_force_with_ties() {
    let mut rng = Rng::new(77);
    for case in 0..10_000 {
        let l = 1 + rng.below(4);
        let bits = rng.below(4) as u32;
        let n = 1usize << bits;
        // Small integers make exact distance ties common.
        let mut entries: Vec<f64> = (0..n * l).map(|_| rng.below(5) as f64 - 2.0).collect();
        if n > 1 && case % 3 == 0 {
            // Duplicate a codeword to force an exact tie.
            let (a, b) = (rng.below(n), rng.below(n));
            let src: Vec<f64> = entries[a * l..(a + 1) * l].to_vec();
            entries[b * l..(b + 1) * l].copy_from_slice(&src);
        }
        let w: Vec<f64> = if case % 2 == 0 {
            (0..l).map(|_| rng.below(5) as f64 - 2.0).collect()
        } else if n > 1 {
            // Midpoint of two codewords: equidistant by construction.
            let (a, b) = (rng.below(n), rng.below(n));
            (0..l).map(|j| 0.5 * (entries[a * l + j] + entries[b * l + j])).collect()
        } else {
            (0..l).map(|_| rng.normal()).collect()
        };
        let cb = Codebook::new(entries.clone(), l, bits, Metric::L2).unwrap();
        assert_eq!(cb.assign(&w).unwrap(), common::brute_force_l2(&w, &entries, l), "case {case}");
    }
}

/// Cosine-minus-L2 assignment entropy after k-means init, per seed.
fn entropy_margins(seeds: u64) -> Vec<f64> {
    (0..seeds)
        .map(|seed| {
            let mut rng = Rng::new(seed);
            let w = make_weight_vectors(10_000, 2, true, 0.0, 1.0, &mut rng);
            let gw = group(&w, &[w.len()], 2).unwrap();
            let mut h = [0.0; 2];
            for (slot, metric) in [Metric::Cosine, Metric::L2].into_iter().enumerate() {
                let cb = init_codebook(&gw, 4, metric, &mut Rng::new(seed).substream(&[slot as u64])).unwrap();
                let u = utilization(&cb, &gw).unwrap();
                assert!((u.entropy - common::entropy(&u.counts)).abs() < 1e-12);
                h[slot] = u.entropy;
            }
            h[0] - h[1]
        })
        .collect()
}

#[test]
fn cosine_metric_spreads_assignments_more_than_l2() {
    let margins = entropy_margins(20);
    let t = common::one_sided_t(&margins);
    println!(
        "entropy margin (cosine - L2): mean {:.4} nats, std {:.4}, t {:.2}, p {:.2e}",
        t.mean, t.std, t.t, t.p
    );
    assert!(t.mean > 0.0);
    assert!(t.p < 0.05);
}
