use proptest::prelude::*;
use routelens_core::kmeans::kmeans;
use routelens_core::layout::{
    build_flow_graph, count_crossings, frequency_layout, sugiyama_layout,
};
use routelens_core::matrix::dot;
use routelens_core::paths::ExpertPath;
use routelens_core::{router_basis, CounterRng, Matrix, DEFAULT_SV_CUTOFF};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = CounterRng::new(seed, 1);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channels_reconstruct_and_split_orthogonally(
        n in 1usize..24, d in 2usize..48, tokens in 1usize..20, seed in any::<u64>(), scale in 1e-3f32..1e3,
    ) {
        let r = gaussian(n, d, seed);
        let mut h = gaussian(tokens, d, seed ^ 0xabc);
        h.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
        let basis = router_basis(&r, DEFAULT_SV_CUTOFF).unwrap();
        let ch = basis.batch_decompose(&h).unwrap();
        for t in 0..tokens {
            let (hv, vv, bv) = (h.row(t), ch.visible.row(t), ch.blind.row(t));
            let hn = dot(hv, hv).sqrt().max(1e-30);
            for i in 0..d {
                prop_assert!(((vv[i] + bv[i]) - hv[i]).abs() as f64 <= 1e-5 * hn);
            }
            prop_assert!(dot(vv, bv).abs() <= 1e-4 * hn * hn);
            // The router cannot see the blind part.
            for e in 0..n {
                prop_assert!(dot(r.row(e), bv).abs() <= 1e-4 * hn * dot(r.row(e), r.row(e)).sqrt());
            }
        }
    }

    #[test]
    fn projector_is_symmetric_and_idempotent(n in 1usize..20, d in 2usize..40, seed in any::<u64>()) {
        let p = router_basis(&gaussian(n, d, seed), DEFAULT_SV_CUTOFF).unwrap().projector();
        let pp = p.matmul(&p);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((p.get(i, j) - p.get(j, i)).abs() < 1e-5);
                prop_assert!((pp.get(i, j) - p.get(i, j)).abs() < 1e-4);
            }
        }
        let trace: f64 = (0..d).map(|i| p.get(i, i) as f64).sum();
        prop_assert!((trace - n.min(d) as f64).abs() < 1e-3);
    }

    #[test]
    fn kmeans_objective_never_increases(rows in 5usize..200, k in 1usize..6, seed in any::<u64>()) {
        let data = gaussian(rows, 3, seed);
        let fit = kmeans(&data, k.min(rows), seed, 50).unwrap();
        for w in fit.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9);
        }
        prop_assert!(fit.assignments.iter().all(|&a| (a as usize) < k.min(rows)));
    }

    #[test]
    fn layout_is_bijective_and_never_worse(
        seed in any::<u64>(), layers in 2usize..6, width in 2usize..12, n in 1usize..300, sweeps in 1usize..4,
    ) {
        let mut rng = CounterRng::new(seed, 3);
        let paths: Vec<ExpertPath> = (0..n)
            .map(|_| ExpertPath {
                band: (0, layers as u32 - 1),
                experts: (0..layers).map(|_| rng.below(width as u64) as u16).collect(),
            })
            .collect();
        let ids: Vec<u32> = (0..layers as u32).collect();
        let g = build_flow_graph(&paths, &ids, &vec![width; layers]).unwrap();
        let init = frequency_layout(&g);
        let swept = sugiyama_layout(&g, sweeps).unwrap();
        prop_assert!(swept.is_bijective());
        prop_assert!(count_crossings(&g, &swept).unwrap() <= count_crossings(&g, &init).unwrap());
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = CounterRng::new(seed, stream);
        let mut b = CounterRng::new(seed, stream);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        let x = CounterRng::new(seed, stream).sample_without_replacement(50, 20);
        let mut sorted = x.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), 20);
    }
}
