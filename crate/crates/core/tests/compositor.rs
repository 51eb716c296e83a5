use collage_core::compositor::{cg_solve, poisson_blend, BlendProblem, SolverConfig};
use collage_core::CollageError;
use collage_tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_interior_mask(h: usize, w: usize, density: f64, r: &mut ChaCha8Rng) -> Tensor {
    let mut m = Tensor::zeros(vec![h, w]);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if r.random::<f64>() < density {
                m.set(&[y, x], 1.0);
            }
        }
    }
    m
}

/// Assembles the discrete Poisson system densely from its definition and
/// solves it by LU factorization.
fn dense_oracle(p: &BlendProblem) -> Tensor {
    let (c, h, w) = (p.destination.shape()[0], p.destination.shape()[1], p.destination.shape()[2]);
    let inside: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| p.mask.get(&[y, x]) == 1.0).collect();
    let n = inside.len();
    let mut out = p.destination.clone();
    if n == 0 {
        return out;
    }
    let position = |y: usize, x: usize| inside.iter().position(|&q| q == (y, x));
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, &(y, x)) in inside.iter().enumerate() {
        a[(i, i)] = 4.0;
        for (qy, qx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
            if let Some(j) = position(qy, qx) {
                a[(i, j)] = -1.0;
            }
        }
    }
    let lu = a.lu();
    for ch in 0..c {
        let b = DVector::from_iterator(
            n,
            inside.iter().map(|&(y, x)| {
                let mut v = 0.0;
                for (qy, qx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                    v += p.source.get(&[ch, y, x]) - p.source.get(&[ch, qy, qx]);
                    if position(qy, qx).is_none() {
                        v += p.destination.get(&[ch, qy, qx]);
                    }
                }
                v
            }),
        );
        let f = lu.solve(&b).expect("Poisson system is nonsingular");
        for (i, &(y, x)) in inside.iter().enumerate() {
            out.set(&[ch, y, x], f[i].clamp(0.0, 1.0));
        }
    }
    out
}

#[test]
fn random_problems_match_the_dense_direct_solve() {
    let mut r = rng(11);
    for case in 0..20 {
        let mask = random_interior_mask(8, 8, 0.3 + 0.6 * r.random::<f64>(), &mut r);
        let p = BlendProblem {
            source: Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut r),
            destination: Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut r),
            mask,
        };
        let got = poisson_blend(&p, &SolverConfig::default()).unwrap();
        let diff = got.max_abs_diff(&dense_oracle(&p));
        assert!(diff < 1e-5, "case {case}: max abs diff {diff:e}");
    }
}

#[test]
fn empty_mask_returns_the_destination_exactly() {
    let mut r = rng(12);
    let p = BlendProblem {
        source: Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut r),
        destination: Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut r),
        mask: Tensor::zeros(vec![8, 8]),
    };
    assert_eq!(poisson_blend(&p, &SolverConfig::default()).unwrap(), p.destination);
}

#[test]
fn single_pixel_has_the_closed_form_value() {
    let mut r = rng(13);
    for _ in 0..10 {
        let source = Tensor::uniform(vec![1, 5, 5], 0.3, 0.7, &mut r);
        let destination = Tensor::uniform(vec![1, 5, 5], 0.3, 0.7, &mut r);
        let mut mask = Tensor::zeros(vec![5, 5]);
        mask.set(&[2, 2], 1.0);
        let p = BlendProblem { source: source.clone(), destination: destination.clone(), mask };
        let got = poisson_blend(&p, &SolverConfig::default()).unwrap();
        // Every neighbor is fixed, so 4f = 4s - Σ s_q + Σ d_q.
        let mut v = 4.0 * source.get(&[0, 2, 2]);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            v -= source.get(&[0, y, x]);
            v += destination.get(&[0, y, x]);
        }
        assert_eq!(got.get(&[0, 2, 2]), (0.25 * v).clamp(0.0, 1.0));
        let mut outside = got.clone();
        outside.set(&[0, 2, 2], destination.get(&[0, 2, 2]));
        assert_eq!(outside, destination);
    }
}

#[test]
fn identical_source_and_destination_is_a_fixed_point() {
    let mut r = rng(14);
    let img = Tensor::uniform(vec![3, 10, 10], 0.0, 1.0, &mut r);
    let mask = random_interior_mask(10, 10, 0.8, &mut r);
    let p = BlendProblem { source: img.clone(), destination: img.clone(), mask };
    assert!(poisson_blend(&p, &SolverConfig::default()).unwrap().max_abs_diff(&img) < 1e-7);
}

#[test]
fn flat_source_obeys_the_maximum_principle() {
    let mut r = rng(15);
    let mut mask = Tensor::zeros(vec![9, 9]);
    for y in 2..7 {
        for x in 2..7 {
            mask.set(&[y, x], 1.0);
        }
    }
    let p = BlendProblem {
        source: Tensor::full(vec![1, 9, 9], 0.5),
        destination: Tensor::uniform(vec![1, 9, 9], 0.2, 0.9, &mut r),
        mask: mask.clone(),
    };
    let got = poisson_blend(&p, &SolverConfig::default()).unwrap();
    let touches = |y: usize, x: usize| [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(a, b)| mask.get(&[a, b]) == 1.0);
    let ring: Vec<f64> = (1..8)
        .flat_map(|y| (1..8).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(&[y, x]) == 0.0 && touches(y, x))
        .map(|(y, x)| p.destination.get(&[0, y, x]))
        .collect();
    assert_eq!(ring.len(), 20);
    let (lo, hi) = ring.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for y in 2..7 {
        for x in 2..7 {
            let v = got.get(&[0, y, x]);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "({y},{x}) = {v} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn shifted_source_levels_are_removed() {
    let mut r = rng(16);
    let dst = Tensor::uniform(vec![1, 8, 8], 0.3, 0.6, &mut r);
    let src: Tensor = Tensor::new(vec![1, 8, 8], dst.data().iter().map(|v| v + 0.25).collect()).unwrap();
    let mask = random_interior_mask(8, 8, 0.7, &mut r);
    let p = BlendProblem { source: src, destination: dst.clone(), mask };
    assert!(poisson_blend(&p, &SolverConfig::default()).unwrap().max_abs_diff(&dst) < 1e-7);
}

#[test]
fn cg_matches_dense_solve_on_random_spd_systems() {
    let mut r = rng(17);
    for n in [1, 2, 5, 12, 30] {
        let m = DMatrix::from_fn(n, n, |_, _| r.random::<f64>() - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let b = DVector::from_fn(n, |_, _| r.random::<f64>() - 0.5);
        let expect = a.clone().lu().solve(&b).unwrap();
        let cfg = SolverConfig { tolerance: 1e-12, max_iterations: 10 * n };
        let (x, rep) = cg_solve(
            |x, y| {
                let v = &a * DVector::from_column_slice(x);
                y.copy_from_slice(v.as_slice());
            },
            b.as_slice(),
            &cfg,
        )
        .unwrap();
        assert!(rep.residual <= 1e-12);
        let err = x.iter().zip(expect.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8 * expect.amax().max(1.0), "n={n}: {err:e}");
    }
}

#[test]
fn indefinite_operators_are_reported() {
    let err = cg_solve(|x, y| y.iter_mut().zip(x).for_each(|(o, v)| *o = -v), &[1.0, 1.0], &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, CollageError::Validation(_)));
}

#[test]
fn malformed_problems_are_rejected() {
    let img = Tensor::zeros(vec![3, 6, 6]);
    let mut soft = Tensor::zeros(vec![6, 6]);
    soft.set(&[2, 2], 0.5);
    let cases = [
        BlendProblem { source: img.clone(), destination: img.clone(), mask: soft },
        BlendProblem { source: Tensor::zeros(vec![3, 6, 5]), destination: img.clone(), mask: Tensor::zeros(vec![6, 6]) },
        BlendProblem { source: img.clone(), destination: img.clone(), mask: Tensor::zeros(vec![5, 6]) },
    ];
    for p in cases {
        assert!(matches!(poisson_blend(&p, &SolverConfig::default()), Err(CollageError::Validation(_))));
    }
}
