mod common;

use common::{naive_dirs, naive_order, rng, uniform};
use proptest::prelude::*;
use vcmamba::scan::{all_paths, gather, generate_path, invert_path, scatter, GridShape, PathId};
use vcmamba::Tensor;

fn codes(p: &vcmamba::scan::PathOrder) -> Vec<u8> {
    p.dirs.iter().map(|d| d.code()).collect()
}

#[test]
fn every_grid_up_to_16_matches_definition_and_invariants() {
    for h in 1..=16 {
        for w in 1..=16 {
            let grid = GridShape::new(h, w).unwrap();
            for (k, id) in PathId::ALL.into_iter().enumerate() {
                let p = generate_path(grid, id);
                let expected = naive_order(h, w, k);
                assert_eq!(&p.order[..], &expected[..], "{h}x{w} {id}");
                // permutation
                let mut seen = vec![false; h * w];
                for &o in p.order.iter() {
                    assert!(!seen[o], "{h}x{w} {id}: repeated {o}");
                    seen[o] = true;
                }
                // adjacency and direction labels, both implied by naive_dirs
                assert_eq!(codes(&p), naive_dirs(&expected, w), "{h}x{w} {id}");
                let inv = invert_path(&p.order);
                for (j, &o) in p.order.iter().enumerate() {
                    assert_eq!(inv[o], j);
                }
            }
        }
    }
}

#[test]
fn reversed_variants_and_distinctness() {
    for h in 1..=9 {
        for w in 1..=9 {
            let [a, b, c, d] = all_paths(GridShape::new(h, w).unwrap());
            let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
            assert_eq!(&b.order[..], &rev(&a.order)[..]);
            assert_eq!(&d.order[..], &rev(&c.order)[..]);
            if h > 1 && w > 1 {
                let all = [&a.order, &b.order, &c.order, &d.order];
                for i in 0..4 {
                    for j in i + 1..4 {
                        assert_ne!(all[i], all[j], "{h}x{w} paths {i} {j}");
                    }
                }
            }
        }
    }
}

#[test]
fn small_grid_examples() {
    let g = GridShape::new(2, 2).unwrap();
    let p = generate_path(g, PathId::RowSnakeTL);
    assert_eq!(&p.order[..], &[0, 1, 3, 2]);
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[10.0, 11.0, 12.0, 13.0]).unwrap();
    assert_eq!(gather(&x, &p).unwrap().data(), &[10.0, 11.0, 13.0, 12.0]);

    let one = GridShape::new(1, 1).unwrap();
    let x = Tensor::<f64>::from_f64(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    for p in all_paths(one) {
        assert_eq!(gather(&x, &p).unwrap(), x.clone().reshape(&[2, 3, 1]).unwrap());
    }
}

#[test]
fn mismatched_grid_is_rejected() {
    let p = generate_path(GridShape::new(3, 3).unwrap(), PathId::ColSnakeBR);
    let x = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
    assert!(gather(&x, &p).is_err());
    assert!(scatter(&Tensor::<f64>::zeros(&[1, 2, 8]), &p).is_err());
    assert!(GridShape::new(0, 4).is_err());
}

proptest! {
    #[test]
    fn gather_scatter_roundtrip_is_exact(h in 1usize..12, w in 1usize..12, b in 1usize..3, d in 1usize..5, seed in any::<u64>()) {
        let x = uniform(&[b, d, h, w], -1e3, 1e3, &mut rng(seed));
        for p in all_paths(GridShape::new(h, w).unwrap()) {
            let back = scatter(&gather(&x, &p).unwrap(), &p).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn consecutive_tokens_are_neighbours(h in 1usize..40, w in 1usize..40) {
        for p in all_paths(GridShape::new(h, w).unwrap()) {
            for pair in p.order.windows(2) {
                let (r0, c0) = p.grid.position(pair[0]);
                let (r1, c1) = p.grid.position(pair[1]);
                prop_assert_eq!(r0.abs_diff(r1) + c0.abs_diff(c1), 1);
            }
        }
    }
}
