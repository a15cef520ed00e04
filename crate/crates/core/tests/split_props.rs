mod common;

use common::gaussian;
use frugal_core::linalg::Matrix;
use frugal_core::projection::{build_projector, split_gradient, ProjectionKind, Projector};
use proptest::prelude::*;

fn projector_for(kind: ProjectionKind, g: &Matrix, rho: f64, seed: u64) -> Projector {
    match kind {
        ProjectionKind::Blocks => {
            let active: Vec<usize> = if seed.is_multiple_of(2) { vec![0] } else { vec![1, 2] };
            Projector::block(&active, 0, g.shape(), 0)
        }
        k => build_projector(k, g, rho, seed, 0).unwrap(),
    }
}

fn check_split(p: &Projector, g: &Matrix) -> Result<(), TestCaseError> {
    let s = split_gradient(p, g).unwrap();
    let up = p.proj_up(&s.g_full).unwrap();
    let rebuilt = up.add(&s.g_free).unwrap();
    prop_assert!(rebuilt.max_abs_diff(g).unwrap() <= 1e-10);
    let total = g.norm_sq();
    let parts = up.norm_sq() + s.g_free.norm_sq();
    prop_assert!((total - parts).abs() <= 1e-9 * total.max(f64::MIN_POSITIVE));
    prop_assert!(up.dot(&s.g_free).unwrap().abs() <= 1e-9 * total.max(f64::MIN_POSITIVE));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_reconstructs_and_is_orthogonal(
        rows in 1usize..9,
        cols in 1usize..9,
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
        kind_idx in 0usize..5,
    ) {
        let kind = ProjectionKind::ALL[kind_idx];
        let g = gaussian(seed, rows, cols);
        let p = projector_for(kind, &g, rho, seed);
        check_split(&p, &g)?;
    }

    #[test]
    fn proj_up_is_adjoint_of_proj_down(
        rows in 1usize..7,
        cols in 1usize..7,
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
        kind_idx in 0usize..5,
    ) {
        let kind = ProjectionKind::ALL[kind_idx];
        let g = gaussian(seed, rows, cols);
        let p = projector_for(kind, &g, rho, seed);
        let (lr, lc) = p.projected_shape();
        let x = gaussian(seed ^ 1, lr, lc);
        let y = gaussian(seed ^ 2, rows, cols);
        let lhs = p.proj_up(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&p.proj_down(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn orthonormal_kinds_invert_on_low_dimension(
        rows in 1usize..8,
        cols in 1usize..8,
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
        svd in any::<bool>(),
    ) {
        let kind = if svd { ProjectionKind::Svd } else { ProjectionKind::RandomOrtho };
        let g = gaussian(seed, rows, cols);
        let p = build_projector(kind, &g, rho, seed, 0).unwrap();
        let (lr, lc) = p.projected_shape();
        let x = gaussian(seed ^ 3, lr, lc);
        let back = p.proj_down(&p.proj_up(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap_or(0.0) <= 1e-10);
    }
}

#[test]
fn hundred_gradients_per_kind() {
    for kind in ProjectionKind::ALL {
        for seed in 0..100u64 {
            let g = gaussian(seed, 3 + seed as usize % 5, 2 + seed as usize % 7);
            let p = projector_for(kind, &g, 0.3, seed);
            check_split(&p, &g).unwrap();
        }
    }
}

#[test]
fn columns_selection_is_reproducible() {
    let g = gaussian(0, 3, 8);
    let a = build_projector(ProjectionKind::Columns, &g, 0.25, 17, 0).unwrap();
    let b = build_projector(ProjectionKind::Columns, &g, 0.25, 17, 0).unwrap();
    assert!(a.same_subspace(&b));
    assert_eq!(a.projected_shape(), (3, 2));
}
