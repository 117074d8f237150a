use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pslfm::assignment::{build_strata_design, StrataSpec};
use pslfm::engine::summarize_trace;
use pslfm::exec::{map_indexed_with, ExecMode};
use pslfm::panel::{read_panel_csv, ColumnMap, PanelDataset};
use pslfm::rotation::{rotate_to_normalization, FactorBlock};
use pslfm::simulation::{Estimate, McStudyResult, Replication};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn factor_block() -> impl Strategy<Value = FactorBlock> {
    (1usize..=4, 0usize..30, 0usize..40).prop_flat_map(|(r, dn, dt)| {
        let (n, t) = (r + 5 + dn, r + 5 + dt);
        (
            matrix(n, r),
            matrix(t, r),
            prop::collection::vec(0.3f64..3.0, r),
        )
            .prop_map(|(l, f, s)| FactorBlock::new(l, f, DVector::from_vec(s)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_keeps_common_component(block in factor_block()) {
        let out = rotate_to_normalization(&block).unwrap();
        let before = &block.factors_raw * DMatrix::from_diagonal(&block.scale) * block.loadings_raw.transpose();
        let after = &out.factors * out.loadings.transpose();
        prop_assert!((&after - &before).norm() <= 1e-10 * before.norm());
        let t = block.factors_raw.nrows() as f64;
        let r = block.n_factors();
        let ff = out.factors.tr_mul(&out.factors) / t;
        prop_assert!((ff - DMatrix::<f64>::identity(r, r)).amax() <= 1e-8);
        prop_assert!(out.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn strata_design_is_block_sparse(
        z in matrix(12, 3),
        scores in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let spec = StrataSpec::new(vec![0.3, 0.6]).unwrap();
        let d = build_strata_design(&z, &scores, &spec);
        prop_assert_eq!(d.width(), 9);
        for i in 0..12 {
            let g = spec.stratum_of(scores[i]);
            prop_assert_eq!(d.stratum[i], g);
            prop_assert_eq!(d.segments[i].offset, 3 * g);
            for j in 0..9 {
                let expect = if j / 3 == g { z[(i, j % 3)] } else { 0.0 };
                prop_assert_eq!(d.design[(i, j)], expect);
            }
        }
    }

    #[test]
    fn rmse_decomposes(points in prop::collection::vec(-2.0f64..2.0, 2..60), truth in -1.0f64..1.0) {
        let reps: Vec<Replication> = points
            .iter()
            .enumerate()
            .map(|(rep, &p)| Replication {
                rep,
                estimate: Estimate { point: p, lower: p - 0.5, upper: p + 0.5 },
                truth,
            })
            .collect();
        let res = McStudyResult::from_replications("x".into(), reps, vec![]);
        prop_assert!((res.rmse.powi(2) - res.bias.powi(2) - res.sampling_sd.powi(2)).abs() <= 1e-10);
        prop_assert!(res.rmse + 1e-12 >= res.bias.abs());
        prop_assert!((0.0..=1.0).contains(&res.coverage));
    }

    #[test]
    fn panel_csv_round_trip(
        y in matrix(6, 5),
        x in matrix(6, 2),
        adopt in prop::collection::vec(2usize..=6, 5),
    ) {
        // unit 5 stays untreated
        let mut adoption = adopt;
        adoption.push(6);
        let data = PanelDataset::from_adoption(y, adoption, x, vec!["a".into(), "b".into()], true).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice(), &ColumnMap::default()).unwrap();
        prop_assert_eq!(back.outcome(), data.outcome());
        prop_assert_eq!(back.treatment(), data.treatment());
        prop_assert_eq!(back.covariates(), data.covariates());
        prop_assert_eq!(back.adoption(), data.adoption());
    }

    #[test]
    fn credible_interval_is_ordered(x in prop::collection::vec(-5.0f64..5.0, 1..200), level in 0.5f64..0.99) {
        let (mean, sd, lo, hi) = summarize_trace(&x, level).unwrap();
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
        prop_assert!(min - 1e-12 <= mean && mean <= max + 1e-12);
        prop_assert!(sd >= 0.0);
    }

    #[test]
    fn execution_modes_agree(n in 0usize..50) {
        let f = |i: usize| (i as f64).sqrt().to_bits();
        prop_assert_eq!(map_indexed_with(ExecMode::Sequential, n, f), map_indexed_with(ExecMode::Parallel, n, f));
    }
}
