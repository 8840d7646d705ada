use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::frf::{build_training_set, default_population, synthesize_population};
use crate::gp::{KernelParams, MeanParams, Sign};
use crate::omgp::Component;

const BAND: Band = Band { low: 48.0, high: 56.0 };

fn part_model(ts: &TrainingSet, part: Part, y: &[f64]) -> OmgpModel {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let comps = default_population()
        .iter()
        .map(|s| Component {
            kernel: KernelParams { signal_variance: (0.02 * peak).powi(2), lengthscale: 1.0 },
            mean: MeanParams {
                natural_frequency_hz: s.modes[0].natural_frequency_hz,
                damping_ratio: s.modes[0].damping_ratio,
                residue: s.modes[0].residue,
                part,
                sign: Sign::Positive,
            },
        })
        .collect();
    let mut m = OmgpModel::new(ts.x.clone(), y.to_vec(), part, comps, 0.03 * peak, Boxes::for_data(y, BAND)).unwrap();
    m.e_step(5).unwrap();
    m
}

/// A form built from the generating hyperparameters, no fitting.
fn fixture() -> &'static (FormPair, FrfDataset) {
    static CELL: OnceLock<(FormPair, FrfDataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = synthesize_population(&default_population(), BAND, 81).unwrap();
        let ts = build_training_set(&data, 20, 0.05, 600, 1).unwrap();
        let real = part_model(&ts, Part::Real, &ts.y_real);
        let imag = part_model(&ts, Part::Imaginary, &ts.y_imag);
        (FormPair::new(real, imag, BAND).unwrap(), data)
    })
}

fn calibration() -> &'static Calibration {
    static CELL: OnceLock<Calibration> = OnceLock::new();
    CELL.get_or_init(|| {
        let (form, data) = fixture();
        mc_threshold(form, data, 200, 5, 0.99, 0.05, 11).unwrap()
    })
}

#[test]
fn index_is_the_sum_of_part_indices() {
    let (form, data) = fixture();
    let r = &data.records[2];
    let rep = form.novelty_index(r, 0.0).unwrap();
    let re = form.real.log_evidence(&r.frequency_hz, &r.real).unwrap();
    let im = form.imag.log_evidence(&r.frequency_hz, &r.imag).unwrap();
    assert!((rep.index - (-re - im)).abs() <= 1e-12 * rep.index.abs());
}

#[test]
fn posterior_mean_record_is_inlying() {
    let (form, data) = fixture();
    let grid = &data.records[0].frequency_hz;
    let re = form.real.predict(grid).unwrap();
    let im = form.imag.predict(grid).unwrap();
    let t = calibration().threshold.value;
    for k in 0..form.k() {
        let values: Vec<_> = (0..grid.len())
            .map(|j| num_complex::Complex64::new(re[k].mean[j], im[k].mean[j]))
            .collect();
        let record = FrfRecord::from_complex(grid.clone(), &values, None);
        let rep = form.novelty_index(&record, t).unwrap();
        assert!(!rep.outlying, "component {k}: {} > {t}", rep.index);
        let best = (0..form.k())
            .max_by(|a, b| rep.per_component_log_posterior[*a].total_cmp(&rep.per_component_log_posterior[*b]))
            .unwrap();
        assert_eq!(best, k);
    }
}

#[test]
fn gross_outlier_is_far_above_threshold() {
    let (form, data) = fixture();
    let mut r = data.records[1].clone();
    r.real.iter_mut().chain(r.imag.iter_mut()).for_each(|v| *v *= 100.0);
    let t = calibration().threshold.value;
    let rep = form.novelty_index(&r, t).unwrap();
    assert!(rep.outlying && rep.index > t + 100.0 * calibration().threshold.std);
}

#[test]
fn report_posterior_is_normalised() {
    let (form, data) = fixture();
    let rep = form.novelty_index(&data.records[3], 1.0).unwrap();
    let total: f64 = rep.per_component_log_posterior.iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(rep.outlying, rep.index > rep.threshold);
}

#[test]
fn record_outside_band_is_rejected() {
    let (form, _) = fixture();
    let r = FrfRecord::from_complex(vec![47.0, 50.0], &[Default::default(); 2], None);
    assert!(form.novelty_index(&r, 0.0).unwrap_err().is_input());
}

#[test]
fn scorer_rejects_a_different_grid() {
    let (form, data) = fixture();
    let s = form.scorer(&BAND.grid(41)).unwrap();
    assert!(s.index(&data.records[0]).is_err());
}

#[test]
fn threshold_records_multiplier() {
    let c = calibration();
    assert_eq!(c.threshold.multiplier, 2.58);
    assert_eq!(c.indices.len(), 1000);
    assert!((c.threshold.value - (c.threshold.mean + 2.58 * c.threshold.std)).abs() < 1e-9);
}

#[test]
fn threshold_is_reproducible() {
    let (form, data) = fixture();
    let a = mc_threshold(form, data, 30, 2, 0.99, 0.05, 4).unwrap();
    let b = mc_threshold(form, data, 30, 2, 0.99, 0.05, 4).unwrap();
    assert_eq!(a, b);
    let c = mc_threshold(form, data, 30, 2, 0.99, 0.05, 5).unwrap();
    assert_ne!(a.indices, c.indices);
}

#[test]
fn threshold_rejects_bad_arguments() {
    let (form, data) = fixture();
    assert!(mc_threshold(form, data, 0, 1, 0.99, 0.05, 0).is_err());
    assert!(mc_threshold(form, data, 10, 1, 1.0, 0.05, 0).is_err());
    let empty = FrfDataset { records: vec![], band: BAND };
    assert!(mc_threshold(form, &empty, 10, 1, 0.99, 0.05, 0).is_err());
}

#[test]
fn equal_indices_give_that_value() {
    let t = Threshold::from_indices(&[3.25; 7], 0.99).unwrap();
    assert_eq!(t.value, 3.25);
}

/// Two-sided Mann-Whitney test with the normal approximation and tie
/// correction; returns |z|.
fn rank_test(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, usize)> = a.iter().map(|v| (*v, 0)).chain(b.iter().map(|v| (*v, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        for r in &mut ranks[i..=j] {
            *r = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = all.iter().zip(&ranks).filter(|(x, _)| x.1 == 0).map(|(_, r)| r).sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - ties / (nn * (nn - 1.0)));
    ((u - n1 * n2 / 2.0) / var.sqrt()).abs()
}

#[test]
fn rank_test_oracle() {
    let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..50).map(|i| i as f64 + 0.5).collect();
    assert!(rank_test(&a, &b) < 1.0);
    let c: Vec<f64> = (0..50).map(|i| i as f64 + 100.0).collect();
    assert!(rank_test(&a, &c) > 5.0);
}

#[test]
fn unshifted_sweep_matches_calibration() {
    let (form, data) = fixture();
    let specs = default_population();
    let grid = &data.records[0].frequency_hz;
    let sweep = damage_sweep(form, &specs, &[0.0], grid, 200, 0.05, 21).unwrap();
    let cal = calibration();
    for cell in &sweep {
        let z = rank_test(&cell.indices, &cal.member_indices(cell.member));
        assert!(z < 2.576, "member {}: z = {z}", cell.member_id);
    }
}

#[test]
fn sweep_shape_and_order() {
    let (form, data) = fixture();
    let specs = default_population();
    let shifts = default_shifts_pct();
    let grid = &data.records[0].frequency_hz;
    let sweep = damage_sweep(form, &specs, &shifts, grid, 3, 0.05, 2).unwrap();
    assert_eq!(sweep.len(), 32);
    for (i, cell) in sweep.iter().enumerate() {
        assert_eq!(cell.member, i / 8);
        assert_eq!(cell.shift_pct, shifts[i % 8]);
        assert_eq!(cell.indices.len(), 3);
        assert!(cell.summary.q05 <= cell.summary.q50 && cell.summary.q50 <= cell.summary.q95);
    }
    assert_eq!(sweep, damage_sweep(form, &specs, &shifts, grid, 3, 0.05, 2).unwrap());
    assert!(damage_sweep(form, &specs, &[0.5], grid, 3, 0.05, 2).is_err());
    assert!(damage_sweep(form, &specs, &[0.0], grid, 0, 0.05, 2).is_err());
}

#[test]
fn outlier_rate_counts_strict_exceedance() {
    let r = SweepResult {
        member: 0,
        member_id: "m".into(),
        shift_pct: 0.0,
        indices: vec![1.0, 2.0, 3.0, 4.0],
        summary: Summary::of(&[1.0, 2.0, 3.0, 4.0]),
    };
    assert_eq!(r.outlier_rate(2.0), 0.5);
}

#[test]
fn magnitude_band_is_ordered_and_non_negative() {
    let (form, _) = fixture();
    let grid = BAND.grid(21);
    let band = magnitude_band(form, &grid, 400, 3).unwrap();
    assert_eq!(band.components.len(), 4);
    for c in &band.components {
        for j in 0..grid.len() {
            assert!(c.lower[j] >= 0.0);
            assert!(c.lower[j] <= c.mean[j] && c.mean[j] <= c.upper[j]);
        }
    }
    assert_eq!(band, magnitude_band(form, &grid, 400, 3).unwrap());
    assert!(magnitude_band(form, &grid, 1, 3).is_err());
}

#[test]
fn zero_variance_band_collapses_to_modulus() {
    let re = (DVector::from_vec(vec![3.0, -1.0, 0.0]), DMatrix::zeros(3, 3));
    let im = (DVector::from_vec(vec![4.0, 0.0, -2.0]), DMatrix::zeros(3, 3));
    let mut rng = rng::stream(0, streams::BAND);
    let b = sample_magnitude(&re, &im, 50, &mut rng);
    for (j, want) in [5.0, 1.0, 2.0].iter().enumerate() {
        assert_eq!(b.lower[j], *want);
        assert_eq!(b.upper[j], *want);
        assert!((b.mean[j] - want).abs() < 1e-12);
    }
}

#[test]
fn pairing_aligns_components_by_frequency() {
    let (form, _) = fixture();
    let mut imag = form.imag.clone();
    imag.permute(&[3, 1, 0, 2]).unwrap();
    let pair = FormPair::new(form.real.clone(), imag, BAND).unwrap();
    assert_eq!(pair.imag, form.imag);
    assert!(FormPair::new(form.real.clone(), form.real.clone(), BAND).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn threshold_shifts_with_the_indices(v in prop::collection::vec(-1e3f64..1e3, 2..50), c in -1e3f64..1e3) {
        let a = Threshold::from_indices(&v, 0.99).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = Threshold::from_indices(&shifted, 0.99).unwrap();
        prop_assert!((b.value - (a.value + c)).abs() <= 1e-9 * (1.0 + a.value.abs() + c.abs()));
    }
}
