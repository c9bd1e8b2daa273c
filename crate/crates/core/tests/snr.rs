use dgp_snr::encoder::EncoderMode;
use dgp_snr::estimators::EstimatorKind;
use dgp_snr::model::{init_model, Model, ModelConfig};
use dgp_snr::rng::{normal_tensor, substream};
use dgp_snr::snr::{snr, snr_sweep, snr_sweep_m, write_snr_csv, Points, SweepAxis};
use dgp_snr::Tensor;
use proptest::prelude::*;

fn setup() -> (Model, Tensor, Tensor) {
    let mut rng = substream(12, &[]);
    let x = normal_tensor(&mut rng, 8, 1);
    let y = x.map(|v| v.cos());
    let cfg = ModelConfig { layers: 1, width: 1, num_inducing: 3, latent_dim: 1, encoder: EncoderMode::Learned };
    let model = init_model(&cfg, &x, 1, &mut rng).unwrap();
    (model, x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sweep_ignores_point_order(perm in Just(vec![0usize, 2, 5, 7]).prop_shuffle()) {
        let (model, x, y) = setup();
        let sorted = [0usize, 2, 5, 7];
        let a = snr_sweep(&model, Points { x: &x, y: &y, indices: &sorted }, EstimatorKind::Reg, &[1, 3], 1, 20, 4).unwrap();
        let b = snr_sweep(&model, Points { x: &x, y: &y, indices: &perm }, EstimatorKind::Reg, &[1, 3], 1, 20, 4).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn column_scaling_leaves_snr_unchanged(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let s = normal_tensor(&mut substream(seed, &[]), 30, 3).map(|v| v + 0.3);
        let base = snr(&s).unwrap();
        let scaled = snr(&s.map(|v| v * c)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn sweeps_report_one_setting_per_list_entry() {
    let (model, x, y) = setup();
    let pts = Points { x: &x, y: &y, indices: &[1, 4] };
    let k = snr_sweep(&model, pts, EstimatorKind::Dreg, &[1, 2, 4], 1, 10, 0).unwrap();
    assert_eq!(k.axis, SweepAxis::K);
    assert_eq!(k.settings.iter().map(|s| s.k).collect::<Vec<_>>(), [1, 2, 4]);
    assert!(k.mean_snrs().iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(k.slope.is_finite());

    let m = snr_sweep_m(&model, pts, EstimatorKind::Reg, &[1, 2], 3, 10, 0).unwrap();
    assert_eq!(m.axis, SweepAxis::M);
    assert_eq!(m.settings.iter().map(|s| (s.m, s.k)).collect::<Vec<_>>(), [(1, 3), (2, 3)]);

    let mut out = Vec::new();
    write_snr_csv(&[k, m], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let p = model.encoder.num_params();
    assert_eq!(text.lines().count(), 1 + 5 * (1 + p));
}

#[test]
fn empty_point_list_is_rejected() {
    let (model, x, y) = setup();
    let pts = Points { x: &x, y: &y, indices: &[] };
    assert!(snr_sweep(&model, pts, EstimatorKind::Reg, &[1], 1, 10, 0).is_err());
}
