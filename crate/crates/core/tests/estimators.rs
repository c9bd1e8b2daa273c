use dgp_snr::encoder::EncoderMode;
use dgp_snr::estimators::{column_moments, dreg_grad_phi, reg_grad_phi, EstimatorKind};
use dgp_snr::kernels::inverse_positive;
use dgp_snr::model::{init_model, Model, ModelConfig};
use dgp_snr::rng::{derive_key, normal_tensor, substream};
use dgp_snr::snr::sample_gradients;
use dgp_snr::Tensor;

fn model() -> (Model, Tensor, Tensor) {
    let mut rng = substream(31, &[]);
    let x = normal_tensor(&mut rng, 20, 1);
    let y = x.map(|v| (2.0 * v).sin());
    let cfg = ModelConfig { layers: 2, width: 1, num_inducing: 4, latent_dim: 1, encoder: EncoderMode::Learned };
    let mut model = init_model(&cfg, &x, 1, &mut rng).unwrap();
    for layer in &mut model.layers {
        let (m, w) = layer.q_mean.shape();
        layer.q_mean = normal_tensor(&mut rng, m, w).scaled(0.5);
        layer.q_sqrt = layer.q_sqrt.iter().map(|q| Tensor::eye(q.rows()).scaled(0.4)).collect();
    }
    model.raw_noise = Tensor::scalar(inverse_positive(0.2));
    (model, x.slice(3, 0, 1, 1), y.slice(3, 0, 1, 1))
}

/// Means and squared standard errors of `total` draws, accumulated chunkwise.
fn moments(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    kind: EstimatorKind,
    m: usize,
    k: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    const TOTAL: usize = 100_000;
    const CHUNK: usize = 20_000;
    let p = model.encoder.num_params();
    let (mut n, mut mean, mut m2) = (0.0, vec![0.0; p], vec![0.0; p]);
    for c in 0..TOTAL / CHUNK {
        let s = sample_gradients(model, x, y, kind, CHUNK, m, k, derive_key(seed, &[c as u64])).unwrap();
        let (cm, cs) = column_moments(&s);
        let nb = CHUNK as f64;
        for j in 0..p {
            let d = cm[j] - mean[j];
            mean[j] += d * nb / (n + nb);
            m2[j] += cs[j] * cs[j] * (nb - 1.0) + d * d * n * nb / (n + nb);
        }
        n += nb;
    }
    (mean, m2.iter().map(|v| v / (n - 1.0) / n).collect())
}

#[test]
fn reg_and_dreg_means_agree_over_the_grid() {
    let (model, x, y) = model();
    for m in [1, 5, 20] {
        for k in [1, 5, 20] {
            let seed = (m * 100 + k) as u64;
            let (reg, reg_se2) = moments(&model, &x, &y, EstimatorKind::Reg, m, k, seed);
            let (dreg, dreg_se2) = moments(&model, &x, &y, EstimatorKind::Dreg, m, k, seed + 1);
            for j in 0..reg.len() {
                let se = (reg_se2[j] + dreg_se2[j]).sqrt();
                assert!(
                    (reg[j] - dreg[j]).abs() <= 4.0 * se,
                    "M={m} K={k} component {j}: REG {} vs DREG {} (SE {se})",
                    reg[j],
                    dreg[j]
                );
            }
        }
    }
}

#[test]
fn estimates_are_reproducible_per_seed() {
    let (model, x, y) = model();
    let reg = |s: u64| reg_grad_phi(&model, &x, &y, 3, 4, &mut substream(s, &[])).unwrap();
    let dreg = |s: u64| dreg_grad_phi(&model, &x, &y, 3, 4, &mut substream(s, &[])).unwrap();
    assert_eq!(reg(5), reg(5));
    assert_ne!(reg(5), reg(6));
    assert_eq!(dreg(5), dreg(5));
    assert_eq!(reg(5).values.len(), model.encoder.num_params());
}

#[test]
fn sampler_rows_do_not_depend_on_q() {
    let (model, x, y) = model();
    let rows = sample_gradients(&model, &x, &y, EstimatorKind::Dreg, 3, 2, 4, 9).unwrap();
    let again = sample_gradients(&model, &x, &y, EstimatorKind::Dreg, 5, 2, 4, 9).unwrap();
    assert_eq!(rows.data(), &again.data()[..rows.len()]);
}
