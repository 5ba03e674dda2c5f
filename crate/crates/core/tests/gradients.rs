mod support;

use dct_core::model::{Model, ModelConfig};
use support::gradcheck::{actor_check, numeric_gradient, worst, ModelFixture};

fn perturbed(model: &Model<f64>) -> Vec<f64> {
    // move away from the symmetric init so every slot has signal
    let mut params = model.params().to_vec();
    for (i, p) in params.iter_mut().enumerate() {
        *p += 0.05 * ((i * 7919 % 101) as f64 / 101.0 - 0.5);
    }
    params
}

fn check(config: ModelConfig, seg_len: usize) {
    let fx = ModelFixture::new(config, seg_len, 11);
    let model = Model::<f64>::new(config, 5).unwrap();
    let params = perturbed(&model);
    let analytic = fx.analytic(&params);
    let numeric = numeric_gradient(&params, |p| fx.loss(p));
    let (err, at) = worst(&analytic, &numeric);
    let name = model.layout().layout.name_of(at).unwrap_or("?");
    assert!(
        err < 1e-3,
        "worst relative error {err:.3e} at {name} ({} vs {})",
        analytic[at],
        numeric[at]
    );
}

#[test]
fn two_layer_model_with_compressed_memory() {
    check(
        ModelConfig {
            vocab: 12,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            layers: 2,
            ratio: 2,
        },
        4,
    );
}

#[test]
fn one_layer_model_ratio_three() {
    check(
        ModelConfig {
            vocab: 16,
            d_model: 8,
            heads: 1,
            d_ff: 16,
            layers: 1,
            ratio: 3,
        },
        6,
    );
}

#[test]
fn actor_surrogate_gradient() {
    for seed in 0..3 {
        let (err, at) = actor_check(4, 3, seed);
        assert!(
            err < 1e-4,
            "seed {seed}: worst relative error {err:.3e} at {at}"
        );
    }
}
