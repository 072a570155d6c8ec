use fedlab::leakage::{infer_label, reconstruct, AttackConfig, TargetGradient};
use fedlab::metrics::mse;
use fedlab::numcore::{loss_and_param_grad, Activation, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn single_affine_layer_is_inverted_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let spec = ModelSpec::linear(vec![6, 6], 5).unwrap();
    let params = spec.init_params(&mut r);
    let x = Tensor::new(vec![6, 6], (0..36).map(|_| r.random::<f64>()).collect()).unwrap();
    let (_, g) = loss_and_param_grad(&spec, &params, &[(x.clone(), 3)]).unwrap();
    let layout = spec.layout().clone();
    let (w, b) = (g.segment(layout.last_weight()), g.segment(layout.last_bias()));
    let analytic = Tensor::new(vec![6, 6], (0..36).map(|j| w[3 * 36 + j] / b[3]).collect()).unwrap();
    assert!(mse(&analytic, &x).unwrap() < 1e-24);
    let cfg = AttackConfig { lr: 0.1, max_iters: 5000, ..AttackConfig::default() };
    let rec = reconstruct(&spec, &params, &TargetGradient::client_sgd(g), &cfg, Some(std::slice::from_ref(&x)), None)
        .unwrap();
    assert_eq!(rec.y_rec, vec![3]);
    assert!(mse(rec.image(), &analytic).unwrap() < 1e-6);
    assert!(rec.success);
}

#[test]
fn label_inference_on_hidden_models() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let spec = ModelSpec::new(vec![9], vec![r.random_range(1..20)], 6, Activation::Sigmoid).unwrap();
        let params = spec.init_params(&mut r);
        let x = Tensor::from_vec((0..9).map(|_| r.random::<f64>()).collect());
        let y = r.random_range(0..6);
        let (_, g) = loss_and_param_grad(&spec, &params, &[(x, y)]).unwrap();
        assert_eq!(infer_label(&TargetGradient::client_sgd(g), &spec).unwrap(), y);
    }
}
