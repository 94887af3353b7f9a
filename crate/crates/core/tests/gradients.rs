use cdet::mdn::mixture_nll;
use cdet::nn::{init_params, Activation, FnnParams, FnnSpec};

fn spec(activation: Activation) -> FnnSpec {
    FnnSpec::new(3, vec![7, 5], 4 * 3, activation, 17)
}

/// Loss of the network output fed through the mixture head (G = 4, p = 1).
fn loss(params: &FnnParams, x: &[f64], y: &[f64]) -> f64 {
    let raw = params.forward(x).unwrap();
    mixture_nll(&raw, y, 4, 1e-3, None)
}

fn check(activation: Activation) {
    let spec = spec(activation);
    let params = init_params(&spec).unwrap();
    let x = [0.3, -0.8, 1.1];
    let y = [0.45];
    let raw = params.forward(&x).unwrap();
    let mut upstream = vec![0.0; raw.len()];
    mixture_nll(&raw, &y, 4, 1e-3, Some(&mut upstream));
    let grad = params.backward(&x, &upstream).unwrap();

    let flat = params.to_flat();
    let analytic = grad.params.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[k] += h;
        minus[k] -= h;
        let lp = loss(&FnnParams::from_flat(&spec, &plus).unwrap(), &x, &y);
        let lm = loss(&FnnParams::from_flat(&spec, &minus).unwrap(), &x, &y);
        let numeric = (lp - lm) / (2.0 * h);
        let err = (numeric - analytic[k]).abs() / (1.0 + numeric.abs());
        worst = worst.max(err);
    }
    assert!(worst < 1e-5, "max relative gradient error {worst}");

    // Input gradient.
    for j in 0..x.len() {
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let numeric = (loss(&params, &xp, &y) - loss(&params, &xm, &y)) / (2.0 * h);
        assert!((numeric - grad.input[j]).abs() < 1e-5 * (1.0 + numeric.abs()));
    }
}

#[test]
fn backprop_through_mixture_head_leaky() {
    check(Activation::LeakyRelu(0.01));
}

#[test]
fn backprop_through_mixture_head_relu() {
    check(Activation::Relu);
}
