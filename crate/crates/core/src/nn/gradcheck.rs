//! Central finite-difference gradient checks in double precision.

use super::spectral::SpectralSet;
use super::{backward, forward, NetworkSpec, ParamSet, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Scalar losses on a network output, summed over every output entry.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `Σ softplus(o) − t·o`, i.e. binary cross-entropy on logits.
    SigmoidBce(Vec<f64>),
    /// `½ Σ (o − t)²`.
    Squared(Vec<f64>),
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LossKind {
    fn targets(&self) -> &[f64] {
        match self {
            LossKind::SigmoidBce(t) | LossKind::Squared(t) => t,
        }
    }

    pub fn value(&self, out: &[f64]) -> f64 {
        let t = self.targets();
        match self {
            LossKind::SigmoidBce(_) => out.iter().zip(t).map(|(&o, &t)| softplus(o) - t * o).sum(),
            LossKind::Squared(_) => out.iter().zip(t).map(|(&o, &t)| 0.5 * (o - t) * (o - t)).sum(),
        }
    }

    pub fn gradient(&self, out: &[f64]) -> Vec<f64> {
        let t = self.targets();
        match self {
            LossKind::SigmoidBce(_) => out.iter().zip(t).map(|(&o, &t)| sigmoid(o) - t).collect(),
            LossKind::Squared(_) => out.iter().zip(t).map(|(&o, &t)| o - t).collect(),
        }
    }
}

/// Central-difference gradient of `loss` with respect to every entry of
/// `params`.
pub fn numeric_gradient(
    params: &ParamSet<f64>,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    h: f64,
) -> ParamSet<f64> {
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name).expect("own name").len();
        for i in 0..n {
            let orig = params.get(&name).expect("own name").data()[i];
            work.get_mut(&name).expect("own name").data_mut()[i] = orig + h;
            let plus = loss(&work);
            work.get_mut(&name).expect("own name").data_mut()[i] = orig - h;
            let minus = loss(&work);
            work.get_mut(&name).expect("own name").data_mut()[i] = orig;
            out.get_mut(&name).expect("own name").data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// `max |a − n| / max(1, |a|, |n|)` over every entry present in `numeric`.
/// Entries missing from `analytic` count as zero gradients.
pub fn max_relative_error(analytic: &ParamSet<f64>, numeric: &ParamSet<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (name, n) in numeric.iter() {
        let a = analytic.get(name).ok();
        for (i, &nv) in n.data().iter().enumerate() {
            let av = a.map_or(0.0, |t| t.data()[i]);
            let denom = 1.0f64.max(av.abs()).max(nv.abs());
            let err = (av - nv).abs() / denom;
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    worst
}

/// Compares [`backward`] against central differences for every parameter
/// entry of a (small) network.
pub fn finite_diff_check(
    spec: &NetworkSpec,
    params: &ParamSet<f64>,
    input: &Tensor<f64>,
    labels: Option<&[usize]>,
    spectral: Option<&SpectralSet<f64>>,
    loss: &LossKind,
) -> Result<f64> {
    let (out, cache) = forward(spec, params, input, labels, spectral)?;
    let grad_out = Tensor::new(out.shape().to_vec(), loss.gradient(out.data()))?;
    let (analytic, _) = backward(spec, params, &cache, &grad_out)?;
    let eval = |p: &ParamSet<f64>| match forward(spec, p, input, labels, spectral) {
        Ok((o, _)) => loss.value(o.data()),
        Err(_) => f64::NAN,
    };
    let numeric = numeric_gradient(params, eval, FD_STEP);
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, init_spectral, Activation};

    fn input(rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(&[rows, cols], |i| scale * (((i * 37 + 11) % 17) as f64 / 8.0 - 1.0))
    }

    #[test]
    fn two_layer_relu_bce() {
        let spec = NetworkSpec::mlp("n", &[4, 6, 3], Activation::Relu, Activation::Identity);
        let p = init_params(&spec, 1).unwrap().cast();
        let loss = LossKind::SigmoidBce(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let err = finite_diff_check(&spec, &p, &input(2, 4, 0.7), None, None, &loss).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_squared() {
        let spec = NetworkSpec::mlp("n", &[3, 2], Activation::Identity, Activation::Identity);
        let p = init_params(&spec, 2).unwrap().cast();
        let loss = LossKind::Squared(vec![0.3, -0.2, 1.0, 0.5]);
        let err = finite_diff_check(&spec, &p, &input(2, 3, 1.0), None, None, &loss).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn degenerate_zero_case_is_finite() {
        let spec = NetworkSpec::mlp("n", &[3, 3, 2], Activation::Relu, Activation::Identity);
        let p = init_params(&spec, 2).unwrap().cast();
        let loss = LossKind::Squared(vec![0.0; 2]);
        let err =
            finite_diff_check(&spec, &p, &Tensor::zeros(&[1, 3]), None, None, &loss).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn every_activation_embedding_and_spectral_norm() {
        for act in [
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Identity,
        ] {
            let spec = NetworkSpec::mlp("g", &[3, 5, 4, 2], act, Activation::Sigmoid)
                .with_embedding(3, 2)
                .with_spectral_norm(true);
            let p = init_params(&spec, 4).unwrap().cast::<f64>();
            let sn = init_spectral(&spec, &p, 4).unwrap();
            let loss = LossKind::SigmoidBce(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
            let err = finite_diff_check(
                &spec,
                &p,
                &input(3, 3, 0.9),
                Some(&[0, 2, 1]),
                Some(&sn),
                &loss,
            )
            .unwrap();
            assert!(err < 1e-6, "{}: {err}", act.name());
        }
    }
}
