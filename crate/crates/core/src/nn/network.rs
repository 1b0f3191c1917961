//! Fully-connected networks: parameter layout, forward pass and reverse-mode
//! gradients.
//!
//! Weights are stored `[out, in]` row-major, activations `[batch, width]`.
//! When a network carries an embedding table, the embedding row of each
//! sample's label is appended to its input before the first layer.

use rand::distr::{Distribution, Uniform};
use rand_distr::Normal;

use super::spectral::SpectralSet;
use super::{NnError, ParamSet, Real, Result, Tensor};
use crate::rng;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Standard deviation of initial embedding entries.
pub const EMBED_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with slope 0.1 on the negative side.
    LeakyRelu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::LeakyRelu => {
                if z > T::zero() {
                    z
                } else {
                    z * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => {
                // split on sign so exp never overflows
                if z >= T::zero() {
                    T::one() / (T::one() + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (T::one() + e)
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Real>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Tanh => T::one() - a * a,
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky-relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub num_classes: usize,
    pub dim: usize,
}

/// Layer list of a dense network. `prefix` namespaces its parameters so that
/// several networks can share one [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub prefix: String,
    pub layers: Vec<LayerSpec>,
    pub embedding: Option<EmbeddingSpec>,
}

impl NetworkSpec {
    /// Chain of layers through `widths`; `hidden` on every layer but the
    /// last, which uses `output`.
    pub fn mlp(
        prefix: impl Into<String>,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| LayerSpec {
                input: widths[i],
                output: widths[i + 1],
                activation: if i + 1 == n { output } else { hidden },
                spectral_norm: false,
            })
            .collect();
        Self {
            prefix: prefix.into(),
            layers,
            embedding: None,
        }
    }

    /// Adds a label embedding concatenated to the input; the first layer
    /// widens by `dim`.
    pub fn with_embedding(mut self, num_classes: usize, dim: usize) -> Self {
        if let Some(first) = self.layers.first_mut() {
            first.input += dim;
        }
        self.embedding = Some(EmbeddingSpec { num_classes, dim });
        self
    }

    pub fn with_spectral_norm(mut self, on: bool) -> Self {
        for l in &mut self.layers {
            l.spectral_norm = on;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec(format!("`{}` has no layers", self.prefix)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(NnError::InvalidSpec(format!(
                    "`{}` layer {i} has a zero width",
                    self.prefix
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(NnError::InvalidSpec(format!(
                    "`{}` layer {i} outputs {} but layer {} takes {}",
                    self.prefix,
                    pair[0].output,
                    i + 1,
                    pair[1].input
                )));
            }
        }
        if let Some(e) = self.embedding {
            if e.dim == 0 || e.num_classes == 0 {
                return Err(NnError::InvalidSpec(format!(
                    "`{}` embedding must have positive size",
                    self.prefix
                )));
            }
            if self.layers[0].input <= e.dim {
                return Err(NnError::InvalidSpec(format!(
                    "`{}` first layer narrower than its embedding",
                    self.prefix
                )));
            }
        }
        Ok(())
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer:02}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer:02}.b", self.prefix)
    }

    pub fn embed_name(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    /// Width of the data input, excluding any embedding.
    pub fn input_width(&self) -> usize {
        self.layers[0].input - self.embedding.map_or(0, |e| e.dim)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

/// One embedding row drawn from N(0, 0.01²), keyed independently of every
/// other parameter.
pub fn init_embedding_row(seed: u64, key: u64, dim: usize) -> Vec<f32> {
    let mut rng = rng::stream(seed, key);
    let normal = Normal::new(0.0f32, EMBED_INIT_STD as f32).expect("valid std");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// He-uniform weights (bound √(6/fan_in)), zero biases, N(0, 0.01²)
/// embeddings. Each tensor is drawn from its own stream keyed by name.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet<f32>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let name = spec.weight_name(i);
        let bound = (6.0 / l.input as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut rng = rng::stream(seed, rng::key(&name));
        let w = Tensor::from_fn(&[l.output, l.input], |_| dist.sample(&mut rng));
        params.insert(name, w);
        params.insert(spec.bias_name(i), Tensor::zeros(&[l.output]));
    }
    if let Some(e) = spec.embedding {
        let name = spec.embed_name();
        let base = rng::key(&name);
        let mut data = Vec::with_capacity(e.num_classes * e.dim);
        for row in 0..e.num_classes {
            data.extend(init_embedding_row(seed, rng::mix(base, row as u64), e.dim));
        }
        params.insert(name, Tensor::new(vec![e.num_classes, e.dim], data)?);
    }
    Ok(params)
}

#[derive(Debug, Clone)]
struct SnCache<T> {
    weight: Tensor<T>,
    sigma: T,
    u: Vec<T>,
    v: Vec<T>,
}

/// Activations recorded by [`forward`] for the matching [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    prefix: String,
    layer_count: usize,
    /// Input of each layer; `inputs[0]` already carries the embedding.
    inputs: Vec<Tensor<T>>,
    /// Post-activation output of each layer.
    outputs: Vec<Tensor<T>>,
    normalized: Vec<Option<SnCache<T>>>,
    labels: Option<Vec<usize>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty network")
    }
}

fn check_cols<T: Real>(what: &str, t: &Tensor<T>, cols: usize) -> Result<()> {
    if t.rank() != 2 || t.cols() != cols {
        return Err(NnError::ShapeMismatch {
            what: what.to_owned(),
            expected: vec![t.rows(), cols],
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Evaluates the network on a `[batch, input_width]` tensor. `labels` selects
/// embedding rows when the network is conditioned; `spectral` supplies the
/// fixed singular-vector estimates for spectrally normalized layers.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    input: &Tensor<T>,
    labels: Option<&[usize]>,
    spectral: Option<&SpectralSet<T>>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    spec.validate()?;
    check_cols("network input", input, spec.input_width())?;
    let batch = input.rows();

    let first = match (spec.embedding, labels) {
        (Some(e), Some(labels)) => {
            if labels.len() != batch {
                return Err(NnError::ShapeMismatch {
                    what: "labels".into(),
                    expected: vec![batch],
                    actual: vec![labels.len()],
                });
            }
            let table = params.get(&spec.embed_name())?;
            let width = spec.layers[0].input;
            let data_w = input.cols();
            let mut x = Tensor::zeros(&[batch, width]);
            for (b, &y) in labels.iter().enumerate() {
                if y >= e.num_classes {
                    return Err(NnError::UnknownLabel {
                        label: y,
                        classes: e.num_classes,
                    });
                }
                let row = x.row_mut(b);
                row[..data_w].copy_from_slice(input.row(b));
                row[data_w..].copy_from_slice(table.row(y));
            }
            x
        }
        (Some(_), None) => {
            return Err(NnError::InvalidSpec(format!(
                "`{}` is conditioned but no labels were given",
                spec.prefix
            )))
        }
        (None, _) => input.clone(),
    };

    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut outputs = Vec::with_capacity(spec.layers.len());
    let mut normalized = Vec::with_capacity(spec.layers.len());
    let mut x = first;
    for (i, layer) in spec.layers.iter().enumerate() {
        let w_name = spec.weight_name(i);
        let w = params.get(&w_name)?;
        let b = params.get(&spec.bias_name(i))?;
        if w.shape() != [layer.output, layer.input] || b.shape() != [layer.output] {
            return Err(NnError::ShapeMismatch {
                what: w_name,
                expected: vec![layer.output, layer.input],
                actual: w.shape().to_vec(),
            });
        }
        let sn = if layer.spectral_norm {
            let state = spectral
                .and_then(|s| s.get(&w_name))
                .ok_or_else(|| NnError::InvalidSpec(format!("no spectral state for `{w_name}`")))?;
            let (weight, sigma) = state.normalize_fixed(&w_name, w)?;
            Some(SnCache {
                weight,
                sigma,
                u: state.u.clone(),
                v: state.v.clone(),
            })
        } else {
            None
        };
        let w_eff = sn.as_ref().map_or(w, |s| &s.weight);

        let mut z = Tensor::zeros(&[batch, layer.output]);
        for r in 0..batch {
            z.row_mut(r).copy_from_slice(b.data());
        }
        T::gemm(
            batch,
            layer.input,
            layer.output,
            T::one(),
            (x.data(), layer.input as isize, 1),
            (w_eff.data(), 1, layer.input as isize),
            T::one(),
            (z.data_mut(), layer.output as isize, 1),
        );
        let act = layer.activation;
        let out = z.map(|v| act.apply(v));
        inputs.push(x);
        normalized.push(sn);
        x = out.clone();
        outputs.push(out);
    }

    let cache = ForwardCache {
        prefix: spec.prefix.clone(),
        layer_count: spec.layers.len(),
        inputs,
        outputs,
        normalized,
        labels: labels.filter(|_| spec.embedding.is_some()).map(<[usize]>::to_vec),
    };
    Ok((x, cache))
}

fn check_cache<T: Real>(spec: &NetworkSpec, cache: &ForwardCache<T>, grad: &Tensor<T>) -> Result<()> {
    if cache.prefix != spec.prefix || cache.layer_count != spec.layers.len() {
        return Err(NnError::StaleCache(spec.prefix.clone()));
    }
    let out = cache.output();
    if grad.shape() != out.shape() {
        return Err(NnError::ShapeMismatch {
            what: "output gradient".into(),
            expected: out.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    Ok(())
}

fn backward_impl<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    output_grad: &Tensor<T>,
    mut param_grads: Option<&mut ParamSet<T>>,
    input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    check_cache(spec, cache, output_grad)?;
    let batch = cache.batch();
    let mut g = output_grad.clone();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let out = &cache.outputs[i];
        let act = layer.activation;
        for (gv, &a) in g.data_mut().iter_mut().zip(out.data()) {
            *gv *= act.derivative_from_output(a);
        }
        let x = &cache.inputs[i];
        let w_raw = params.get(&spec.weight_name(i))?;
        let w_eff = cache.normalized[i].as_ref().map_or(w_raw, |s| &s.weight);

        if let Some(grads) = param_grads.as_deref_mut() {
            // dW̃ = gᵀ x
            let mut dw = Tensor::zeros(&[layer.output, layer.input]);
            T::gemm(
                layer.output,
                batch,
                layer.input,
                T::one(),
                (g.data(), 1, layer.output as isize),
                (x.data(), layer.input as isize, 1),
                T::zero(),
                (dw.data_mut(), layer.input as isize, 1),
            );
            if let Some(sn) = &cache.normalized[i] {
                // W̃ = W/σ with σ = uᵀWv:  dW = (dW̃ − ⟨dW̃, W̃⟩ u vᵀ) / σ
                let inner = dw.dot(&sn.weight);
                let inv = T::one() / sn.sigma;
                for (r, &ur) in sn.u.iter().enumerate() {
                    for (c, &vc) in sn.v.iter().enumerate() {
                        let d = &mut dw.data_mut()[r * layer.input + c];
                        *d = (*d - inner * ur * vc) * inv;
                    }
                }
            }
            let mut db = Tensor::zeros(&[layer.output]);
            for r in 0..batch {
                for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            grads.insert(spec.weight_name(i), dw);
            grads.insert(spec.bias_name(i), db);
        }

        if i == 0 && !input_grad && spec.embedding.is_none() {
            return Ok(None);
        }
        // dx = g · W̃
        let mut dx = Tensor::zeros(&[batch, layer.input]);
        T::gemm(
            batch,
            layer.output,
            layer.input,
            T::one(),
            (g.data(), layer.output as isize, 1),
            (w_eff.data(), layer.input as isize, 1),
            T::zero(),
            (dx.data_mut(), layer.input as isize, 1),
        );
        g = dx;
    }

    match (spec.embedding, &cache.labels) {
        (Some(e), Some(labels)) => {
            let data_w = spec.input_width();
            if let Some(grads) = param_grads {
                let mut de = Tensor::zeros(&[e.num_classes, e.dim]);
                for (b, &y) in labels.iter().enumerate() {
                    for (d, &gv) in de.row_mut(y).iter_mut().zip(&g.row(b)[data_w..]) {
                        *d += gv;
                    }
                }
                grads.insert(spec.embed_name(), de);
            }
            let mut dx = Tensor::zeros(&[batch, data_w]);
            for b in 0..batch {
                dx.row_mut(b).copy_from_slice(&g.row(b)[..data_w]);
            }
            Ok(Some(dx))
        }
        _ => Ok(Some(g)),
    }
}

/// Exact reverse-mode gradients of [`forward`]: parameter gradients for every
/// tensor of the network plus the gradient with respect to the data input.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    output_grad: &Tensor<T>,
) -> Result<(ParamSet<T>, Tensor<T>)> {
    let mut grads = ParamSet::new();
    let dx = backward_impl(spec, params, cache, output_grad, Some(&mut grads), true)?;
    Ok((grads, dx.expect("input gradient requested")))
}

/// Parameter gradients only; the input gradient of the first layer is
/// skipped when nothing upstream needs it.
pub fn backward_params<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    output_grad: &Tensor<T>,
) -> Result<ParamSet<T>> {
    let mut grads = ParamSet::new();
    backward_impl(spec, params, cache, output_grad, Some(&mut grads), false)?;
    Ok(grads)
}

/// Input gradient only; parameters are treated as constants.
pub fn backward_input<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    output_grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(backward_impl(spec, params, cache, output_grad, None, true)?.expect("input gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(input: usize, output: usize, act: Activation) -> NetworkSpec {
        NetworkSpec::mlp("n", &[input, output], act, act)
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::mlp("g", &[6, 5, 3], Activation::Relu, Activation::Sigmoid)
            .with_embedding(4, 2);
        let a = init_params(&spec, 11).unwrap();
        let b = init_params(&spec, 11).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert_ne!(a, init_params(&spec, 12).unwrap());
    }

    #[test]
    fn init_respects_he_bound() {
        let spec = single(4, 4, Activation::Relu);
        let p = init_params(&spec, 7).unwrap();
        let bound = (6.0f32 / 4.0).sqrt();
        let w = p.get("n.l00.w").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        assert!(w.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn identity_weights_pass_positive_input() {
        let spec = single(3, 3, Activation::Relu);
        let mut p = init_params(&spec, 0).unwrap();
        *p.get_mut("n.l00.w").unwrap() =
            Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::matrix(1, 3, vec![0.5f32, 1.5, 2.0]).unwrap();
        let (y, _) = forward(&spec, &p, &x, None, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_return_bias() {
        let spec = single(3, 2, Activation::Identity);
        let mut p = init_params(&spec, 0).unwrap();
        *p.get_mut("n.l00.w").unwrap() = Tensor::zeros(&[2, 3]);
        *p.get_mut("n.l00.b").unwrap() = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0f32, 2.0, 3.0, -1.0, 0.0, 9.0]).unwrap();
        let (y, _) = forward(&spec, &p, &x, None, None).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn two_by_two_hand_product() {
        let spec = single(2, 2, Activation::Identity);
        let mut p = init_params(&spec, 0).unwrap();
        *p.get_mut("n.l00.w").unwrap() = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0f32, 1.0]).unwrap();
        let (y, _) = forward(&spec, &p, &x, None, None).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let spec = NetworkSpec::mlp("n", &[3, 4, 2], Activation::Tanh, Activation::Identity)
            .with_embedding(3, 2);
        let p = init_params(&spec, 3).unwrap().cast::<f64>();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let (y, cache) = forward(&spec, &p, &x, Some(&[0, 2]), None).unwrap();
        let (grads, dx) = backward(&spec, &p, &cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(grads.iter().all(|(_, t)| t.data().iter().all(|&g| g == 0.0)));
        assert!(dx.data().iter().all(|&g| g == 0.0));
        assert_eq!(grads.names().count(), p.len());
    }

    #[test]
    fn linear_weight_grad_is_outer_product() {
        let spec = single(3, 2, Activation::Identity);
        let p = init_params(&spec, 5).unwrap().cast::<f64>();
        let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let (_, cache) = forward(&spec, &p, &x, None, None).unwrap();
        let g = Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap();
        let (grads, _) = backward(&spec, &p, &cache, &g).unwrap();
        let expected = [3.0, -6.0, 1.5, -1.0, 2.0, -0.5];
        assert_eq!(grads.get("n.l00.w").unwrap().data(), &expected);
        assert_eq!(grads.get("n.l00.b").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn errors_on_bad_shape_and_label() {
        let spec = NetworkSpec::mlp("g", &[3, 2], Activation::Relu, Activation::Relu)
            .with_embedding(2, 1);
        let p = init_params(&spec, 0).unwrap();
        let bad = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(
            forward(&spec, &p, &bad, Some(&[0]), None),
            Err(NnError::ShapeMismatch { .. })
        ));
        let ok = Tensor::<f32>::zeros(&[1, 3]);
        assert_eq!(
            forward(&spec, &p, &ok, Some(&[2]), None).unwrap_err(),
            NnError::UnknownLabel { label: 2, classes: 2 }
        );
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = single(2, 2, Activation::Relu);
        let mut b = a.clone();
        b.prefix = "other".into();
        let p = init_params(&a, 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 2]);
        let (y, cache) = forward(&a, &p, &x, None, None).unwrap();
        assert_eq!(
            backward(&b, &p, &cache, &y).unwrap_err(),
            NnError::StaleCache("other".into())
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = NetworkSpec::mlp("x", &[3, 4, 2], Activation::Relu, Activation::Relu);
        assert!(s.validate().is_ok());
        s.layers[1].input = 5;
        assert!(s.validate().is_err());
        assert!(NetworkSpec::mlp("e", &[3], Activation::Relu, Activation::Relu)
            .validate()
            .is_err());
    }
}
