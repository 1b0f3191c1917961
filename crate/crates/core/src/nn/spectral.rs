//! Spectral normalization by power iteration.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::{NetworkSpec, NnError, ParamSet, Real, Result, Tensor};
use crate::rng;

const MIN_SIGMA: f64 = 1e-12;

/// Singular-vector estimates for one weight matrix: `u` has one entry per
/// row, `v` one per column. Both are unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState<T = f32> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalize<T: Real>(x: &mut [T]) -> Option<()> {
    let norm = x.iter().fold(T::zero(), |a, &b| a + b * b).sqrt();
    if !(norm.f64() > 0.0) || !norm.is_finite() {
        return None;
    }
    for v in x.iter_mut() {
        *v = *v / norm;
    }
    Some(())
}

fn degenerate(name: &str, sigma: f64) -> NnError {
    NnError::DegenerateWeight {
        name: name.to_owned(),
        sigma,
    }
}

impl<T: Real> SpectralNormState<T> {
    /// Random unit `u` (standard-normal direction), `v` from one half step
    /// against `weight`.
    pub fn random(weight: &Tensor<T>, seed: u64, key: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, key);
        let mut u: Vec<T> = (0..weight.rows())
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                T::of(x)
            })
            .collect();
        normalize(&mut u).ok_or_else(|| degenerate("random u", 0.0))?;
        let v = vec![T::zero(); weight.cols()];
        let mut state = Self { u, v };
        state.power_step("init", weight)?;
        Ok(state)
    }

    /// `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`; returns `σ = uᵀWv`.
    pub fn power_step(&mut self, name: &str, weight: &Tensor<T>) -> Result<T> {
        let (rows, cols) = (weight.rows(), weight.cols());
        if self.u.len() != rows {
            return Err(NnError::ShapeMismatch {
                what: format!("spectral u of `{name}`"),
                expected: vec![rows],
                actual: vec![self.u.len()],
            });
        }
        let w = weight.data();
        let mut v = vec![T::zero(); cols];
        for (r, &ur) in self.u.iter().enumerate() {
            for (vc, &wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wrc * ur;
            }
        }
        normalize(&mut v).ok_or_else(|| degenerate(name, 0.0))?;
        let mut u: Vec<T> = (0..rows)
            .map(|r| {
                w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v)
                    .fold(T::zero(), |a, (&x, &y)| a + x * y)
            })
            .collect();
        normalize(&mut u).ok_or_else(|| degenerate(name, 0.0))?;
        self.u = u;
        self.v = v;
        self.sigma(name, weight)
    }

    /// `σ = uᵀWv` for the stored vectors.
    pub fn sigma(&self, name: &str, weight: &Tensor<T>) -> Result<T> {
        let cols = weight.cols();
        if self.v.len() != cols || self.u.len() != weight.rows() {
            return Err(NnError::ShapeMismatch {
                what: format!("spectral state of `{name}`"),
                expected: vec![weight.rows(), cols],
                actual: vec![self.u.len(), self.v.len()],
            });
        }
        let w = weight.data();
        let sigma = self.u.iter().enumerate().fold(T::zero(), |acc, (r, &ur)| {
            acc + ur
                * w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&self.v)
                    .fold(T::zero(), |a, (&x, &y)| a + x * y)
        });
        if !(sigma.f64() >= MIN_SIGMA) {
            return Err(degenerate(name, sigma.f64()));
        }
        Ok(sigma)
    }

    /// `W/σ` with the stored vectors held fixed.
    pub(crate) fn normalize_fixed(&self, name: &str, weight: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        let sigma = self.sigma(name, weight)?;
        let inv = T::one() / sigma;
        Ok((weight.map(|x| x * inv), sigma))
    }

    pub fn cast<U: Real>(&self) -> SpectralNormState<U> {
        SpectralNormState {
            u: self.u.iter().map(|&x| U::of(x.f64())).collect(),
            v: self.v.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

/// One power-iteration step followed by division by the new σ estimate.
pub fn spectral_normalize<T: Real>(
    weight: &Tensor<T>,
    state: &mut SpectralNormState<T>,
) -> Result<(Tensor<T>, T)> {
    if weight.rank() != 2 {
        return Err(NnError::ShapeMismatch {
            what: "spectral weight rank".into(),
            expected: vec![2],
            actual: vec![weight.rank()],
        });
    }
    state.power_step("weight", weight)?;
    state.normalize_fixed("weight", weight)
}

/// Spectral states keyed by weight name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpectralSet<T = f32> {
    states: BTreeMap<String, SpectralNormState<T>>,
}

impl<T: Real> SpectralSet<T> {
    pub fn new() -> Self {
        Self {
            states: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&SpectralNormState<T>> {
        self.states.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, state: SpectralNormState<T>) {
        self.states.insert(name.into(), state);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SpectralNormState<T>)> {
        self.states.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn cast<U: Real>(&self) -> SpectralSet<U> {
        SpectralSet {
            states: self
                .states
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) {
        self.states.extend(other.states);
    }
}

/// Fresh states for every spectrally normalized layer of `spec`.
pub fn init_spectral<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    seed: u64,
) -> Result<SpectralSet<T>> {
    let mut set = SpectralSet::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if l.spectral_norm {
            let name = spec.weight_name(i);
            let w = params.get(&name)?;
            let key = rng::mix(rng::key(&name), rng::key("spectral-u"));
            let state = SpectralNormState::random(w, seed, key)
                .map_err(|_| degenerate(&name, 0.0))?;
            set.insert(name, state);
        }
    }
    Ok(set)
}

/// One power-iteration step on every spectrally normalized layer of `spec`.
pub fn refresh_spectral<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    set: &mut SpectralSet<T>,
) -> Result<()> {
    for (i, l) in spec.layers.iter().enumerate() {
        if l.spectral_norm {
            let name = spec.weight_name(i);
            let w = params.get(&name)?;
            let state = set
                .states
                .get_mut(&name)
                .ok_or_else(|| NnError::InvalidSpec(format!("no spectral state for `{name}`")))?;
            state.power_step(&name, w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_for(w: &Tensor<f64>) -> SpectralNormState<f64> {
        SpectralNormState::random(w, 9, 1).unwrap()
    }

    #[test]
    fn diag_converges_to_top_singular_value() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut s = state_for(&w);
        let mut sigma = 0.0;
        let mut out = w.clone();
        for _ in 0..20 {
            let (o, sg) = spectral_normalize(&w, &mut s).unwrap();
            out = o;
            sigma = sg;
        }
        assert!((sigma - 3.0).abs() < 1e-4);
        assert!((out.data()[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn identity_is_fixed_point() {
        let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut s = state_for(&w);
        let (out, sigma) = spectral_normalize(&w, &mut s).unwrap();
        assert!((sigma - 1.0).abs() < 1e-12);
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_vectors_after_every_step() {
        let w = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 4.0, 1.0]).unwrap();
        let mut s = state_for(&w);
        for _ in 0..10 {
            spectral_normalize(&w, &mut s).unwrap();
            let nu: f64 = s.u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv: f64 = s.v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((nu - 1.0).abs() < 1e-6 && (nv - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let ok = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut s = state_for(&ok);
        let zero = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            spectral_normalize(&zero, &mut s),
            Err(NnError::DegenerateWeight { .. })
        ));
    }
}
