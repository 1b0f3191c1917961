//! Conditional GAN: label-conditioned generator, projection discriminator,
//! non-saturating losses and the three training regimes (single-domain
//! CGAN, fine-tuned TGAN and multi-domain fusion).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{unit_to_byte, DataError, DomainPair, LabeledImageSet};
use crate::metrics::{inception_score, FeatureExtractor, MetricError};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::nn::{
    adam_step, backward, backward_input, backward_params, forward, init_embedding_row, init_params, init_spectral,
    lr_schedule, refresh_spectral, Activation, AdamState, ForwardCache, NetworkSpec, NnError,
    ParamSet, Real, SpectralNormState, SpectralSet, Tensor,
};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum GanError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at iteration {iteration}")]
    Divergence {
        iteration: u64,
        log: Vec<TrainLogRecord>,
    },
    #[error("domain `{0}` is empty")]
    EmptyDomain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = GanError> = std::result::Result<T, E>;

/// Layer widths of the generator and discriminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GanArch {
    pub z_dim: usize,
    /// Width of the generator's label embedding.
    pub embed_dim: usize,
    pub g_hidden: Vec<usize>,
    /// Discriminator trunk widths; the last one is the feature width.
    pub d_hidden: Vec<usize>,
}

impl Default for GanArch {
    fn default() -> Self {
        Self {
            z_dim: 32,
            embed_dim: 16,
            g_hidden: vec![128, 256],
            d_hidden: vec![256, 128],
        }
    }
}

impl GanArch {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.embed_dim == 0 {
            return Err(GanError::Config("noise and embedding widths must be positive".into()));
        }
        if self.d_hidden.is_empty() {
            return Err(GanError::Config("discriminator needs at least one trunk layer".into()));
        }
        if self.g_hidden.iter().chain(&self.d_hidden).any(|&w| w == 0) {
            return Err(GanError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.d_hidden.last().expect("validated")
    }
}

/// Image geometry and label space of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn of(set: &LabeledImageSet) -> Self {
        Self {
            channels: set.channels(),
            height: set.height(),
            width: set.width(),
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Consecutive block of model classes owned by one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassBlock {
    pub key: u64,
    pub base: usize,
    pub classes: usize,
}

/// Key of a dataset independent of where its labels sit in a merged label
/// space.
pub fn domain_key(set: &LabeledImageSet, base: usize) -> u64 {
    let labels: Vec<u8> = set
        .labels()
        .iter()
        .flat_map(|&l| ((usize::from(l) - base) as u16).to_le_bytes())
        .collect();
    let shape = (set.channels() * 31 + set.height() * 17 + set.width()) as u64;
    rng::mix(rng::mix(rng::fnv1a(set.pixels()), rng::fnv1a(&labels)), shape)
}

pub const G_PREFIX: &str = "g";
pub const TRUNK_PREFIX: &str = "d.trunk";
pub const HEAD_PREFIX: &str = "d.head";
pub const D_EMBED: &str = "d.embed";

/// Generator θ, discriminator φ and the discriminator's spectral-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel<T = f32> {
    pub arch: GanArch,
    pub shape: ImageShape,
    /// Rows of both embedding tables.
    pub num_classes: usize,
    /// Classes `0..target_classes` belong to the target dataset.
    pub target_classes: usize,
    pub spectral_norm: bool,
    pub theta: ParamSet<T>,
    pub phi: ParamSet<T>,
    pub sn: SpectralSet<T>,
}

impl<T: Real> GanModel<T> {
    pub fn g_spec(&self) -> NetworkSpec {
        let mut widths = vec![self.arch.z_dim];
        widths.extend_from_slice(&self.arch.g_hidden);
        widths.push(self.shape.len());
        NetworkSpec::mlp(G_PREFIX, &widths, Activation::Relu, Activation::Sigmoid)
            .with_embedding(self.num_classes, self.arch.embed_dim)
    }

    pub fn trunk_spec(&self) -> NetworkSpec {
        let mut widths = vec![self.shape.len()];
        widths.extend_from_slice(&self.arch.d_hidden);
        NetworkSpec::mlp(TRUNK_PREFIX, &widths, Activation::LeakyRelu, Activation::LeakyRelu)
            .with_spectral_norm(self.spectral_norm)
    }

    pub fn head_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp(
            HEAD_PREFIX,
            &[self.arch.feature_width(), 1],
            Activation::Identity,
            Activation::Identity,
        )
        .with_spectral_norm(self.spectral_norm)
    }

    fn spectral(&self) -> Option<&SpectralSet<T>> {
        self.spectral_norm.then_some(&self.sn)
    }

    pub fn cast<U: Real>(&self) -> GanModel<U> {
        GanModel {
            arch: self.arch.clone(),
            shape: self.shape,
            num_classes: self.num_classes,
            target_classes: self.target_classes,
            spectral_norm: self.spectral_norm,
            theta: self.theta.cast(),
            phi: self.phi.cast(),
            sn: self.sn.cast(),
        }
    }

    /// One power-iteration step on every normalized discriminator layer.
    pub fn refresh_spectral(&mut self) -> Result<()> {
        if self.spectral_norm {
            refresh_spectral(&self.trunk_spec(), &self.phi, &mut self.sn)?;
            refresh_spectral(&self.head_spec(), &self.phi, &mut self.sn)?;
        }
        Ok(())
    }

    /// `G(z, y)` in `[0,1]`, one row per sample.
    pub fn generate(&self, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        Ok(self.g_forward(z, labels)?.0)
    }

    fn g_forward(&self, z: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, ForwardCache<T>)> {
        Ok(forward(&self.g_spec(), &self.theta, z, Some(labels), None)?)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(NnError::UnknownLabel {
                label: bad,
                classes: self.num_classes,
            }
            .into());
        }
        Ok(())
    }

    fn d_forward(&self, x: &Tensor<T>, labels: &[usize]) -> Result<DiscForward<T>> {
        self.check_labels(labels)?;
        if labels.len() != x.rows() {
            return Err(NnError::ShapeMismatch {
                what: "discriminator labels".into(),
                expected: vec![x.rows()],
                actual: vec![labels.len()],
            }
            .into());
        }
        let (features, trunk) = forward(&self.trunk_spec(), &self.phi, x, None, self.spectral())?;
        let (psi, head) = forward(&self.head_spec(), &self.phi, &features, None, self.spectral())?;
        let embed = self.phi.get(D_EMBED)?;
        let logits = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| psi.row(b)[0] + features.row(b).iter().zip(embed.row(y)).map(|(&f, &e)| f * e).sum())
            .collect();
        Ok(DiscForward {
            trunk,
            head,
            features,
            labels: labels.to_vec(),
            logits,
        })
    }

    /// Discriminator logits `ψ(f(x)) + ⟨embed_y, f(x)⟩`.
    pub fn d_logits(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        Ok(self.d_forward(x, labels)?.logits)
    }

    /// Gradients of `Σ_b dlogits[b] · logit_b`: φ gradients when
    /// `with_params`, otherwise the input gradient.
    fn d_backward(
        &self,
        fwd: &DiscForward<T>,
        dlogits: &[T],
        with_params: bool,
    ) -> Result<(Option<ParamSet<T>>, Option<Tensor<T>>)> {
        let batch = dlogits.len();
        let width = self.arch.feature_width();
        let dpsi = Tensor::matrix(batch, 1, dlogits.to_vec())?;
        let embed = self.phi.get(D_EMBED)?;
        let (head_spec, trunk_spec) = (self.head_spec(), self.trunk_spec());
        let mut grads = ParamSet::new();
        let mut df = if with_params {
            let (g, df) = backward(&head_spec, &self.phi, &fwd.head, &dpsi)?;
            grads.extend(g);
            df
        } else {
            backward_input(&head_spec, &self.phi, &fwd.head, &dpsi)?
        };
        let mut dembed = Tensor::zeros(&[self.num_classes, width]);
        for (b, (&y, &dl)) in fwd.labels.iter().zip(dlogits).enumerate() {
            for (d, &e) in df.row_mut(b).iter_mut().zip(embed.row(y)) {
                *d += dl * e;
            }
            if with_params {
                for (g, &f) in dembed.row_mut(y).iter_mut().zip(fwd.features.row(b)) {
                    *g += dl * f;
                }
            }
        }
        if with_params {
            grads.extend(backward_params(&trunk_spec, &self.phi, &fwd.trunk, &df)?);
            grads.insert(D_EMBED, dembed);
            Ok((Some(grads), None))
        } else {
            Ok((None, Some(backward_input(&trunk_spec, &self.phi, &fwd.trunk, &df)?)))
        }
    }
}

struct DiscForward<T> {
    trunk: ForwardCache<T>,
    head: ForwardCache<T>,
    features: Tensor<T>,
    labels: Vec<usize>,
    logits: Vec<T>,
}

impl GanModel<f32> {
    /// Fresh model whose embedding rows are initialised per dataset block,
    /// so a dataset's rows do not depend on what else shares the model.
    pub fn init(
        arch: &GanArch,
        shape: ImageShape,
        blocks: &[ClassBlock],
        target_classes: usize,
        spectral_norm: bool,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let num_classes = blocks.iter().map(|b| b.base + b.classes).max().unwrap_or(0);
        if num_classes == 0 || shape.is_empty() {
            return Err(GanError::Config("model needs classes and a non-empty image shape".into()));
        }
        let mut model = Self {
            arch: arch.clone(),
            shape,
            num_classes,
            target_classes,
            spectral_norm,
            theta: ParamSet::new(),
            phi: ParamSet::new(),
            sn: SpectralSet::new(),
        };
        let g_spec = model.g_spec();
        model.theta = init_params(&g_spec, seed)?;
        model.phi = init_params(&model.trunk_spec(), seed)?;
        model.phi.extend(init_params(&model.head_spec(), seed)?);
        model.phi.insert(D_EMBED, Tensor::zeros(&[num_classes, arch.feature_width()]));
        for block in blocks {
            model.init_embedding_block(&g_spec.embed_name(), block, seed)?;
            model.init_embedding_block(D_EMBED, block, seed)?;
        }
        if spectral_norm {
            model.sn = init_spectral(&model.trunk_spec(), &model.phi, seed)?;
            model.sn.extend(init_spectral(&model.head_spec(), &model.phi, seed)?);
        }
        Ok(model)
    }

    fn init_embedding_block(&mut self, name: &str, block: &ClassBlock, seed: u64) -> Result<()> {
        let table = if name == D_EMBED {
            self.phi.get_mut(name)?
        } else {
            self.theta.get_mut(name)?
        };
        let dim = table.cols();
        let base = rng::mix(rng::key(name), block.key);
        for c in 0..block.classes {
            let row = init_embedding_row(seed, rng::mix(base, c as u64), dim);
            table.row_mut(block.base + c).copy_from_slice(&row);
        }
        Ok(())
    }

    /// Model for a single dataset with labels `0..K`.
    pub fn for_set(arch: &GanArch, set: &LabeledImageSet, spectral_norm: bool, seed: u64) -> Result<Self> {
        let block = ClassBlock {
            key: domain_key(set, 0),
            base: 0,
            classes: set.num_classes(),
        };
        Self::init(arch, ImageShape::of(set), &[block], set.num_classes(), spectral_norm, seed)
    }

    /// Model over the merged label space of `pair`.
    pub fn for_pair(arch: &GanArch, pair: &DomainPair, spectral_norm: bool, seed: u64) -> Result<Self> {
        if !pair.target.same_geometry(&pair.outer) {
            return Err(GanError::Config("target and outer images differ in size".into()));
        }
        let blocks = [
            ClassBlock {
                key: domain_key(&pair.target, 0),
                base: 0,
                classes: pair.target_classes(),
            },
            ClassBlock {
                key: domain_key(&pair.outer, pair.label_offset),
                base: pair.label_offset,
                classes: pair.outer_classes(),
            },
        ];
        Self::init(
            arch,
            ImageShape::of(&pair.target),
            &blocks,
            pair.target_classes(),
            spectral_norm,
            seed,
        )
    }

    pub fn sample_noise(&self, rng: &mut Rng, n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, self.arch.z_dim], |_| StandardNormal.sample(rng))
    }

    /// Generated images quantized to bytes, one per label.
    pub fn generate_bytes(&self, labels: &[usize], rng: &mut Rng) -> Result<Vec<u8>> {
        let z = self.sample_noise(rng, labels.len());
        let x = self.generate(&z, labels)?;
        Ok(x.data().iter().map(|&v| unit_to_byte(v)).collect())
    }

    /// Generated set with labels in `0..num_classes` of the returned set.
    pub fn generate_set(
        &self,
        name: &str,
        labels: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<LabeledImageSet> {
        let pixels = self.generate_bytes(labels, rng)?;
        Ok(LabeledImageSet::new(
            name,
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            num_classes,
            labels.iter().map(|&l| l as u16).collect(),
            pixels,
        )?)
    }

    /// Names of every transferable (label-space independent) tensor.
    pub fn is_embedding(name: &str) -> bool {
        name.ends_with(".embed")
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Loss value with gradients for both parameter sets. The set a loss does
/// not train is all zeros.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub loss: T,
    pub theta: ParamSet<T>,
    pub phi: ParamSet<T>,
}

/// `mean softplus(−D(x_real,y)) + mean softplus(D(x_fake,y'))`, i.e. the
/// binary cross-entropy of a discriminator separating real from fake.
pub fn discriminator_loss<T: Real>(
    model: &GanModel<T>,
    real: &Tensor<T>,
    real_labels: &[usize],
    fake: &Tensor<T>,
    fake_labels: &[usize],
) -> Result<LossGrads<T>> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(GanError::Config("discriminator batches must be non-empty".into()));
    }
    let fr = model.d_forward(real, real_labels)?;
    let ff = model.d_forward(fake, fake_labels)?;
    let (inv_r, inv_f) = (T::one() / T::of(real.rows() as f64), T::one() / T::of(fake.rows() as f64));
    let mut loss = T::zero();
    let mut dr = Vec::with_capacity(real.rows());
    for &l in &fr.logits {
        loss += softplus(-l) * inv_r;
        dr.push(-sigmoid(-l) * inv_r);
    }
    let mut df = Vec::with_capacity(fake.rows());
    for &l in &ff.logits {
        loss += softplus(l) * inv_f;
        df.push(sigmoid(l) * inv_f);
    }
    let (gr, _) = model.d_backward(&fr, &dr, true)?;
    let (gf, _) = model.d_backward(&ff, &df, true)?;
    let mut phi = gr.expect("requested");
    phi.add_scaled(&gf.expect("requested"), T::one());
    Ok(LossGrads {
        loss,
        theta: model.theta.zeros_like(),
        phi,
    })
}

/// Non-saturating generator loss `−mean log σ(D(G(z,y),y))`; φ is held
/// constant.
pub fn generator_loss<T: Real>(model: &GanModel<T>, z: &Tensor<T>, labels: &[usize]) -> Result<LossGrads<T>> {
    if z.rows() == 0 {
        return Err(GanError::Config("generator batch must be non-empty".into()));
    }
    model.check_labels(labels)?;
    let (x, g_cache) = model.g_forward(z, labels)?;
    let fwd = model.d_forward(&x, labels)?;
    let inv = T::one() / T::of(z.rows() as f64);
    let mut loss = T::zero();
    let mut dl = Vec::with_capacity(z.rows());
    for &l in &fwd.logits {
        loss += softplus(-l) * inv;
        dl.push(-sigmoid(-l) * inv);
    }
    let dx = model.d_backward(&fwd, &dl, false)?.1.expect("input gradient requested");
    let (theta, _) = backward(&model.g_spec(), &model.theta, &g_cache, &dx)?;
    Ok(LossGrads {
        loss,
        theta,
        phi: model.phi.zeros_like(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the target domain; the outer domain gets `1 − alpha`.
    pub alpha: f64,
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: u64,
    /// Generator steps between IS evaluations (0 disables them).
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub patience: usize,
    pub seed: u64,
    pub spectral_norm: bool,
    /// Draw new noise for the generator step instead of reusing the last
    /// discriminator step's noise and labels.
    pub fresh_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: 64,
            d_steps: 1,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.9,
            iterations: 2_000,
            eval_interval: 250,
            eval_samples: 1_024,
            patience: 5,
            seed: 0,
            spectral_norm: true,
            fresh_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GanError::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.d_steps == 0 {
            return bad("d_steps must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eval_interval > 0 && self.eval_samples < 2 {
            return bad("IS evaluation needs at least 2 samples");
        }
        Ok(())
    }
}

/// Best IS so far and the run of evaluations that failed to beat it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub drops: usize,
    pub stopped: bool,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best: f64::NEG_INFINITY,
            drops: 0,
            stopped: false,
        }
    }
}

pub fn early_stop_update(state: EarlyStopState, is_value: f64, patience: usize) -> EarlyStopState {
    if state.stopped {
        return state;
    }
    if is_value > state.best {
        EarlyStopState {
            best: is_value,
            drops: 0,
            stopped: false,
        }
    } else {
        let drops = (state.drops + 1).min(patience);
        EarlyStopState {
            best: state.best,
            drops,
            stopped: drops >= patience,
        }
    }
}

/// One record per generator step. Per-domain losses are `None` for domains
/// that did not take part.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_d_t: Option<f64>,
    pub loss_d_o: Option<f64>,
    pub loss_g: f64,
    pub loss_g_t: Option<f64>,
    pub loss_g_o: Option<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub is: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "iter,loss_d,loss_d_t,loss_d_o,loss_g,loss_g_t,loss_g_o,lr_g,lr_d,is";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss_d,
            opt(self.loss_d_t),
            opt(self.loss_d_o),
            self.loss_g,
            opt(self.loss_g_t),
            opt(self.loss_g_o),
            self.lr_g,
            self.lr_d,
            opt(self.is)
        )
    }
}

pub fn format_log(log: &[TrainLogRecord]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Target,
    Outer,
}

/// A dataset taking part in training, with labels already in the model's
/// label space.
struct Domain<'a> {
    set: &'a LabeledImageSet,
    base: usize,
    classes: usize,
    weight: f64,
    role: Role,
    rng: Rng,
    last: Option<(Tensor<f32>, Vec<usize>)>,
}

impl<'a> Domain<'a> {
    fn new(set: &'a LabeledImageSet, base: usize, classes: usize, weight: f64, role: Role, seed: u64) -> Result<Self> {
        if set.is_empty() {
            return Err(GanError::EmptyDomain(set.name().to_owned()));
        }
        let key = rng::mix(rng::key("domain"), domain_key(set, base));
        Ok(Self {
            set,
            base,
            classes,
            weight,
            role,
            rng: rng::stream(seed, key),
            last: None,
        })
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GanModel<f32>,
    pub log: Vec<TrainLogRecord>,
    pub early_stop: EarlyStopState,
}

fn diverged(iteration: u64, log: &[TrainLogRecord]) -> GanError {
    GanError::Divergence {
        iteration,
        log: log.to_vec(),
    }
}

/// Spectral estimates collapse once updated weights overflow.
fn blown_up(e: GanError, iteration: u64, log: &[TrainLogRecord]) -> GanError {
    match e {
        GanError::Nn(NnError::DegenerateWeight { .. }) => diverged(iteration, log),
        e => e,
    }
}

fn train_domains(
    mut model: GanModel<f32>,
    mut domains: Vec<Domain<'_>>,
    cfg: &TrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    domains.retain(|d| d.weight != 0.0);
    let mut adam_g = AdamState::new(&model.theta);
    let mut adam_d = AdamState::new(&model.phi);
    let mut log = Vec::new();
    let mut stop = EarlyStopState::default();
    let pixels = model.shape.len();
    for it in 0..cfg.iterations {
        let lr_g = lr_schedule(it, cfg.iterations, cfg.lr_g)?;
        let lr_d = lr_schedule(it, cfg.iterations, cfg.lr_d)?;
        let iteration = it + 1;

        let mut d_losses = (None, None);
        let mut loss_d = 0.0;
        for _ in 0..cfg.d_steps {
            if it == 0 {
                model.refresh_spectral()?;
            } else {
                model.refresh_spectral().map_err(|e| blown_up(e, iteration, &log))?;
            }
            let mut total = model.phi.zeros_like();
            loss_d = 0.0;
            for d in domains.iter_mut() {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| d.rng.random_range(0..d.set.len())).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| d.set.label(i)).collect();
                let real = Tensor::matrix(idx.len(), pixels, d.set.unit_rows(&idx))?;
                let z = model.sample_noise(&mut d.rng, cfg.batch_size);
                let fake = model.generate(&z, &labels)?;
                let out = discriminator_loss(&model, &real, &labels, &fake, &labels)
                    .map_err(|e| blown_up(e, iteration, &log))?;
                let l = f64::from(out.loss);
                if !l.is_finite() {
                    return Err(diverged(iteration, &log));
                }
                total.add_scaled(&out.phi, d.weight as f32);
                loss_d += d.weight * l;
                match d.role {
                    Role::Target => d_losses.0 = Some(l),
                    Role::Outer => d_losses.1 = Some(l),
                }
                d.last = Some((z, labels));
            }
            adam_step(&mut model.phi, &total, &mut adam_d, lr_d, cfg.beta1, cfg.beta2, 1e-8)?;
            if !model.phi.is_finite() {
                return Err(diverged(iteration, &log));
            }
        }

        let mut g_losses = (None, None);
        let mut loss_g = 0.0;
        let mut total = model.theta.zeros_like();
        for d in domains.iter_mut() {
            let (z, labels) = match (cfg.fresh_noise, d.last.take()) {
                (false, Some(last)) => last,
                _ => {
                    let z = model.sample_noise(&mut d.rng, cfg.batch_size);
                    let labels = (0..cfg.batch_size).map(|_| d.base + d.rng.random_range(0..d.classes)).collect();
                    (z, labels)
                }
            };
            let out = generator_loss(&model, &z, &labels).map_err(|e| blown_up(e, iteration, &log))?;
            let l = f64::from(out.loss);
            if !l.is_finite() {
                return Err(diverged(iteration, &log));
            }
            total.add_scaled(&out.theta, d.weight as f32);
            loss_g += d.weight * l;
            match d.role {
                Role::Target => g_losses.0 = Some(l),
                Role::Outer => g_losses.1 = Some(l),
            }
        }
        adam_step(&mut model.theta, &total, &mut adam_g, lr_g, cfg.beta1, cfg.beta2, 1e-8)?;
        if !model.theta.is_finite() {
            return Err(diverged(iteration, &log));
        }

        let mut is = None;
        if let Some(ex) = extractor {
            if cfg.eval_interval > 0 && iteration % cfg.eval_interval == 0 {
                let v = evaluate_is(&model, ex, cfg.eval_samples, cfg.seed, iteration)?;
                stop = early_stop_update(stop, v, cfg.patience);
                is = Some(v);
            }
        }
        log.push(TrainLogRecord {
            iteration,
            loss_d,
            loss_d_t: d_losses.0,
            loss_d_o: d_losses.1,
            loss_g,
            loss_g_t: g_losses.0,
            loss_g_o: g_losses.1,
            lr_g,
            lr_d,
            is,
        });
        if stop.stopped {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        early_stop: stop,
    })
}

/// IS of `n` generated target-class samples (labels cycle through the
/// target classes).
pub fn evaluate_is(
    model: &GanModel<f32>,
    extractor: &dyn FeatureExtractor,
    n: usize,
    seed: u64,
    iteration: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, rng::mix(rng::key("is-eval"), iteration));
    let labels: Vec<usize> = (0..n).map(|i| i % model.target_classes).collect();
    let set = model.generate_set("is-eval", &labels, model.target_classes, &mut rng)?;
    Ok(inception_score(&set, extractor)?)
}

/// Single-domain conditional GAN on `set`.
pub fn cgan_train(
    set: &LabeledImageSet,
    arch: &GanArch,
    cfg: &TrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = GanModel::for_set(arch, set, cfg.spectral_norm, cfg.seed)?;
    cgan_continue(model, set, cfg, extractor)
}

/// Continues training `model` on `set` alone.
pub fn cgan_continue(
    model: GanModel<f32>,
    set: &LabeledImageSet,
    cfg: &TrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<TrainOutcome> {
    if !ImageShape::of(set).eq(&model.shape) || set.num_classes() > model.num_classes {
        return Err(GanError::Config("dataset does not fit the model".into()));
    }
    let domain = Domain::new(set, 0, set.num_classes(), 1.0, Role::Target, cfg.seed)?;
    train_domains(model, vec![domain], cfg, extractor)
}

/// Multi-domain training: every step combines the target and outer losses
/// as `α·L_T + (1−α)·L_O`.
pub fn df_train(
    pair: &DomainPair,
    arch: &GanArch,
    cfg: &TrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = GanModel::for_pair(arch, pair, cfg.spectral_norm, cfg.seed)?;
    let domains = vec![
        Domain::new(&pair.target, 0, pair.target_classes(), cfg.alpha, Role::Target, cfg.seed)?,
        Domain::new(
            &pair.outer,
            pair.label_offset,
            pair.outer_classes(),
            1.0 - cfg.alpha,
            Role::Outer,
            cfg.seed,
        )?,
    ];
    train_domains(model, domains, cfg, extractor)
}

#[derive(Debug, Clone)]
pub struct TganOutcome {
    pub pretrained: GanModel<f32>,
    pub pretrain_log: Vec<TrainLogRecord>,
    pub finetuned: TrainOutcome,
}

/// Replaces the label-specific tensors of a pretrained model with fresh
/// target-class rows; every other tensor and the spectral state carry over.
pub fn transfer_to(pretrained: &GanModel<f32>, target: &LabeledImageSet, seed: u64) -> Result<GanModel<f32>> {
    let mut model = GanModel::for_set(&pretrained.arch, target, pretrained.spectral_norm, seed)?;
    if model.shape != pretrained.shape {
        return Err(GanError::Config("pretrained model has a different image shape".into()));
    }
    for (name, t) in pretrained.theta.iter().filter(|(n, _)| !GanModel::is_embedding(n)) {
        model.theta.insert(name, t.clone());
    }
    for (name, t) in pretrained.phi.iter().filter(|(n, _)| !GanModel::is_embedding(n)) {
        model.phi.insert(name, t.clone());
    }
    model.sn = pretrained.sn.clone();
    Ok(model)
}

/// Pretrains on `outer`, then fine-tunes on `target` with re-initialised
/// class embeddings.
pub fn tgan_train(
    target: &LabeledImageSet,
    outer: &LabeledImageSet,
    arch: &GanArch,
    cfg_pre: &TrainConfig,
    cfg_fine: &TrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<TganOutcome> {
    if !target.same_geometry(outer) {
        return Err(GanError::Config("target and outer images differ in size".into()));
    }
    if cfg_pre.spectral_norm != cfg_fine.spectral_norm {
        return Err(GanError::Config("both phases must agree on spectral normalization".into()));
    }
    let pre = cgan_train(outer, arch, cfg_pre, None)?;
    let model = transfer_to(&pre.model, target, cfg_fine.seed)?;
    let finetuned = cgan_continue(model, target, cfg_fine, extractor)?;
    Ok(TganOutcome {
        pretrained: pre.model,
        pretrain_log: pre.log,
        finetuned,
    })
}

/// Metadata stored next to a GAN checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct GanMeta {
    pub mode: String,
    pub alpha: f64,
    pub seed: u64,
    pub iteration: u64,
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes θ, φ and the spectral vectors as one DFCK file plus a `.meta`
/// sidecar of `key = value` lines.
pub fn save_gan(model: &GanModel<f32>, meta: &GanMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut all = model.theta.clone();
    all.extend(model.phi.clone());
    for (name, s) in model.sn.iter() {
        all.insert(format!("sn.{name}.u"), Tensor::new(vec![s.u.len()], s.u.clone())?);
        all.insert(format!("sn.{name}.v"), Tensor::new(vec![s.v.len()], s.v.clone())?);
    }
    save_checkpoint(&all, path)?;
    let a = &model.arch;
    let text = format!(
        "mode = {}\nalpha = {}\nseed = {}\niteration = {}\nz_dim = {}\nembed_dim = {}\ng_hidden = {}\nd_hidden = {}\nchannels = {}\nheight = {}\nwidth = {}\nnum_classes = {}\ntarget_classes = {}\nspectral_norm = {}\n",
        meta.mode,
        meta.alpha,
        meta.seed,
        meta.iteration,
        a.z_dim,
        a.embed_dim,
        list(&a.g_hidden),
        list(&a.d_hidden),
        model.shape.channels,
        model.shape.height,
        model.shape.width,
        model.num_classes,
        model.target_classes,
        model.spectral_norm
    );
    let mp = meta_path(path);
    std::fs::write(&mp, text).map_err(|source| GanError::Io { path: mp, source })
}

fn parse_meta(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GanError::Meta(format!("line without `=`: {line}")))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

fn field<V: std::str::FromStr>(map: &std::collections::BTreeMap<String, String>, key: &str) -> Result<V> {
    map.get(key)
        .ok_or_else(|| GanError::Meta(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| GanError::Meta(format!("bad value for `{key}`")))
}

fn field_list(map: &std::collections::BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let raw: String = field(map, key)?;
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| GanError::Meta(format!("bad list `{key}`"))))
        .collect()
}

pub fn load_gan(path: impl AsRef<Path>) -> Result<(GanModel<f32>, GanMeta)> {
    let path = path.as_ref();
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|source| GanError::Io { path: mp, source })?;
    let map = parse_meta(&text)?;
    let meta = GanMeta {
        mode: field(&map, "mode")?,
        alpha: field(&map, "alpha")?,
        seed: field(&map, "seed")?,
        iteration: field(&map, "iteration")?,
    };
    let arch = GanArch {
        z_dim: field(&map, "z_dim")?,
        embed_dim: field(&map, "embed_dim")?,
        g_hidden: field_list(&map, "g_hidden")?,
        d_hidden: field_list(&map, "d_hidden")?,
    };
    arch.validate()?;
    let mut model = GanModel {
        arch,
        shape: ImageShape {
            channels: field(&map, "channels")?,
            height: field(&map, "height")?,
            width: field(&map, "width")?,
        },
        num_classes: field(&map, "num_classes")?,
        target_classes: field(&map, "target_classes")?,
        spectral_norm: field(&map, "spectral_norm")?,
        theta: ParamSet::new(),
        phi: ParamSet::new(),
        sn: SpectralSet::new(),
    };
    let all = load_checkpoint(path)?;
    let mut sn_parts: std::collections::BTreeMap<String, (Vec<f32>, Vec<f32>)> = Default::default();
    for (name, t) in all.iter() {
        if let Some(rest) = name.strip_prefix("sn.") {
            let (layer, part) = rest
                .rsplit_once('.')
                .ok_or_else(|| GanError::Meta(format!("bad spectral tensor `{name}`")))?;
            let entry = sn_parts.entry(layer.to_owned()).or_default();
            match part {
                "u" => entry.0 = t.data().to_vec(),
                "v" => entry.1 = t.data().to_vec(),
                _ => return Err(GanError::Meta(format!("bad spectral tensor `{name}`"))),
            }
        } else if name.starts_with("g.") {
            model.theta.insert(name, t.clone());
        } else if name.starts_with("d.") {
            model.phi.insert(name, t.clone());
        } else {
            return Err(GanError::Meta(format!("unexpected tensor `{name}`")));
        }
    }
    for (layer, (u, v)) in sn_parts {
        model.sn.insert(layer, SpectralNormState { u, v });
    }
    let reference = GanModel::init(
        &model.arch,
        model.shape,
        &[ClassBlock {
            key: 0,
            base: 0,
            classes: model.num_classes,
        }],
        model.target_classes,
        model.spectral_norm,
        0,
    )?;
    reference.theta.check_compatible(&model.theta)?;
    reference.phi.check_compatible(&model.phi)?;
    if model.spectral_norm && reference.sn.len() != model.sn.len() {
        return Err(GanError::Meta("spectral state does not match the architecture".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain, DomainKind, SynthDomainSpec};
    use crate::nn::{max_relative_error, numeric_gradient};

    fn tiny_arch() -> GanArch {
        GanArch {
            z_dim: 3,
            embed_dim: 2,
            g_hidden: vec![5],
            d_hidden: vec![6, 4],
        }
    }

    fn tiny_model(sn: bool) -> GanModel<f64> {
        let shape = ImageShape { channels: 1, height: 2, width: 3 };
        let block = ClassBlock { key: 1, base: 0, classes: 3 };
        let mut m = GanModel::init(&tiny_arch(), shape, &[block], 3, sn, 5).unwrap();
        for (_, t) in m.phi.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i % 5) as f32 - 2.0);
            }
        }
        m.cast()
    }

    fn inputs() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let x = Tensor::from_fn(&[4, 6], |i| ((i * 7) % 11) as f64 / 11.0);
        let f = Tensor::from_fn(&[4, 6], |i| ((i * 5) % 9) as f64 / 9.0);
        let z = Tensor::from_fn(&[4, 3], |i| ((i * 3) % 7) as f64 / 3.5 - 1.0);
        (x, f, z)
    }

    #[test]
    fn projection_logit_by_hand() {
        let mut m = tiny_model(false);
        let y = [1usize];
        let x = Tensor::from_fn(&[1, 6], |i| i as f64 / 6.0);
        for (name, t) in m.phi.iter_mut() {
            if name.starts_with(HEAD_PREFIX) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let fwd = m.d_forward(&x, &y).unwrap();
        let e = m.phi.get(D_EMBED).unwrap().row(1).to_vec();
        let expect: f64 = fwd.features.row(0).iter().zip(&e).map(|(a, b)| a * b).sum();
        assert!((fwd.logits[0] - expect).abs() < 1e-12);
        m.phi.get_mut(D_EMBED).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let a = m.d_logits(&x, &[0]).unwrap()[0];
        let b = m.d_logits(&x, &[2]).unwrap()[0];
        assert_eq!(a, b);
        assert!(m.d_logits(&x, &[3]).is_err());
    }

    #[test]
    fn discriminator_gradients() {
        for sn in [false, true] {
            let m = tiny_model(sn);
            let (x, f, _) = inputs();
            let (yr, yf) = ([0, 1, 2, 1], [2, 2, 0, 1]);
            let out = discriminator_loss(&m, &x, &yr, &f, &yf).unwrap();
            let numeric = numeric_gradient(
                &m.phi,
                |p| {
                    let mm = GanModel { phi: p.clone(), ..m.clone() };
                    discriminator_loss(&mm, &x, &yr, &f, &yf).unwrap().loss
                },
                1e-5,
            );
            let err = max_relative_error(&out.phi, &numeric);
            assert!(err < 1e-6, "sn={sn}: {err}");
            assert!(out.theta.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn generator_gradients_and_stop_gradient() {
        let m = tiny_model(true);
        let (_, _, z) = inputs();
        let y = [0, 2, 1, 1];
        let out = generator_loss(&m, &z, &y).unwrap();
        let numeric = numeric_gradient(
            &m.theta,
            |p| {
                let mm = GanModel { theta: p.clone(), ..m.clone() };
                generator_loss(&mm, &z, &y).unwrap().loss
            },
            1e-5,
        );
        assert!(max_relative_error(&out.theta, &numeric) < 1e-6);
        assert!(out.phi.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_logits_give_log_two() {
        let mut m = tiny_model(false);
        for (_, t) in m.phi.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (x, f, z) = inputs();
        let y = [0, 1, 2, 0];
        let d = discriminator_loss(&m, &x, &y, &f, &y).unwrap().loss;
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let g = generator_loss(&m, &z, &y).unwrap().loss;
        assert!((g - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn early_stop_traces() {
        let mut s = EarlyStopState::default();
        for v in [2.0, 2.1, 2.2] {
            s = early_stop_update(s, v, 5);
        }
        assert_eq!((s.drops, s.stopped), (0, false));
        let mut s = early_stop_update(EarlyStopState::default(), 3.0, 5);
        for (i, v) in [3.0, 2.0, 2.5, 1.0, 3.0].into_iter().enumerate() {
            s = early_stop_update(s, v, 5);
            assert_eq!(s.stopped, i == 4);
        }
        let mut s = EarlyStopState::default();
        for v in [3.0, 2.9, 3.1, 2.9, 2.8] {
            s = early_stop_update(s, v, 3);
        }
        assert_eq!((s.drops, s.stopped), (2, false));
    }

    fn small_set(kind: DomainKind, seed: u64) -> LabeledImageSet {
        synth_domain(&SynthDomainSpec::new(kind, 8), 4, seed).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            iterations: 3,
            eval_interval: 0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_arch() -> GanArch {
        GanArch {
            z_dim: 4,
            embed_dim: 3,
            g_hidden: vec![8],
            d_hidden: vec![8],
        }
    }

    #[test]
    fn zero_iterations_return_initial_model() {
        let set = small_set(DomainKind::SolidShapes, 1);
        let cfg = TrainConfig { iterations: 0, ..small_cfg() };
        let out = cgan_train(&set, &small_arch(), &cfg, None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model, GanModel::for_set(&small_arch(), &set, true, cfg.seed).unwrap());
    }

    #[test]
    fn log_has_one_record_per_generator_step() {
        let set = small_set(DomainKind::SolidShapes, 1);
        let out = cgan_train(&set, &small_arch(), &small_cfg(), None).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|r| r.loss_d_o.is_none() && r.loss_d_t == Some(r.loss_d)));
    }

    #[test]
    fn combined_losses_are_weighted_sums() {
        let t = small_set(DomainKind::SolidShapes, 1);
        let o = small_set(DomainKind::OutlineShapes, 2);
        let pair = crate::data::merge_domains(&t, &o, false).unwrap();
        let cfg = TrainConfig { alpha: 0.3, ..small_cfg() };
        let out = df_train(&pair, &small_arch(), &cfg, None).unwrap();
        for r in &out.log {
            let d = 0.3 * r.loss_d_t.unwrap() + 0.7 * r.loss_d_o.unwrap();
            let g = 0.3 * r.loss_g_t.unwrap() + 0.7 * r.loss_g_o.unwrap();
            assert!((d - r.loss_d).abs() < 1e-6 && (g - r.loss_g).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let set = small_set(DomainKind::SolidShapes, 1);
        let out = cgan_train(&set, &small_arch(), &small_cfg(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dfck");
        let meta = GanMeta { mode: "cgan".into(), alpha: 1.0, seed: 3, iteration: 3 };
        save_gan(&out.model, &meta, &path).unwrap();
        let (back, m) = load_gan(&path).unwrap();
        assert_eq!(back, out.model);
        assert_eq!(m, meta);
    }
}
