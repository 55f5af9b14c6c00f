//! Fourier neural operator regressor for cubes of any admissible edge.
//!
//! Forward path:
//!
//! ```text
//! voxels --lift--> B0 --unit--> B1 ... --unit--> Bl --mix--> M --head--> g --classifier--> k_hat
//! ```
//!
//! Each unit computes `act(K B + W B + b)` where `K` is a spectral
//! convolution over the retained low-frequency corner. The head is either
//! the channel-wise pool (one value per channel, so `g` has `width`
//! entries for every grid size) or the baseline that drops to one channel
//! and pools adaptively over space.
//!
//! Parameter layout, by tensor name:
//!
//! | name                   | dtype   | dims                           |
//! |------------------------|---------|--------------------------------|
//! | `lift.weight/bias`     | f64     | `[w, 1]`, `[w]`                |
//! | `spectral.{k}.weight`  | complex | `[2 m1, 2 m2, m3, w, w]`       |
//! | `unit.{t}.weight/bias` | f64     | `[w, w]`, `[w]`                |
//! | `mix.weight/bias`      | f64     | `[w, w]`, `[w]`                |
//! | `project.weight/bias`  | f64     | `[1, w]`, `[1]` (adaptive)     |
//! | `classifier.{i}.*`     | f64     | `weight`, `bias`, `gain`, `shift` per hidden layer; `weight`, `bias` on the output |
//!
//! The spectral bank holds `spectral_kernels` tensors and unit `t` uses
//! kernel `t % spectral_kernels`. With the default sizes (width 64, modes
//! 2, three units and kernels, classifier `[128, 128, 1]`) the model has
//! 828,673 real parameters; complex entries count twice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::spectral::{gemm, gemm_nt, gemm_tn, retained_per_channel, ModeSet, TruncatedDft};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    StaticChannelPool,
    AdaptiveSpatialPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output; ReLU uses 0 at 0.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => (y > 0.0) as u8 as f64,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationConfig {
    /// Fourier units and hidden classifier layers.
    pub hidden: Activation,
    pub output: Activation,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            hidden: Activation::Relu,
            output: Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    /// Retained modes along `(z, y, x)`.
    pub modes: [usize; 3],
    pub num_units: usize,
    /// Size of the spectral weight bank shared cyclically by the units.
    pub spectral_kernels: usize,
    pub head: Head,
    pub pool_variant: PoolVariant,
    pub classifier_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: ActivationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            modes: [2, 2, 2],
            num_units: 3,
            spectral_kernels: 3,
            head: Head::StaticChannelPool,
            pool_variant: PoolVariant::Max,
            classifier_sizes: vec![128, 128, 1],
            dropout_rate: 0.3,
            activation: ActivationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("width must be >= 1"));
        }
        if self.modes.contains(&0) {
            return Err(Error::config(format!("modes must be >= 1, got {:?}", self.modes)));
        }
        if self.num_units == 0 || self.spectral_kernels == 0 {
            return Err(Error::config("num_units and spectral_kernels must be >= 1"));
        }
        match self.classifier_sizes.last() {
            Some(1) => {}
            _ => {
                return Err(Error::config(format!(
                    "classifier_sizes must end in a single output, got {:?}",
                    self.classifier_sizes
                )))
            }
        }
        if self.classifier_sizes.contains(&0) {
            return Err(Error::config("classifier layer sizes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Smallest edge length the spectral units accept.
    pub fn min_edge(&self) -> usize {
        let spectral = 2 * self.modes.iter().copied().max().unwrap_or(1);
        match self.head {
            Head::StaticChannelPool => spectral,
            Head::AdaptiveSpatialPool => {
                let f = canonical_factorization(self.width);
                spectral.max(f.iter().copied().max().unwrap_or(1))
            }
        }
    }

    pub fn check_edge(&self, n: usize) -> Result<()> {
        ModeSet::new(n, self.modes)?;
        if self.head == Head::AdaptiveSpatialPool {
            pool_shape_for(self.width, n)?;
        }
        Ok(())
    }
}

/// Factor triple with product `width` and the smallest spread between its
/// largest and smallest factor; ties go to the lexicographically smallest.
pub fn canonical_factorization(width: usize) -> [usize; 3] {
    let mut best = [1, 1, width];
    for a in 1..=width {
        if !width.is_multiple_of(a) {
            continue;
        }
        for b in 1..=width / a {
            if !(width / a).is_multiple_of(b) {
                continue;
            }
            let cand = [a, b, width / a / b];
            let spread = |t: [usize; 3]| t.iter().max().unwrap() - t.iter().min().unwrap();
            if spread(cand) < spread(best) || (spread(cand) == spread(best) && cand < best) {
                best = cand;
            }
        }
    }
    best
}

fn pool_shape_for(width: usize, n: usize) -> Result<[usize; 3]> {
    let shape = canonical_factorization(width);
    if shape.iter().any(|&w| w > n) {
        return Err(Error::config(format!(
            "adaptive pool shape {shape:?} for width {width} does not fit edge length {n}"
        )));
    }
    Ok(shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F64,
    C64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, dtype: DType, dims: &[usize]) -> Self {
        Self {
            name: name.into(),
            dtype,
            dims: dims.to_vec(),
        }
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }

    /// Length of the backing `f64` buffer (complex values are interleaved).
    pub fn real_len(&self) -> usize {
        match self.dtype {
            DType::F64 => self.elements(),
            DType::C64 => 2 * self.elements(),
        }
    }
}

/// Tensor indices into a [`ModelParams`].
#[derive(Clone, Debug, PartialEq, Eq)]
struct Slots {
    spectral: usize,
    units: usize,
    mix: usize,
    project: Option<usize>,
    classifier: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Slots) {
    use DType::*;
    let w = cfg.width;
    let [m1, m2, m3] = cfg.modes;
    let mut specs = vec![
        TensorSpec::new("lift.weight", F64, &[w, 1]),
        TensorSpec::new("lift.bias", F64, &[w]),
    ];
    let spectral = specs.len();
    for k in 0..cfg.spectral_kernels {
        specs.push(TensorSpec::new(
            format!("spectral.{k}.weight"),
            C64,
            &[2 * m1, 2 * m2, m3, w, w],
        ));
    }
    let units = specs.len();
    for t in 0..cfg.num_units {
        specs.push(TensorSpec::new(format!("unit.{t}.weight"), F64, &[w, w]));
        specs.push(TensorSpec::new(format!("unit.{t}.bias"), F64, &[w]));
    }
    let mix = specs.len();
    specs.push(TensorSpec::new("mix.weight", F64, &[w, w]));
    specs.push(TensorSpec::new("mix.bias", F64, &[w]));
    let project = (cfg.head == Head::AdaptiveSpatialPool).then(|| {
        let at = specs.len();
        specs.push(TensorSpec::new("project.weight", F64, &[1, w]));
        specs.push(TensorSpec::new("project.bias", F64, &[1]));
        at
    });
    let classifier = specs.len();
    let mut fan_in = w;
    let last = cfg.classifier_sizes.len().saturating_sub(1);
    for (i, &out) in cfg.classifier_sizes.iter().enumerate() {
        specs.push(TensorSpec::new(format!("classifier.{i}.weight"), F64, &[out, fan_in]));
        specs.push(TensorSpec::new(format!("classifier.{i}.bias"), F64, &[out]));
        if i < last {
            specs.push(TensorSpec::new(format!("classifier.{i}.gain"), F64, &[out]));
            specs.push(TensorSpec::new(format!("classifier.{i}.shift"), F64, &[out]));
        }
        fan_in = out;
    }
    (
        specs,
        Slots {
            spectral,
            units,
            mix,
            project,
            classifier,
        },
    )
}

/// Expected tensor layout for a configuration.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    build_layout(cfg).0
}

/// Number of trainable reals for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    parameter_layout(cfg).iter().map(TensorSpec::real_len).sum()
}

/// All learnable arrays of one model. Gradients and Adam moments reuse
/// this type with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    specs: Vec<TensorSpec>,
    slots: Slots,
    tensors: Vec<Vec<f64>>,
}

pub type GradientSet = ModelParams;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (specs, slots) = build_layout(config);
        let tensors = specs.iter().map(|s| vec![0.0; s.real_len()]).collect();
        Ok(Self {
            config: config.clone(),
            specs,
            slots,
            tensors,
        })
    }

    /// Fan-in uniform init for real weights; spectral entries uniform in
    /// `[0, 1/width^2)` for both real and imaginary parts.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width as f64;
        for (spec, data) in p.specs.iter().zip(p.tensors.iter_mut()) {
            let name = spec.name.as_str();
            if name.ends_with(".gain") {
                data.fill(1.0);
            } else if name.ends_with(".shift") {
                data.fill(0.0);
            } else if spec.dtype == DType::C64 {
                let scale = 1.0 / (w * w);
                data.iter_mut().for_each(|v| *v = scale * rng.gen::<f64>());
            } else {
                let fan_in = fan_in_of(&p.specs, name);
                let bound = 1.0 / (fan_in as f64).sqrt();
                data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    /// Rebuild from named arrays, checking them against the layout.
    pub fn from_named(config: &ModelConfig, named: Vec<(TensorSpec, Vec<f64>)>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if named.len() != p.specs.len() {
            return Err(Error::Data(format!(
                "expected {} parameter arrays, found {}",
                p.specs.len(),
                named.len()
            )));
        }
        for ((spec, data), (want, slot)) in named.into_iter().zip(p.specs.iter().zip(p.tensors.iter_mut())) {
            if &spec != want || data.len() != want.real_len() {
                return Err(Error::Data(format!(
                    "parameter array {:?} {:?} does not match expected {:?} {:?}",
                    spec.name, spec.dims, want.name, want.dims
                )));
            }
            *slot = data;
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            specs: self.specs.clone(),
            slots: self.slots.clone(),
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.iter_mut().for_each(|t| t.fill(value));
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i]
    }

    fn lift(&self) -> (&[f64], &[f64]) {
        (self.t(0), self.t(1))
    }

    fn kernel_for_unit(&self, unit: usize) -> usize {
        self.slots.spectral + unit % self.config.spectral_kernels
    }

    fn unit(&self, t: usize) -> (usize, usize) {
        let i = self.slots.units + 2 * t;
        (i, i + 1)
    }

    fn classifier_layer(&self, i: usize) -> ClassifierSlots {
        let hidden = self.config.classifier_sizes.len() - 1;
        let base = self.slots.classifier + 4 * i.min(hidden);
        if i < hidden {
            ClassifierSlots {
                weight: base,
                bias: base + 1,
                affine: Some((base + 2, base + 3)),
            }
        } else {
            ClassifierSlots {
                weight: base,
                bias: base + 1,
                affine: None,
            }
        }
    }
}

fn fan_in_of(specs: &[TensorSpec], name: &str) -> usize {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    specs
        .iter()
        .find(|s| s.name == format!("{stem}.weight"))
        .map(|s| *s.dims.last().unwrap_or(&1))
        .unwrap_or(1)
}

struct ClassifierSlots {
    weight: usize,
    bias: usize,
    /// `(gain, shift)` on hidden layers.
    affine: Option<(usize, usize)>,
}

/// Channel-major activations, `width x n^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub width: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn new(width: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * n * n * n {
            return Err(Error::shape(format!(
                "{} values do not form {width} channels of edge {n}",
                data.len()
            )));
        }
        Ok(Self { width, n, data })
    }

    pub fn volume(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.volume();
        &self.data[c * v..(c + 1) * v]
    }
}

/// Pointwise affine `1 -> width`.
pub fn lift(voxels: &VoxelGrid, weight: &[f64], bias: &[f64]) -> FeatureField {
    let n = voxels.edge();
    let input = voxels.to_f64();
    FeatureField {
        width: weight.len(),
        n,
        data: lift_raw(&input, weight, bias),
    }
}

fn lift_raw(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let vol = input.len();
    let mut out = vec![0.0; weight.len() * vol];
    for (c, chunk) in out.chunks_exact_mut(vol).enumerate() {
        for (o, &a) in chunk.iter_mut().zip(input) {
            *o = weight[c] * a + bias[c];
        }
    }
    out
}

/// Pointwise affine `out = W x + b` over every voxel (`W` is `rows x width`).
fn pointwise_affine(weight: &[f64], bias: &[f64], x: &[f64], width: usize, vol: usize) -> Vec<f64> {
    let rows = bias.len();
    let mut out = vec![0.0; rows * vol];
    for (r, chunk) in out.chunks_exact_mut(vol).enumerate() {
        chunk.fill(bias[r]);
    }
    gemm(rows, width, vol, 1.0, weight, x, 1.0, &mut out);
    out
}

/// `Y[o, k] = sum_i R[k, o, i] X[i, k]` over retained modes.
fn mix_modes(r: &[f64], x: &[f64], width: usize, modes: usize) -> Vec<f64> {
    let mut y = vec![0.0; 2 * width * modes];
    for k in 0..modes {
        for o in 0..width {
            let (mut re, mut im) = (0.0, 0.0);
            let row = 2 * (k * width + o) * width;
            for i in 0..width {
                let (rr, ri) = (r[row + 2 * i], r[row + 2 * i + 1]);
                let xi = 2 * (i * modes + k);
                let (xr, xim) = (x[xi], x[xi + 1]);
                re += rr * xr - ri * xim;
                im += rr * xim + ri * xr;
            }
            y[2 * (o * modes + k)] = re;
            y[2 * (o * modes + k) + 1] = im;
        }
    }
    y
}

/// Spectral convolution over the retained corner; `r` has dims
/// `[2 m1, 2 m2, m3, width, width]` as interleaved complex values.
pub fn spectral_conv(b: &FeatureField, r: &[f64], modes: [usize; 3]) -> Result<FeatureField> {
    let dft = TruncatedDft::new(ModeSet::new(b.n, modes)?);
    let expected = 2 * retained_per_channel(modes) * b.width * b.width;
    if r.len() != expected {
        return Err(Error::shape(format!(
            "spectral weights need {expected} reals, got {}",
            r.len()
        )));
    }
    let (out, _) = spectral_conv_raw(&dft, &b.data, r, b.width);
    FeatureField::new(b.width, b.n, out)
}

fn spectral_conv_raw(dft: &TruncatedDft, b: &[f64], r: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let coeffs = dft.forward(b, width);
    let mixed = mix_modes(r, &coeffs, width, dft.modes().len());
    (dft.inverse(&mixed, width), coeffs)
}

/// `act(spectral_conv(B, R) + W B + b)` pointwise.
pub fn fno_unit(
    b: &FeatureField,
    r: &[f64],
    weight: &[f64],
    bias: &[f64],
    modes: [usize; 3],
    activation: Activation,
) -> Result<FeatureField> {
    let mut out = spectral_conv(b, r, modes)?;
    let lin = pointwise_affine(weight, bias, &b.data, b.width, b.volume());
    for (o, l) in out.data.iter_mut().zip(lin) {
        *o = activation.apply(*o + l);
    }
    Ok(out)
}

/// Per-channel reduction over all voxels; returns values and, for max,
/// the first argmax in flat order.
pub fn channel_pool(b: &FeatureField, variant: PoolVariant) -> (Vec<f64>, Vec<usize>) {
    channel_pool_raw(&b.data, b.width, b.volume(), variant)
}

/// Static max pooling over space: a vector of length `width` for any `n`.
pub fn channel_max_pool(b: &FeatureField) -> Vec<f64> {
    channel_pool(b, PoolVariant::Max).0
}

fn channel_pool_raw(data: &[f64], width: usize, vol: usize, variant: PoolVariant) -> (Vec<f64>, Vec<usize>) {
    let mut values = Vec::with_capacity(width);
    let mut argmax = Vec::with_capacity(width);
    for ch in data.chunks_exact(vol).take(width) {
        match variant {
            PoolVariant::Max => {
                let (mut best, mut at) = (ch[0], 0);
                for (i, &v) in ch.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                values.push(best);
                argmax.push(at);
            }
            PoolVariant::Mean => values.push(ch.iter().sum::<f64>() / vol as f64),
        }
    }
    (values, argmax)
}

/// Pointwise affine `width -> 1`.
pub fn project_drop(b: &FeatureField, weight: &[f64], bias: f64) -> Vec<f64> {
    pointwise_affine(weight, &[bias], &b.data, b.width, b.volume())
}

/// Half-open region `[floor(i n / w), ceil((i + 1) n / w))`.
pub fn adaptive_region(i: usize, n: usize, w: usize) -> (usize, usize) {
    (i * n / w, ((i + 1) * n).div_ceil(w))
}

/// Adaptive max pooling of an `n^3` field (`[z][y][x]`) to `out` cells,
/// flattened row-major. Returns values and flat argmax per cell.
pub fn adaptive_max_pool3d(z: &[f64], n: usize, out: [usize; 3]) -> Result<(Vec<f64>, Vec<usize>)> {
    if z.len() != n * n * n {
        return Err(Error::shape(format!("{} values is not a cube of edge {n}", z.len())));
    }
    if out.iter().any(|&w| w == 0 || w > n) {
        return Err(Error::config(format!(
            "adaptive pool shape {out:?} does not fit edge length {n}"
        )));
    }
    let mut values = Vec::with_capacity(out.iter().product());
    let mut argmax = Vec::with_capacity(values.capacity());
    for i1 in 0..out[0] {
        let (z0, z1) = adaptive_region(i1, n, out[0]);
        for i2 in 0..out[1] {
            let (y0, y1) = adaptive_region(i2, n, out[1]);
            for i3 in 0..out[2] {
                let (x0, x1) = adaptive_region(i3, n, out[2]);
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for zz in z0..z1 {
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = xx + n * (yy + n * zz);
                            if at == usize::MAX || z[idx] > best {
                                best = z[idx];
                                at = idx;
                            }
                        }
                    }
                }
                values.push(best);
                argmax.push(at);
            }
        }
    }
    Ok((values, argmax))
}

/// Dropout masks for one forward pass, drawn lazily from a seeded stream.
pub struct DropoutSource<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> DropoutSource<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    fn mask(&mut self, len: usize, rate: f64) -> Vec<f64> {
        let keep = 1.0 / (1.0 - rate);
        (0..len)
            .map(|_| if self.rng.gen::<f64>() >= rate { keep } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
struct ClassifierTrace {
    /// Input to each layer (last entry is the output layer's input).
    inputs: Vec<Vec<f64>>,
    /// Affine output before gain/shift, per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Activation output before dropout, per hidden layer.
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    output: f64,
}

fn dense(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * x.len()..(o + 1) * x.len()]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

fn classifier_trace(params: &ModelParams, g: &[f64], mut dropout: Option<&mut DropoutSource>) -> ClassifierTrace {
    let cfg = &params.config;
    let mut tr = ClassifierTrace::default();
    let mut x = g.to_vec();
    let layers = cfg.classifier_sizes.len();
    for i in 0..layers {
        let slots = params.classifier_layer(i);
        let h = dense(params.t(slots.weight), params.t(slots.bias), &x);
        tr.inputs.push(std::mem::take(&mut x));
        match slots.affine {
            Some((gain, shift)) => {
                let (gain, shift) = (params.t(gain), params.t(shift));
                let post: Vec<f64> = h
                    .iter()
                    .enumerate()
                    .map(|(j, v)| cfg.activation.hidden.apply(gain[j] * v + shift[j]))
                    .collect();
                let mask = match dropout.as_deref_mut() {
                    Some(src) if cfg.dropout_rate > 0.0 => Some(src.mask(post.len(), cfg.dropout_rate)),
                    _ => None,
                };
                x = match &mask {
                    Some(m) => post.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => post.clone(),
                };
                tr.pre.push(h);
                tr.post.push(post);
                tr.masks.push(mask);
            }
            None => tr.output = cfg.activation.output.apply(h[0]),
        }
    }
    tr
}

/// MLP head on the global feature vector. Dropout is active only when a
/// source is given; kept activations are scaled by `1 / (1 - rate)`.
pub fn classifier_forward(g: &[f64], params: &ModelParams, dropout: Option<&mut DropoutSource>) -> f64 {
    classifier_trace(params, g, dropout).output
}

#[derive(Clone, Debug)]
enum HeadTrace {
    Static { argmax: Vec<usize> },
    Adaptive { argmax: Vec<usize> },
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    n: usize,
    input: Vec<f64>,
    /// `B_0 .. B_l`.
    activations: Vec<Vec<f64>>,
    /// Retained spectrum of `B_t` for each unit.
    coeffs: Vec<Vec<f64>>,
    mixed: Vec<f64>,
    head: HeadTrace,
    features: Vec<f64>,
    classifier: ClassifierTrace,
}

impl ForwardTrace {
    pub fn output(&self) -> f64 {
        self.classifier.output
    }

    /// Global feature vector fed to the classifier.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn edge(&self) -> usize {
        self.n
    }
}

/// Per-edge-length spectral operator, reusable across samples.
#[derive(Clone, Debug)]
pub struct EdgeContext {
    dft: TruncatedDft,
    pool_shape: Option<[usize; 3]>,
}

impl EdgeContext {
    pub fn new(cfg: &ModelConfig, n: usize) -> Result<Self> {
        let modes = ModeSet::new(n, cfg.modes)?;
        let pool_shape = match cfg.head {
            Head::StaticChannelPool => None,
            Head::AdaptiveSpatialPool => Some(pool_shape_for(cfg.width, n)?),
        };
        Ok(Self {
            dft: TruncatedDft::new(modes),
            pool_shape,
        })
    }

    pub fn edge(&self) -> usize {
        self.dft.edge()
    }
}

/// Forward pass keeping intermediates for [`backward_trace`].
pub fn forward_trace(
    voxels: &VoxelGrid,
    params: &ModelParams,
    ctx: &EdgeContext,
    dropout: Option<&mut DropoutSource>,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let n = voxels.edge();
    if ctx.edge() != n {
        return Err(Error::shape(format!(
            "context built for edge {} used at {n}",
            ctx.edge()
        )));
    }
    let w = cfg.width;
    let vol = n * n * n;
    let input = voxels.to_f64();
    let (lw, lb) = params.lift();
    let mut activations = vec![lift_raw(&input, lw, lb)];
    let mut coeffs = Vec::with_capacity(cfg.num_units);
    for t in 0..cfg.num_units {
        let b = activations.last().unwrap();
        let r = params.t(params.kernel_for_unit(t));
        let (mut z, x) = spectral_conv_raw(&ctx.dft, b, r, w);
        let (wi, bi) = params.unit(t);
        let bias = params.t(bi);
        for (c, chunk) in z.chunks_exact_mut(vol).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        gemm(w, w, vol, 1.0, params.t(wi), b, 1.0, &mut z);
        z.iter_mut().for_each(|v| *v = cfg.activation.hidden.apply(*v));
        coeffs.push(x);
        activations.push(z);
    }
    let last = activations.last().unwrap();
    let mixed = pointwise_affine(params.t(params.slots.mix), params.t(params.slots.mix + 1), last, w, vol);

    let (features, head) = match cfg.head {
        Head::StaticChannelPool => {
            let (values, argmax) = channel_pool_raw(&mixed, w, vol, cfg.pool_variant);
            (values, HeadTrace::Static { argmax })
        }
        Head::AdaptiveSpatialPool => {
            let p = params.slots.project.expect("adaptive head has a projection");
            let projected = pointwise_affine(params.t(p), params.t(p + 1), &mixed, w, vol);
            let shape = ctx.pool_shape.expect("adaptive context has a pool shape");
            let (values, argmax) = adaptive_max_pool3d(&projected, n, shape)?;
            (values, HeadTrace::Adaptive { argmax })
        }
    };
    let classifier = classifier_trace(params, &features, dropout);
    Ok(ForwardTrace {
        n,
        input,
        activations,
        coeffs,
        mixed,
        head,
        features,
        classifier,
    })
}

/// Prediction in `(0, 1)` for the default sigmoid output.
pub fn model_forward(voxels: &VoxelGrid, params: &ModelParams, dropout: Option<&mut DropoutSource>) -> Result<f64> {
    let ctx = EdgeContext::new(&params.config, voxels.edge())?;
    Ok(forward_trace(voxels, params, &ctx, dropout)?.output())
}

/// Global feature vector of the configured head.
pub fn global_features(voxels: &VoxelGrid, params: &ModelParams) -> Result<Vec<f64>> {
    let ctx = EdgeContext::new(&params.config, voxels.edge())?;
    Ok(forward_trace(voxels, params, &ctx, None)?.features)
}

/// Accumulate `d_output * d(output)/d(params)` into `grads`.
pub fn backward_trace(
    trace: &ForwardTrace,
    params: &ModelParams,
    ctx: &EdgeContext,
    d_output: f64,
    grads: &mut GradientSet,
) {
    let cfg = &params.config;
    let w = cfg.width;
    let n = trace.n;
    let vol = n * n * n;
    let hidden_act = cfg.activation.hidden;

    // Classifier, output layer first.
    let ct = &trace.classifier;
    let layers = cfg.classifier_sizes.len();
    let mut upstream = vec![d_output * cfg.activation.output.derivative_from_output(ct.output)];
    for i in (0..layers).rev() {
        let slots = params.classifier_layer(i);
        let x = &ct.inputs[i];
        let gh: Vec<f64> = match slots.affine {
            None => upstream.clone(),
            Some((gain_i, shift_i)) => {
                let post = &ct.post[i];
                let gain = params.t(gain_i);
                let mut gu = vec![0.0; post.len()];
                for j in 0..post.len() {
                    let m = ct.masks[i].as_ref().map_or(1.0, |m| m[j]);
                    gu[j] = upstream[j] * m * hidden_act.derivative_from_output(post[j]);
                }
                let pre = &ct.pre[i];
                for j in 0..gu.len() {
                    grads.tensors[gain_i][j] += gu[j] * pre[j];
                    grads.tensors[shift_i][j] += gu[j];
                }
                gu.iter().zip(gain).map(|(a, b)| a * b).collect()
            }
        };
        let weight = params.t(slots.weight);
        let fan_in = x.len();
        let mut gx = vec![0.0; fan_in];
        for (o, &g) in gh.iter().enumerate() {
            grads.tensors[slots.bias][o] += g;
            let gw = &mut grads.tensors[slots.weight][o * fan_in..(o + 1) * fan_in];
            let wrow = &weight[o * fan_in..(o + 1) * fan_in];
            for j in 0..fan_in {
                gw[j] += g * x[j];
                gx[j] += g * wrow[j];
            }
        }
        upstream = gx;
    }
    let g_features = upstream;

    // Head and mix layer.
    let last = &trace.activations[cfg.num_units];
    let (mix_w, mix_b) = (params.slots.mix, params.slots.mix + 1);
    let mut g_act = vec![0.0; w * vol];
    match (&trace.head, cfg.pool_variant) {
        (HeadTrace::Static { argmax }, PoolVariant::Max) => {
            // Only the argmax voxel of each channel receives gradient.
            let weight = params.t(mix_w);
            for c in 0..w {
                let g = g_features[c];
                let v = argmax[c];
                grads.tensors[mix_b][c] += g;
                for j in 0..w {
                    grads.tensors[mix_w][c * w + j] += g * last[j * vol + v];
                    g_act[j * vol + v] += weight[c * w + j] * g;
                }
            }
        }
        (HeadTrace::Static { .. }, PoolVariant::Mean) => {
            let mut g_mixed = vec![0.0; w * vol];
            for c in 0..w {
                g_mixed[c * vol..(c + 1) * vol].fill(g_features[c] / vol as f64);
            }
            affine_backward(params, grads, mix_w, mix_b, last, &g_mixed, w, w, vol, &mut g_act);
        }
        (HeadTrace::Adaptive { argmax }, _) => {
            let p = params.slots.project.expect("adaptive head has a projection");
            let mut g_proj = vec![0.0; vol];
            for (cell, &v) in argmax.iter().enumerate() {
                g_proj[v] += g_features[cell];
            }
            let mut g_mixed = vec![0.0; w * vol];
            affine_backward(params, grads, p, p + 1, &trace.mixed, &g_proj, w, 1, vol, &mut g_mixed);
            affine_backward(params, grads, mix_w, mix_b, last, &g_mixed, w, w, vol, &mut g_act);
        }
    }

    // Fourier units in reverse.
    let dft = &ctx.dft;
    let modes = dft.modes().len();
    for t in (0..cfg.num_units).rev() {
        let out = &trace.activations[t + 1];
        let inp = &trace.activations[t];
        let mut gz = g_act;
        for (g, y) in gz.iter_mut().zip(out) {
            *g *= hidden_act.derivative_from_output(*y);
        }
        let (wi, bi) = params.unit(t);
        let mut g_in = vec![0.0; w * vol];
        affine_backward(params, grads, wi, bi, inp, &gz, w, w, vol, &mut g_in);

        let ki = params.kernel_for_unit(t);
        let r = params.t(ki);
        let gy = dft.inverse_adjoint(&gz, w);
        let x = &trace.coeffs[t];
        let gr = &mut grads.tensors[ki];
        let mut gx = vec![0.0; 2 * w * modes];
        for k in 0..modes {
            for o in 0..w {
                let (yr, yi) = (gy[2 * (o * modes + k)], gy[2 * (o * modes + k) + 1]);
                if yr == 0.0 && yi == 0.0 {
                    continue;
                }
                let row = 2 * (k * w + o) * w;
                for i in 0..w {
                    let xi = 2 * (i * modes + k);
                    let (xr, xim) = (x[xi], x[xi + 1]);
                    // dR = gY * conj(X)
                    gr[row + 2 * i] += yr * xr + yi * xim;
                    gr[row + 2 * i + 1] += yi * xr - yr * xim;
                    // dX = conj(R) * gY
                    let (rr, ri) = (r[row + 2 * i], r[row + 2 * i + 1]);
                    gx[xi] += rr * yr + ri * yi;
                    gx[xi + 1] += rr * yi - ri * yr;
                }
            }
        }
        let spatial = dft.forward_adjoint(&gx, w);
        for (a, b) in g_in.iter_mut().zip(spatial) {
            *a += b;
        }
        g_act = g_in;
    }

    // Lift.
    let input = &trace.input;
    for c in 0..w {
        let ch = &g_act[c * vol..(c + 1) * vol];
        grads.tensors[0][c] += ch.iter().zip(input).map(|(g, a)| g * a).sum::<f64>();
        grads.tensors[1][c] += ch.iter().sum::<f64>();
    }
}

/// Backward of `out = W x + b` (`W` is `rows x width`) over `vol` voxels:
/// accumulates weight/bias gradients and adds `W^T g_out` into `g_in`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    params: &ModelParams,
    grads: &mut GradientSet,
    weight: usize,
    bias: usize,
    x: &[f64],
    g_out: &[f64],
    width: usize,
    rows: usize,
    vol: usize,
    g_in: &mut [f64],
) {
    gemm_nt(rows, vol, width, 1.0, g_out, x, 1.0, &mut grads.tensors[weight]);
    for (r, chunk) in g_out.chunks_exact(vol).enumerate() {
        grads.tensors[bias][r] += chunk.iter().sum::<f64>();
    }
    gemm_tn(width, rows, vol, 1.0, params.t(weight), g_out, 1.0, g_in);
}
