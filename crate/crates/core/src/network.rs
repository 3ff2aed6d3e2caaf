//! Layers, models and the three reference architectures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::tensor::{
    argmax_rows, col2im, gemm, im2col, maxpool2d, maxpool2d_backward, relu, relu_backward,
    softmax_cross_entropy, ConvGeometry, Op, Scalar, Tensor,
};

mod file;

pub use file::{load_model, read_model, save_model, write_model, MAGIC};

/// Named network shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Architecture {
    /// Flatten(28x28) -> Dense(784 -> hidden) -> ReLU -> Dense(hidden -> 10).
    MnistMlp {
        #[serde(default = "default_mnist_hidden")]
        hidden: usize,
    },
    /// Dense(inputs -> hidden) -> ReLU -> Dense(hidden -> classes).
    Tabular {
        inputs: usize,
        #[serde(default = "default_tabular_hidden")]
        hidden: usize,
        classes: usize,
    },
    /// Three padded 3x3 convolutions with two poolings, then a 64-unit dense head.
    CifarCnn,
}

fn default_mnist_hidden() -> usize {
    128
}

fn default_tabular_hidden() -> usize {
    512
}

impl Architecture {
    pub fn mnist_mlp() -> Self {
        Architecture::MnistMlp {
            hidden: default_mnist_hidden(),
        }
    }

    pub fn tabular(inputs: usize, classes: usize) -> Self {
        Architecture::Tabular {
            inputs,
            hidden: default_tabular_hidden(),
            classes,
        }
    }

    /// Parses the bare architecture names accepted on the command line.
    pub fn from_name(name: &str, inputs: usize, classes: usize) -> Result<Self> {
        match name {
            "mnist_mlp" => Ok(Self::mnist_mlp()),
            "tabular" => Ok(Self::tabular(inputs, classes)),
            "cifar_cnn" => Ok(Architecture::CifarCnn),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            Architecture::MnistMlp { .. } => vec![28, 28],
            Architecture::Tabular { inputs, .. } => vec![inputs],
            Architecture::CifarCnn => vec![3, 32, 32],
        }
    }

    fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        use LayerSpec::*;
        Ok(match *self {
            Architecture::MnistMlp { hidden } => vec![
                Flatten,
                Dense(784, hidden),
                Relu,
                Dense(hidden, 10),
            ],
            Architecture::Tabular {
                inputs,
                hidden,
                classes,
            } => {
                if inputs == 0 || hidden == 0 || classes < 2 {
                    return Err(Error::config(format!(
                        "tabular architecture needs inputs >= 1, hidden >= 1, classes >= 2; got {inputs}/{hidden}/{classes}"
                    )));
                }
                vec![Dense(inputs, hidden), Relu, Dense(hidden, classes)]
            }
            Architecture::CifarCnn => vec![
                Conv(3, 32),
                Relu,
                Pool,
                Conv(32, 64),
                Relu,
                Pool,
                Conv(64, 64),
                Relu,
                Flatten,
                Dense(64 * 8 * 8, 64),
                Relu,
                Dense(64, 10),
            ],
        })
    }
}

enum LayerSpec {
    Flatten,
    Dense(usize, usize),
    Conv(usize, usize),
    Relu,
    Pool,
}

/// Train-mode forward caches activations and enables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Multiplicative weights, their prune mask, and an unmasked bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub mask: PruneMask,
}

impl<S: Scalar> Params<S> {
    /// Uniform weights in `±sqrt(6 / fan_in)`, zero biases, nothing masked.
    pub fn init(shape: &[usize], fan_in: usize, bias_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.gen_range(-limit..limit))).collect();
        Params {
            weights: Tensor::new(shape.to_vec(), data).expect("valid init shape"),
            bias: Tensor::zeros(&[bias_len]),
            mask: PruneMask::all_active(n),
        }
    }

    /// Zeroes every weight whose mask entry is false.
    pub fn apply_mask(&mut self) {
        for (w, keep) in self.weights.data_mut().iter_mut().zip(self.mask.as_slice()) {
            if !keep {
                *w = S::zero();
            }
        }
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.data().iter().filter(|w| **w != S::zero()).count()
    }

    fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S: Scalar = f32> {
    /// Stored `[inputs x outputs]`.
    pub params: Params<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn inputs(&self) -> usize {
        self.params.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.params.weights.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S: Scalar = f32> {
    /// Stored `[out_channels x in_channels x kh x kw]`.
    pub params: Params<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    fn geometry(&self, input: &[usize]) -> ConvGeometry {
        let s = self.params.weights.shape();
        ConvGeometry {
            in_channels: s[1],
            height: input[1],
            width: input[2],
            kernel_h: s[2],
            kernel_w: s[3],
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S: Scalar = f32> {
    Flatten,
    Dense(Dense<S>),
    Conv2d(Conv2d<S>),
    Relu,
    MaxPool2d,
    Dropout { rate: f32 },
}

impl<S: Scalar> Layer<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Dropout { .. } => "dropout",
        }
    }

    pub fn params(&self) -> Option<&Params<S>> {
        match self {
            Layer::Dense(d) => Some(&d.params),
            Layer::Conv2d(c) => Some(&c.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Params<S>> {
        match self {
            Layer::Dense(d) => Some(&mut d.params),
            Layer::Conv2d(c) => Some(&mut c.params),
            _ => None,
        }
    }

    /// Per-sample output shape, or a dimension error.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => {
                if input.len() != 1 || input[0] != d.inputs() {
                    return Err(Error::dim(format!(
                        "dense layer expects [{}], got {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2d(c) => {
                let ws = c.params.weights.shape();
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(Error::dim(format!(
                        "conv2d layer expects [{}, H, W], got {input:?}",
                        ws[1]
                    )));
                }
                let g = c.geometry(input);
                g.validate()?;
                Ok(vec![ws[0], g.out_h(), g.out_w()])
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d => {
                let r = input.len();
                if r < 2 || input[r - 2] % 2 != 0 || input[r - 1] % 2 != 0 {
                    return Err(Error::dim(format!(
                        "maxpool2d needs even spatial dims, got {input:?}"
                    )));
                }
                let mut out = input.to_vec();
                out[r - 2] /= 2;
                out[r - 1] /= 2;
                Ok(out)
            }
        }
    }

    fn cast<T: Scalar>(&self) -> Layer<T> {
        match self {
            Layer::Flatten => Layer::Flatten,
            Layer::Dense(d) => Layer::Dense(Dense {
                params: d.params.cast(),
            }),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                params: c.params.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d => Layer::MaxPool2d,
            Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
        }
    }
}

/// Non-zero multiplicative weights against totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveCount {
    pub multiplicative_nonzero: usize,
    pub multiplicative_total: usize,
    pub bias_total: usize,
}

impl ActiveCount {
    /// Non-zero multiplicative weights plus every bias.
    pub fn total(&self) -> usize {
        self.multiplicative_nonzero + self.bias_total
    }

    pub fn parameters(&self) -> usize {
        self.multiplicative_total + self.bias_total
    }

    pub fn fraction(&self) -> f64 {
        if self.multiplicative_total == 0 {
            return 0.0;
        }
        self.multiplicative_nonzero as f64 / self.multiplicative_total as f64
    }
}

/// Gradients of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// One entry per layer; `None` for layers without parameters.
pub type Gradients<S = f32> = Vec<Option<ParamGrads<S>>>;

#[derive(Debug, Clone)]
enum Cache<S: Scalar> {
    Shape(Vec<usize>),
    Input(Tensor<S>),
    Pool(Vec<usize>, Vec<usize>),
    Dropout(Vec<S>),
}

/// Loss and accuracy over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f32> {
    arch: Option<Architecture>,
    input_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
    seed: u64,
    dropout_rng: ChaCha8Rng,
    cache: Option<Vec<Cache<S>>>,
}

impl<S: Scalar> PartialEq for Model<S> {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.seed == other.seed
    }
}

fn dropout_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Builds an architecture with deterministic initialization for `seed`.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for spec in arch.layer_specs()? {
        layers.push(match spec {
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Pool => Layer::MaxPool2d,
            LayerSpec::Dense(i, o) => Layer::Dense(Dense {
                params: Params::init(&[i, o], i, o, &mut rng),
            }),
            LayerSpec::Conv(ci, co) => Layer::Conv2d(Conv2d {
                params: Params::init(&[co, ci, 3, 3], ci * 9, co, &mut rng),
                stride: 1,
                padding: 1,
            }),
        });
    }
    let mut model = Model::from_layers(arch.input_shape(), layers, seed)?;
    model.arch = Some(arch.clone());
    Ok(model)
}

impl<S: Scalar> Model<S> {
    /// Assembles layers after checking that adjacent shapes agree.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<S>>, seed: u64) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if let Some(p) = layer.params() {
                if p.mask.len() != p.weights.len() {
                    return Err(Error::dim(format!("layer {i}: mask not congruent to weights")));
                }
            }
            if let Layer::Dropout { rate } = layer {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::config(format!("layer {i}: dropout rate {rate} outside [0, 1)")));
                }
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::dim(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        Ok(Model {
            arch: None,
            input_shape,
            layers,
            seed,
            dropout_rng: dropout_stream(seed),
            cache: None,
        })
    }

    pub fn architecture(&self) -> Option<&Architecture> {
        self.arch.as_ref()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> impl Iterator<Item = &Params<S>> {
        self.layers.iter().filter_map(Layer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Params<S>> {
        self.layers.iter_mut().filter_map(Layer::params_mut)
    }

    pub fn count_active(&self) -> ActiveCount {
        self.params().fold(ActiveCount::default(), |mut acc, p| {
            acc.multiplicative_nonzero += p.nonzero_weights();
            acc.multiplicative_total += p.weights.len();
            acc.bias_total += p.bias.len();
            acc
        })
    }

    /// Non-zero multiplicative weights per parameterized layer.
    pub fn active_per_layer(&self) -> Vec<usize> {
        self.params().map(Params::nonzero_weights).collect()
    }

    /// Same model evaluated in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            seed: self.seed,
            dropout_rng: self.dropout_rng.clone(),
            cache: None,
        }
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "layer 0: batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the network. Train mode applies dropout and caches activations for [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.predict(batch);
        }
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer_forward(layer, x, Some(&mut self.dropout_rng))
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            caches.push(cache.expect("train mode caches"));
            x = y;
        }
        self.cache = Some(caches);
        Ok(x)
    }

    /// Eval-mode forward; a pure function of the model and the batch.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer_forward(layer, x, None)
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?
                .0;
        }
        Ok(x)
    }

    /// Gradients of the last train-mode forward pass with respect to every weight and bias.
    ///
    /// Masked-out weights may receive non-zero gradient here.
    pub fn backward(&mut self, logit_grad: &Tensor<S>) -> Result<Gradients<S>> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached train-mode forward".into()))?;
        let first_param = self.layers.iter().position(|l| l.params().is_some());
        let mut grads: Gradients<S> = vec![None; self.layers.len()];
        let mut g = logit_grad.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let need_input = first_param.is_some_and(|f| i > f);
            let (dx, pg) = layer_backward(layer, cache, g, need_input)?;
            grads[i] = pg;
            match dx {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Mean cross-entropy and accuracy over `features`, evaluated in chunks.
    pub fn evaluate(&self, features: &Tensor<S>, labels: &[usize], chunk: usize) -> Result<Evaluation> {
        let n = labels.len();
        if n == 0 || features.rows() != n {
            return Err(Error::validation("evaluation set must be non-empty and labelled"));
        }
        let chunk = chunk.max(1);
        let (mut loss, mut correct) = (0.0f64, 0usize);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk) {
            let x = features.select_rows(part);
            let y: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
            let logits = self.predict(&x)?;
            let (l, _) = softmax_cross_entropy(&logits, &y)?;
            loss += l.to_f64().unwrap_or(f64::NAN) * part.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
        }
        Ok(Evaluation {
            loss: loss / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }
}

type Forward<S> = (Tensor<S>, Option<Cache<S>>);

fn layer_forward<S: Scalar>(
    layer: &Layer<S>,
    x: Tensor<S>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<S>> {
    let train = rng.is_some();
    let batch = x.rows();
    Ok(match layer {
        Layer::Flatten => {
            let shape = x.shape().to_vec();
            let w = x.row_len();
            (x.reshape(vec![batch, w])?, train.then_some(Cache::Shape(shape)))
        }
        Layer::Dense(d) => {
            let (i, o) = (d.inputs(), d.outputs());
            if x.rank() != 2 || x.shape()[1] != i {
                return Err(Error::dim(format!("dense expects [B, {i}], got {:?}", x.shape())));
            }
            let mut y = Tensor::zeros(&[batch, o]);
            let bias = d.params.bias.data();
            for row in y.data_mut().chunks_mut(o) {
                row.copy_from_slice(bias);
            }
            gemm(batch, i, o, x.data(), Op::N, d.params.weights.data(), Op::N, S::one(), y.data_mut());
            (y, train.then_some(Cache::Input(x)))
        }
        Layer::Conv2d(c) => {
            if x.rank() != 4 {
                return Err(Error::dim(format!("conv2d expects [B, C, H, W], got {:?}", x.shape())));
            }
            let g = c.geometry(&x.shape()[1..]);
            g.validate()?;
            let co = c.params.weights.shape()[0];
            let (patch, pixels) = (g.patch_len(), g.out_pixels());
            let mut y = Tensor::zeros(&[batch, co, g.out_h(), g.out_w()]);
            let mut cols = vec![S::zero(); patch * pixels];
            let in_len = x.row_len();
            for (b, out) in y.data_mut().chunks_mut(co * pixels).enumerate() {
                im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
                for (plane, &bias) in out.chunks_mut(pixels).zip(c.params.bias.data()) {
                    plane.fill(bias);
                }
                gemm(co, patch, pixels, c.params.weights.data(), Op::N, &cols, Op::N, S::one(), out);
            }
            (y, train.then_some(Cache::Input(x)))
        }
        Layer::Relu => {
            let y = relu(&x);
            (y, train.then_some(Cache::Input(x)))
        }
        Layer::MaxPool2d => {
            let (y, argmax) = maxpool2d(&x)?;
            (y, train.then(|| Cache::Pool(x.shape().to_vec(), argmax)))
        }
        Layer::Dropout { rate } => match rng {
            Some(rng) if *rate > 0.0 => {
                let keep = 1.0 - *rate as f64;
                let scale = S::of(1.0 / keep);
                let mask: Vec<S> = (0..x.len())
                    .map(|_| if rng.gen_bool(keep) { scale } else { S::zero() })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                (y, Some(Cache::Dropout(mask)))
            }
            Some(_) => {
                let ones = vec![S::one(); x.len()];
                (x, Some(Cache::Dropout(ones)))
            }
            None => (x, None),
        },
    })
}

type Backward<S> = (Option<Tensor<S>>, Option<ParamGrads<S>>);

fn layer_backward<S: Scalar>(
    layer: &Layer<S>,
    cache: &Cache<S>,
    g: Tensor<S>,
    need_input: bool,
) -> Result<Backward<S>> {
    Ok(match (layer, cache) {
        (Layer::Flatten, Cache::Shape(shape)) => (Some(g.reshape(shape.clone())?), None),
        (Layer::Dense(d), Cache::Input(x)) => {
            let (i, o, b) = (d.inputs(), d.outputs(), x.rows());
            let mut dw = Tensor::zeros(&[i, o]);
            gemm(i, b, o, x.data(), Op::T, g.data(), Op::N, S::zero(), dw.data_mut());
            let mut db = Tensor::zeros(&[o]);
            for row in g.data().chunks(o) {
                for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            let dx = need_input.then(|| {
                let mut dx = Tensor::zeros(&[b, i]);
                gemm(b, o, i, g.data(), Op::N, d.params.weights.data(), Op::T, S::zero(), dx.data_mut());
                dx
            });
            (dx, Some(ParamGrads { weights: dw, bias: db }))
        }
        (Layer::Conv2d(c), Cache::Input(x)) => {
            let gm = c.geometry(&x.shape()[1..]);
            let co = c.params.weights.shape()[0];
            let (patch, pixels) = (gm.patch_len(), gm.out_pixels());
            let mut dw = Tensor::zeros(c.params.weights.shape());
            let mut db = Tensor::zeros(&[co]);
            let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
            let mut cols = vec![S::zero(); patch * pixels];
            let mut dcols = vec![S::zero(); patch * pixels];
            let in_len = x.row_len();
            for (b, gy) in g.data().chunks(co * pixels).enumerate() {
                im2col(&x.data()[b * in_len..(b + 1) * in_len], &gm, &mut cols);
                gemm(co, pixels, patch, gy, Op::N, &cols, Op::T, S::one(), dw.data_mut());
                for (acc, plane) in db.data_mut().iter_mut().zip(gy.chunks(pixels)) {
                    *acc = plane.iter().fold(*acc, |s, &v| s + v);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(patch, co, pixels, c.params.weights.data(), Op::T, gy, Op::N, S::zero(), &mut dcols);
                    col2im(&dcols, &gm, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
                }
            }
            (dx, Some(ParamGrads { weights: dw, bias: db }))
        }
        (Layer::Relu, Cache::Input(x)) => (Some(relu_backward(x, &g)), None),
        (Layer::MaxPool2d, Cache::Pool(shape, argmax)) => {
            (Some(maxpool2d_backward(shape, argmax, &g)), None)
        }
        (Layer::Dropout { .. }, Cache::Dropout(mask)) => {
            let mut dx = g;
            for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                *v = *v * *m;
            }
            (Some(dx), None)
        }
        (layer, _) => {
            return Err(Error::State(format!("cache mismatch for {} layer", layer.kind())));
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_coords;

    fn random_batch<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| S::of(rng.gen_range(0.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn parameter_counts() {
        for (d, want) in [(30, 16_898), (13, 8_194), (14, 8_706)] {
            let m = build_model(&Architecture::tabular(d, 2), 0).unwrap();
            assert_eq!(m.count_active().parameters(), want);
            assert_eq!(m.count_active().parameters(), 512 * d + 1_538);
        }
        let m = build_model(&Architecture::mnist_mlp(), 0).unwrap();
        let c = m.count_active();
        assert_eq!(c.parameters(), 101_770);
        assert_eq!(c.multiplicative_total, 101_632);

        let fresh = build_model(&Architecture::tabular(30, 2), 1).unwrap().count_active();
        assert_eq!(fresh.multiplicative_nonzero, 16_384);
        assert_eq!(fresh.bias_total, 514);
        assert_eq!(fresh.total(), 16_898);
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        assert!(matches!(Architecture::from_name("resnet", 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = build_model(&Architecture::mnist_mlp(), 42).unwrap();
        let b = build_model(&Architecture::mnist_mlp(), 42).unwrap();
        let c = build_model(&Architecture::mnist_mlp(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f32 / 784.0).sqrt();
        let first = a.params().next().unwrap();
        assert!(first.weights.data().iter().all(|w| w.abs() <= limit));
        assert!(first.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn cifar_shapes_chain() {
        let m = build_model(&Architecture::CifarCnn, 0).unwrap();
        let logits = m.predict(&random_batch(&[2, 3, 32, 32], 1)).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![
            Layer::Dense(Dense { params: Params::<f32>::init(&[4, 3], 4, 3, &mut rng) }),
            Layer::Dense(Dense { params: Params::init(&[5, 2], 5, 2, &mut rng) }),
        ];
        let err = Model::from_layers(vec![4], layers, 0).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn forward_examples() {
        let mut m = build_model(&Architecture::tabular(3, 2), 7).unwrap();
        let x = random_batch::<f32>(&[4, 3], 2);
        assert_eq!(m.forward(&x, Mode::Eval).unwrap(), m.forward(&x, Mode::Eval).unwrap());
        assert_eq!(m.forward(&x, Mode::Train).unwrap(), m.predict(&x).unwrap());

        for p in m.params_mut() {
            p.weights.data_mut().fill(0.0);
        }
        if let Layer::Dense(d) = &mut m.layers_mut()[2] {
            d.params.bias.data_mut().copy_from_slice(&[0.25, -1.5]);
        }
        let logits = m.predict(&x).unwrap();
        for i in 0..4 {
            assert_eq!(logits.row(i), &[0.25, -1.5]);
        }

        let err = m.predict(&random_batch(&[4, 5], 0)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn dropout_zero_matches_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![
            Layer::Dense(Dense { params: Params::<f32>::init(&[4, 6], 4, 6, &mut rng) }),
            Layer::Relu,
            Layer::Dropout { rate: 0.0 },
            Layer::Dense(Dense { params: Params::init(&[6, 3], 6, 3, &mut rng) }),
        ];
        let mut m = Model::from_layers(vec![4], layers, 0).unwrap();
        let x = random_batch(&[5, 4], 3);
        assert_eq!(m.forward(&x, Mode::Train).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn backward_requires_train_forward() {
        let mut m = build_model(&Architecture::tabular(3, 2), 0).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(m.backward(&g), Err(Error::State(_))));
        m.forward(&random_batch(&[1, 3], 0), Mode::Eval).unwrap();
        assert!(matches!(m.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn backward_is_linear_in_logit_grad() {
        let mut m = build_model(&Architecture::tabular(5, 3), 1).unwrap();
        let x = random_batch(&[4, 5], 1);
        m.forward(&x, Mode::Train).unwrap();
        let zero = m.backward(&Tensor::zeros(&[4, 3])).unwrap();
        for pg in zero.iter().flatten() {
            assert!(pg.weights.data().iter().chain(pg.bias.data()).all(|&v| v == 0.0));
        }
        let g = random_batch::<f32>(&[4, 3], 9);
        m.forward(&x, Mode::Train).unwrap();
        let once = m.backward(&g).unwrap();
        let mut g2 = g.clone();
        g2.scale(2.0);
        m.forward(&x, Mode::Train).unwrap();
        let twice = m.backward(&g2).unwrap();
        for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    /// Flattens all weights and biases of a model into one vector.
    fn flatten(m: &Model<f64>) -> Tensor<f64> {
        let mut v = Vec::new();
        for p in m.params() {
            v.extend_from_slice(p.weights.data());
            v.extend_from_slice(p.bias.data());
        }
        let n = v.len();
        Tensor::new(vec![n], v).unwrap()
    }

    fn unflatten(m: &mut Model<f64>, point: &Tensor<f64>) {
        let mut off = 0;
        for p in m.params_mut() {
            let n = p.weights.len();
            p.weights.data_mut().copy_from_slice(&point.data()[off..off + n]);
            off += n;
            let n = p.bias.len();
            p.bias.data_mut().copy_from_slice(&point.data()[off..off + n]);
            off += n;
        }
    }

    fn check_model(model: Model<f64>, x: Tensor<f64>, labels: Vec<usize>, coords: usize) -> f64 {
        let point = flatten(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let picks: Vec<usize> = (0..coords).map(|_| rng.gen_range(0..point.len())).collect();
        let mut m = model;
        grad_check_coords(
            |p| {
                unflatten(&mut m, p);
                let logits = m.forward(&x, Mode::Train).unwrap();
                let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
                let grads = m.backward(&g).unwrap();
                let mut flat = Vec::new();
                for pg in grads.iter().flatten() {
                    flat.extend_from_slice(pg.weights.data());
                    flat.extend_from_slice(pg.bias.data());
                }
                let n = flat.len();
                (loss, Tensor::new(vec![n], flat).unwrap())
            },
            &point,
            1e-3,
            &picks,
        )
    }

    #[test]
    fn grad_check_dense() {
        let mut m = build_model(&Architecture::tabular(6, 3), 3).unwrap().cast::<f64>();
        for p in m.params_mut() {
            p.bias.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f64);
        }
        let err = check_model(m, random_batch(&[5, 6], 4), vec![0, 1, 2, 1, 0], 300);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn grad_check_mnist_mlp() {
        let m = build_model(&Architecture::mnist_mlp(), 5).unwrap().cast::<f64>();
        let err = check_model(m, random_batch(&[3, 28, 28], 6), vec![3, 7, 1], 200);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn grad_check_conv_pool_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![
            Layer::Conv2d(Conv2d { params: Params::<f64>::init(&[3, 2, 3, 3], 18, 3, &mut rng), stride: 1, padding: 1 }),
            Layer::Relu,
            Layer::MaxPool2d,
            Layer::Conv2d(Conv2d { params: Params::init(&[2, 3, 2, 2], 12, 2, &mut rng), stride: 2, padding: 0 }),
            Layer::Flatten,
            Layer::Dense(Dense { params: Params::init(&[2, 4], 2, 4, &mut rng) }),
        ];
        let m = Model::from_layers(vec![2, 4, 4], layers, 0).unwrap();
        let x = random_batch::<f64>(&[3, 2, 4, 4], 10).map(|v| v - 0.5);
        let err = check_model(m, x, vec![0, 3, 2], 150);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn grad_check_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = vec![
            Layer::Dense(Dense { params: Params::<f64>::init(&[4, 8], 4, 8, &mut rng) }),
            Layer::Relu,
            Layer::Dropout { rate: 0.3 },
            Layer::Dense(Dense { params: Params::init(&[8, 3], 8, 3, &mut rng) }),
        ];
        // A fixed dropout stream per evaluation keeps the map differentiable.
        let base = Model::from_layers(vec![4], layers, 0).unwrap();
        let x = random_batch::<f64>(&[6, 4], 1);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let point = flatten(&base);
        let err = crate::tensor::grad_check(
            |p| {
                let mut m = base.clone();
                unflatten(&mut m, p);
                let logits = m.forward(&x, Mode::Train).unwrap();
                let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
                let flat: Vec<f64> = m
                    .backward(&g)
                    .unwrap()
                    .iter()
                    .flatten()
                    .flat_map(|pg| pg.weights.data().iter().chain(pg.bias.data()).copied().collect::<Vec<_>>())
                    .collect();
                let n = flat.len();
                (loss, Tensor::new(vec![n], flat).unwrap())
            },
            &point,
            1e-3,
        );
        assert!(err < 1e-3, "{err}");
    }
}
