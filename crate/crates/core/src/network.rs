//! Feedforward classifier `h = g ∘ f` with hand-written backpropagation.
//!
//! The encoder `f` is a stack of dense layers with a pointwise activation; its
//! post-activation outputs `Z_1..Z_L` are the latent representations that the
//! HSIC terms act on. The classifier `g` is one affine map to `C` logits. The
//! projection head is a separate two-layer perceptron `d → 4d → d`.
//!
//! Weights are stored `fan_in × fan_out` so a batch (rows = samples) maps as
//! `Z W + b`. Hidden layers are numbered from 1 in every public API.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::RngState;
use crate::scalar::Scalar;

const STREAM_ENCODER_INIT: u64 = 0x1_0000;
const STREAM_HEAD_INIT: u64 = 0x1_0001;

/// Width ratio of the projection head's hidden layer.
pub const HEAD_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative<T: Scalar>(self, pre: T, out: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - out * out,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    /// Uniform init half-width multiplier: `sqrt(6/fan_in)` for relu (He),
    /// `sqrt(3/fan_in)` otherwise.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 6.0,
            Activation::Tanh => 3.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "network needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden_dims.len()
    }

    /// Width of the last hidden layer.
    pub fn latent_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero biases, weights uniform in `±sqrt(g/fan_in)`.
    FanInUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: InitScheme,
}

/// One affine map `Z W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `fan_in × fan_out`
    pub weight: Matrix<T>,
    /// `1 × fan_out`
    pub bias: Matrix<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut RngState) -> Self {
        let bound = (gain / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.uniform_in(-bound, bound)))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, w).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = matmul(x, &self.weight)?;
        let b = self.bias.as_slice();
        for i in 0..out.rows() {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(out)
    }

    /// Parameter gradients for upstream gradient `grad_out` at this layer's
    /// output, given the layer input.
    fn grads(input: &Matrix<T>, grad_out: &Matrix<T>) -> Result<Self> {
        Ok(Self {
            weight: matmul_tn(input, grad_out)?,
            bias: grad_out.column_sums(),
        })
    }

    fn grad_input(&self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        matmul_nt(grad_out, &self.weight)
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.weight.add_scaled(T::one(), &other.weight)?;
        self.bias.add_scaled(T::one(), &other.bias)
    }
}

/// Encoder and classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub spec: MlpSpec,
    pub init: InitRecord,
    pub encoder: Vec<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngState::new(seed).split(STREAM_ENCODER_INIT);
        let mut encoder = Vec::with_capacity(spec.depth());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden_dims {
            encoder.push(Dense::init(
                fan_in,
                width,
                spec.activation.init_gain(),
                &mut rng,
            ));
            fan_in = width;
        }
        let classifier = Dense::init(fan_in, spec.num_classes, 3.0, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            init: InitRecord {
                seed,
                scheme: InitScheme::FanInUniform,
            },
            encoder,
            classifier,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut encoder = Vec::with_capacity(spec.depth());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden_dims {
            encoder.push(Dense::zeros(fan_in, width));
            fan_in = width;
        }
        Ok(Self {
            spec: spec.clone(),
            init: InitRecord {
                seed: 0,
                scheme: InitScheme::FanInUniform,
            },
            encoder,
            classifier: Dense::zeros(fan_in, spec.num_classes),
        })
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Matrix<T>,
    /// Pre-activations, one per hidden layer.
    pub pre: Vec<Matrix<T>>,
    /// Post-activation outputs `Z_1..Z_L`.
    pub hidden: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// `Z_layer`, 1-based.
    pub fn z(&self, layer: usize) -> Result<&Matrix<T>> {
        if layer == 0 || layer > self.hidden.len() {
            return Err(Error::LayerIndex {
                index: layer,
                layers: self.hidden.len(),
            });
        }
        Ok(&self.hidden[layer - 1])
    }

    /// `Z_L`
    pub fn last_hidden(&self) -> &Matrix<T> {
        self.hidden.last().expect("at least one hidden layer")
    }
}

pub fn forward<T: Scalar>(params: &MlpParams<T>, x: &Matrix<T>) -> Result<ForwardTrace<T>> {
    if x.cols() != params.spec.input_dim {
        return Err(Error::shape(
            "forward",
            format!(
                "input has {} features, network expects {}",
                x.cols(),
                params.spec.input_dim
            ),
        ));
    }
    let act = params.spec.activation;
    let mut pre = Vec::with_capacity(params.depth());
    let mut hidden: Vec<Matrix<T>> = Vec::with_capacity(params.depth());
    for layer in &params.encoder {
        let p = layer.apply(hidden.last().unwrap_or(x))?;
        hidden.push(p.map(|v| act.apply(v)));
        pre.push(p);
    }
    let logits = params.classifier.apply(hidden.last().expect("depth ≥ 1"))?;
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        hidden,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub encoder: Vec<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        Self {
            encoder: params
                .encoder
                .iter()
                .map(|d| Dense::zeros(d.fan_in(), d.fan_out()))
                .collect(),
            classifier: Dense::zeros(params.classifier.fan_in(), params.classifier.fan_out()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_assign(b)?;
        }
        self.classifier.add_assign(&other.classifier)
    }
}

/// Backpropagates a scalar loss whose gradient at the logits is `grad_logits`
/// and whose gradients at hidden outputs are listed in `grad_hidden` as
/// `(layer, dLoss/dZ_layer)` with 1-based layers. Several entries for the same
/// layer accumulate.
pub fn backward<T: Scalar>(
    params: &MlpParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Matrix<T>,
    grad_hidden: &[(usize, Matrix<T>)],
) -> Result<MlpGrads<T>> {
    let depth = params.depth();
    let batch = trace.batch_size();
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "backward",
            format!(
                "logit gradient {:?} vs logits {:?}",
                grad_logits.shape(),
                trace.logits.shape()
            ),
        ));
    }
    let mut injected: Vec<Option<Matrix<T>>> = vec![None; depth];
    for (layer, g) in grad_hidden {
        if *layer == 0 || *layer > depth {
            return Err(Error::LayerIndex {
                index: *layer,
                layers: depth,
            });
        }
        let expected = (batch, params.spec.hidden_dims[layer - 1]);
        if g.shape() != expected {
            return Err(Error::shape(
                "backward",
                format!(
                    "gradient for Z_{layer} is {:?}, expected {expected:?}",
                    g.shape()
                ),
            ));
        }
        match &mut injected[layer - 1] {
            Some(acc) => acc.add_scaled(T::one(), g)?,
            slot => *slot = Some(g.clone()),
        }
    }

    let act = params.spec.activation;
    let classifier = Dense::grads(trace.last_hidden(), grad_logits)?;
    let mut grad_z = params.classifier.grad_input(grad_logits)?;
    let mut encoder = Vec::with_capacity(depth);
    for j in (0..depth).rev() {
        if let Some(g) = &injected[j] {
            grad_z.add_scaled(T::one(), g)?;
        }
        let mut grad_pre = grad_z;
        for ((gp, &p), &z) in grad_pre
            .as_mut_slice()
            .iter_mut()
            .zip(trace.pre[j].as_slice())
            .zip(trace.hidden[j].as_slice())
        {
            *gp *= act.derivative(p, z);
        }
        let input = if j == 0 {
            &trace.input
        } else {
            &trace.hidden[j - 1]
        };
        encoder.push(Dense::grads(input, &grad_pre)?);
        grad_z = if j > 0 {
            params.encoder[j].grad_input(&grad_pre)?
        } else {
            Matrix::zeros(0, 0)
        };
    }
    encoder.reverse();
    Ok(MlpGrads {
        encoder,
        classifier,
    })
}

/// Two-layer perceptron `d → 4d → d` producing an alternative view of `Z_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    pub activation: Activation,
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct HeadTrace<T> {
    pub input: Matrix<T>,
    pub pre: Matrix<T>,
    pub hidden: Matrix<T>,
    pub output: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

impl<T: Scalar> HeadGrads<T> {
    pub fn zeros_like(head: &ProjectionHead<T>) -> Self {
        Self {
            hidden: Dense::zeros(head.hidden.fan_in(), head.hidden.fan_out()),
            output: Dense::zeros(head.output.fan_in(), head.output.fan_out()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.hidden.add_assign(&other.hidden)?;
        self.output.add_assign(&other.output)
    }
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn init(dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = RngState::new(seed).split(STREAM_HEAD_INIT);
        let wide = HEAD_EXPANSION * dim;
        Self {
            activation,
            hidden: Dense::init(dim, wide, activation.init_gain(), &mut rng),
            output: Dense::init(wide, dim, 3.0, &mut rng),
        }
    }

    pub fn zeros(dim: usize, activation: Activation) -> Self {
        Self {
            activation,
            hidden: Dense::zeros(dim, HEAD_EXPANSION * dim),
            output: Dense::zeros(HEAD_EXPANSION * dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn forward(&self, z: &Matrix<T>) -> Result<HeadTrace<T>> {
        if z.cols() != self.dim() {
            return Err(Error::shape(
                "project",
                format!(
                    "input has {} columns, head expects {}",
                    z.cols(),
                    self.dim()
                ),
            ));
        }
        let pre = self.hidden.apply(z)?;
        let act = self.activation;
        let hidden = pre.map(|v| act.apply(v));
        let output = self.output.apply(&hidden)?;
        Ok(HeadTrace {
            input: z.clone(),
            pre,
            hidden,
            output,
        })
    }

    /// Gradient with respect to the head input and the head weights, given the
    /// gradient at the head output.
    pub fn backward(
        &self,
        trace: &HeadTrace<T>,
        grad_out: &Matrix<T>,
    ) -> Result<(Matrix<T>, HeadGrads<T>)> {
        if grad_out.shape() != trace.output.shape() {
            return Err(Error::shape(
                "projection head backward",
                format!("{:?} vs {:?}", grad_out.shape(), trace.output.shape()),
            ));
        }
        let output = Dense::grads(&trace.hidden, grad_out)?;
        let mut grad_pre = self.output.grad_input(grad_out)?;
        for ((g, &p), &h) in grad_pre
            .as_mut_slice()
            .iter_mut()
            .zip(trace.pre.as_slice())
            .zip(trace.hidden.as_slice())
        {
            *g *= self.activation.derivative(p, h);
        }
        let hidden = Dense::grads(&trace.input, &grad_pre)?;
        let grad_in = self.hidden.grad_input(&grad_pre)?;
        Ok((grad_in, HeadGrads { hidden, output }))
    }
}

/// `p_ω(z)`
pub fn project<T: Scalar>(head: &ProjectionHead<T>, z: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(head.forward(z)?.output)
}

/// Classifier plus projection head: everything the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub net: MlpParams<T>,
    pub head: ProjectionHead<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub net: MlpGrads<T>,
    pub head: HeadGrads<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        let net = MlpParams::init(spec, seed)?;
        let head = ProjectionHead::init(spec.latent_dim(), spec.activation, seed);
        Ok(Self { net, head })
    }

    fn layers(&self) -> Vec<&Dense<T>> {
        let mut v: Vec<&Dense<T>> = self.net.encoder.iter().collect();
        v.extend([&self.net.classifier, &self.head.hidden, &self.head.output]);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        let mut v: Vec<&mut Dense<T>> = self.net.encoder.iter_mut().collect();
        v.extend([
            &mut self.net.classifier,
            &mut self.head.hidden,
            &mut self.head.output,
        ]);
        v
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        layer_names(self.net.depth())
            .into_iter()
            .zip(self.layers())
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), &d.weight),
                    (format!("{name}.bias"), &d.bias),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let names = layer_names(self.net.depth());
        names
            .into_iter()
            .zip(self.layers_mut())
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), &mut d.weight),
                    (format!("{name}.bias"), &mut d.bias),
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers()
            .iter()
            .map(|d| d.weight.as_slice().len() + d.bias.as_slice().len())
            .sum()
    }

    /// All parameters concatenated in [`named_tensors`](Self::named_tensors) order.
    pub fn flatten(&self) -> Vec<T> {
        self.layers()
            .iter()
            .flat_map(|d| d.weight.as_slice().iter().chain(d.bias.as_slice()).copied())
            .collect()
    }

    pub fn unflatten(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::shape(
                "unflatten",
                format!(
                    "{} values for {} parameters",
                    values.len(),
                    self.num_parameters()
                ),
            ));
        }
        let mut offset = 0;
        for d in self.layers_mut() {
            for m in [&mut d.weight, &mut d.bias] {
                let n = m.as_slice().len();
                m.as_mut_slice()
                    .copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

fn layer_names(depth: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..depth).map(|j| format!("encoder.{j}")).collect();
    names.extend([
        "classifier".into(),
        "head.hidden".into(),
        "head.output".into(),
    ]);
    names
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            net: MlpGrads::zeros_like(&model.net),
            head: HeadGrads::zeros_like(&model.head),
        }
    }

    fn layers(&self) -> Vec<&Dense<T>> {
        let mut v: Vec<&Dense<T>> = self.net.encoder.iter().collect();
        v.extend([&self.net.classifier, &self.head.hidden, &self.head.output]);
        v
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers()
            .iter()
            .flat_map(|d| d.weight.as_slice().iter().chain(d.bias.as_slice()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|d| d.weight.is_finite() && d.bias.is_finite())
    }
}

/// `θ ← θ − lr·∇θ` over every parameter, projection head included.
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, grads: &ModelGrads<T>, lr: T) -> Result<()> {
    Sgd::new(lr, T::zero())?.step(model, grads)
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Option<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if !(lr > T::zero() && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite parameter gradient".into()));
        }
        let lr = self.lr;
        if self.momentum == T::zero() {
            for (d, g) in model.layers_mut().into_iter().zip(grads.layers()) {
                d.weight.add_scaled(-lr, &g.weight)?;
                d.bias.add_scaled(-lr, &g.bias)?;
            }
        } else {
            let flat_g = grads.flatten();
            let mu = self.momentum;
            let v = self
                .velocity
                .get_or_insert_with(|| vec![T::zero(); flat_g.len()]);
            if v.len() != flat_g.len() {
                return Err(Error::shape("sgd momentum", "parameter count changed"));
            }
            let mut theta = model.flatten();
            for ((t, vi), &g) in theta.iter_mut().zip(v.iter_mut()).zip(&flat_g) {
                *vi = mu * *vi + g;
                *t -= lr * *vi;
            }
            model.unflatten(&theta)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
            act,
        )
        .unwrap()
    }

    fn batch(rng: &mut RngState, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(3, vec![], 2, Activation::Relu).is_err());
        assert!(MlpSpec::new(3, vec![4, 0], 2, Activation::Relu).is_err());
        assert!(MlpSpec::new(0, vec![4], 2, Activation::Relu).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::<f64>::zeros(&spec(&[3, 4, 5, 2], Activation::Relu)).unwrap();
        let x = batch(&mut RngState::new(0), 6, 3);
        let t = forward(&p, &x).unwrap();
        assert!(t.hidden.iter().all(|z| z.max_abs() == 0.0));
        assert_eq!(t.logits, Matrix::zeros(6, 2));
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let mut p = MlpParams::<f64>::zeros(&spec(&[3, 3, 2], Activation::Relu)).unwrap();
        p.encoder[0].weight = Matrix::identity(3);
        let x = Matrix::from_rows(&[[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]]).unwrap();
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.hidden[0], x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::<f64>::zeros(&spec(&[3, 4, 2], Activation::Relu)).unwrap();
        assert!(forward(&p, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = MlpParams::<f64>::init(&spec(&[5, 8, 8, 3], Activation::Tanh), 9).unwrap();
        let x = batch(&mut RngState::new(1), 4, 5);
        assert_eq!(forward(&p, &x).unwrap(), forward(&p, &x).unwrap());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let p = MlpParams::<f64>::init(&spec(&[3, 4, 4, 2], Activation::Relu), 0).unwrap();
        let x = batch(&mut RngState::new(2), 5, 3);
        let t = forward(&p, &x).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(5, 2), &[(1, Matrix::zeros(5, 4))]).unwrap();
        assert_eq!(g, MlpGrads::zeros_like(&p));
    }

    #[test]
    fn injection_at_first_layer_stays_local() {
        let p = MlpParams::<f64>::init(&spec(&[3, 4, 4, 2], Activation::Tanh), 3).unwrap();
        let mut rng = RngState::new(3);
        let x = batch(&mut rng, 5, 3);
        let t = forward(&p, &x).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(5, 2), &[(1, batch(&mut rng, 5, 4))]).unwrap();
        assert_eq!(g.encoder[1].weight.max_abs(), 0.0);
        assert_eq!(g.classifier.weight.max_abs(), 0.0);
        assert!(g.encoder[0].weight.max_abs() > 0.0);
    }

    #[test]
    fn backward_validates_injection_sites() {
        let p = MlpParams::<f64>::init(&spec(&[3, 4, 2], Activation::Relu), 0).unwrap();
        let t = forward(&p, &Matrix::zeros(2, 3)).unwrap();
        let gl = Matrix::zeros(2, 2);
        assert!(matches!(
            backward(&p, &t, &gl, &[(0, Matrix::zeros(2, 4))]),
            Err(Error::LayerIndex { .. })
        ));
        assert!(matches!(
            backward(&p, &t, &gl, &[(2, Matrix::zeros(2, 4))]),
            Err(Error::LayerIndex { .. })
        ));
        assert!(matches!(
            backward(&p, &t, &gl, &[(1, Matrix::zeros(2, 5))]),
            Err(Error::Shape { .. })
        ));
    }

    /// Loss = Σ (logits ⊙ A) + Σ (Z_1 ⊙ B): linear, so its gradients at the
    /// injection sites are exactly A and B.
    #[test]
    fn backward_matches_finite_differences_with_injection() {
        for act in [Activation::Relu, Activation::Tanh] {
            let s = spec(&[3, 5, 4, 2], act);
            let mut model = Model::<f64>::init(&s, 21).unwrap();
            let mut rng = RngState::new(5);
            let x = batch(&mut rng, 4, 3);
            let a = batch(&mut rng, 4, 2);
            let b = batch(&mut rng, 4, 5);
            let loss = |m: &Model<f64>| {
                let t = forward(&m.net, &x).unwrap();
                let l: f64 = t
                    .logits
                    .as_slice()
                    .iter()
                    .zip(a.as_slice())
                    .map(|(u, v)| u * v)
                    .sum();
                let z: f64 = t.hidden[0]
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(u, v)| u * v)
                    .sum();
                l + z
            };
            let t = forward(&model.net, &x).unwrap();
            let g = backward(&model.net, &t, &a, &[(1, b.clone())]).unwrap();
            let analytic = ModelGrads {
                net: g,
                head: HeadGrads::zeros_like(&model.head),
            }
            .flatten();
            let theta = model.flatten();
            let h = 1e-6;
            for k in 0..theta.len() {
                let mut tp = theta.clone();
                tp[k] += h;
                model.unflatten(&tp).unwrap();
                let fp = loss(&model);
                tp[k] -= 2.0 * h;
                model.unflatten(&tp).unwrap();
                let fm = loss(&model);
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(
                    (fd - analytic[k]).abs() / denom < 1e-4,
                    "param {k}: {fd} vs {}",
                    analytic[k]
                );
            }
            model.unflatten(&theta).unwrap();
        }
    }

    #[test]
    fn head_shapes_and_zero_cases() {
        let head = ProjectionHead::<f64>::init(6, Activation::Relu, 0);
        assert_eq!(head.hidden.weight.shape(), (6, 24));
        assert_eq!(head.output.weight.shape(), (24, 6));
        let z = batch(&mut RngState::new(0), 3, 6);
        assert_eq!(project(&head, &z).unwrap().shape(), (3, 6));
        let zero = ProjectionHead::<f64>::zeros(6, Activation::Relu);
        assert_eq!(project(&zero, &z).unwrap(), Matrix::zeros(3, 6));
        assert_eq!(
            project(&head, &Matrix::zeros(3, 6)).unwrap(),
            Matrix::zeros(3, 6)
        );
        assert!(project(&head, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let s = spec(&[1, 1, 1], Activation::Relu);
        let mut m = Model::<f64>::init(&s, 0).unwrap();
        let mut theta = vec![0.0; m.num_parameters()];
        theta[0] = 3.0;
        m.unflatten(&theta).unwrap();
        let mut g = ModelGrads::zeros_like(&m);
        g.net.encoder[0].weight[(0, 0)] = 2.0;
        sgd_step(&mut m, &g, 1.0).unwrap();
        assert_eq!(m.net.encoder[0].weight[(0, 0)], 1.0);

        let before = m.clone();
        let zero = ModelGrads::zeros_like(&m);
        sgd_step(&mut m, &zero, 0.5).unwrap();
        assert_eq!(m, before);

        let mut half = before.clone();
        let mut full = before.clone();
        sgd_step(&mut half, &g, 0.25).unwrap();
        sgd_step(&mut half, &g, 0.25).unwrap();
        sgd_step(&mut full, &g, 0.5).unwrap();
        assert_eq!(half, full);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let s = spec(&[2, 2, 2], Activation::Relu);
        let mut m = Model::<f64>::init(&s, 0).unwrap();
        let mut g = ModelGrads::zeros_like(&m);
        g.head.output.bias[(0, 1)] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut m, &g, 0.1),
            Err(Error::Divergence(_))
        ));
        assert!(Sgd::<f64>::new(0.0, 0.0).is_err());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let s = spec(&[1, 1, 1], Activation::Relu);
        let mut m = Model::<f64>::init(&s, 0).unwrap();
        let start = m.net.encoder[0].weight[(0, 0)];
        let mut g = ModelGrads::zeros_like(&m);
        g.net.encoder[0].weight[(0, 0)] = 1.0;
        let mut opt = Sgd::new(0.1, 0.5).unwrap();
        opt.step(&mut m, &g).unwrap();
        opt.step(&mut m, &g).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((m.net.encoder[0].weight[(0, 0)] - (start - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn flatten_round_trips() {
        let s = spec(&[3, 4, 2], Activation::Relu);
        let m = Model::<f64>::init(&s, 4).unwrap();
        let mut other = Model::<f64>::init(&s, 5).unwrap();
        other.unflatten(&m.flatten()).unwrap();
        assert_eq!(other.net.encoder, m.net.encoder);
        assert_eq!(other.head, m.head);
        assert_eq!(m.named_tensors().len(), 2 * (1 + 1 + 2));
    }
}
