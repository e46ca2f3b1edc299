//! Training objectives and their gradients.
//!
//! The full objective for one step is
//!
//! ```text
//! L_total = L_CL + L_HBR + λ_HA · L_HA
//! L_HBR   = λ_x Σⱼ HSIC(X, Z_j) − λ_y Σⱼ HSIC(Y, Z_j)
//! L_HA    = −½ (HSIC(Z^M_L, p(Z^t_L)) + HSIC(p(Z^M_L), Z^t_L))
//! ```
//!
//! where `L_CL` is the base rehearsal loss (experience replay or DER++), `X`,
//! `Y` are the inputs and one-hot labels of the batch HBR is applied to, and
//! `Z^M`, `Z^t` are buffered and current-task representations. Each term hands
//! back gradients at the logits and at hidden outputs; [`objective`] merges them
//! per batch and runs one backward pass per batch.

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hsic::{CenteredKernel, KernelConfig};
use crate::network::{
    backward, forward, ForwardTrace, HeadGrads, Model, ModelGrads, ProjectionHead,
};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Which batches the bottleneck term is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HbrSite {
    #[default]
    BufferOnly,
    CurrentOnly,
    Both,
}

impl HbrSite {
    pub fn on_buffer(self) -> bool {
        matches!(self, HbrSite::BufferOnly | HbrSite::Both)
    }

    pub fn on_current(self) -> bool {
        matches!(self, HbrSite::CurrentOnly | HbrSite::Both)
    }
}

/// Hidden layers that receive the bottleneck term.
///
/// In config files: `"all"`, an integer `k` (layers `1..=k`), or an explicit
/// list of 1-based layer numbers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum LayerSelection {
    #[default]
    All,
    First(usize),
    Explicit(Vec<usize>),
}

impl LayerSelection {
    /// Sorted, de-duplicated 1-based layer numbers for a network of `depth`
    /// hidden layers.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let layers: Vec<usize> = match self {
            LayerSelection::All => (1..=depth).collect(),
            LayerSelection::First(k) => {
                if *k == 0 || *k > depth {
                    return Err(Error::LayerIndex {
                        index: *k,
                        layers: depth,
                    });
                }
                (1..=*k).collect()
            }
            LayerSelection::Explicit(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                if let Some(&bad) = v.iter().find(|&&j| j == 0 || j > depth) {
                    return Err(Error::LayerIndex {
                        index: bad,
                        layers: depth,
                    });
                }
                v
            }
        };
        if layers.is_empty() {
            return Err(Error::Config("hbr_layers selects no layer".into()));
        }
        Ok(layers)
    }
}

impl Serialize for LayerSelection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSelection::All => s.serialize_str("all"),
            LayerSelection::First(k) => s.serialize_u64(*k as u64),
            LayerSelection::Explicit(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Depth(i64),
            List(Vec<usize>),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Depth(k) if k >= 1 => Ok(LayerSelection::First(k as usize)),
            Raw::Depth(k) => Err(de::Error::custom(format!(
                "layer count must be ≥ 1, got {k}"
            ))),
            Raw::List(v) => Ok(LayerSelection::Explicit(v)),
            Raw::Word(w) if w == "all" => Ok(LayerSelection::All),
            Raw::Word(w) => Err(de::Error::custom(format!(
                "expected \"all\", a layer count or a list of layers, got \"{w}\""
            ))),
        }
    }
}

/// Coefficients and kernels for the two HSIC terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualHsicConfig {
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Multiplies `L_HA`, which already carries a leading minus.
    pub lambda_ha: f64,
    pub hbr_layers: LayerSelection,
    #[serde(alias = "ha_target")]
    pub hbr_target: HbrSite,
    pub kernel_x: KernelConfig,
    pub kernel_y: KernelConfig,
    pub kernel_z: KernelConfig,
}

impl Default for DualHsicConfig {
    fn default() -> Self {
        Self {
            lambda_x: 0.001,
            lambda_y: 0.05,
            lambda_ha: -0.75,
            hbr_layers: LayerSelection::All,
            hbr_target: HbrSite::BufferOnly,
            kernel_x: KernelConfig::default(),
            kernel_y: KernelConfig::default(),
            kernel_z: KernelConfig::default(),
        }
    }
}

impl DualHsicConfig {
    /// All coefficients zero: the base rehearsal method alone.
    pub fn disabled() -> Self {
        Self {
            lambda_x: 0.0,
            lambda_y: 0.0,
            lambda_ha: 0.0,
            ..Self::default()
        }
    }

    pub fn hbr_enabled(&self) -> bool {
        self.lambda_x != 0.0 || self.lambda_y != 0.0
    }

    pub fn ha_enabled(&self) -> bool {
        self.lambda_ha != 0.0
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_x", self.lambda_x),
            ("lambda_y", self.lambda_y),
            ("lambda_ha", self.lambda_ha),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        self.kernel_x.validate()?;
        self.kernel_y.validate()?;
        self.kernel_z.validate()?;
        if self.hbr_enabled() {
            self.hbr_layers.resolve(depth)?;
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/B`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: c,
        });
    }
    if b == 0 {
        return Ok((T::zero(), Matrix::zeros(0, c)));
    }
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut grad = Matrix::zeros(b, c);
    let mut loss = T::zero();
    for (i, (row, &y)) in logits.row_iter().zip(labels).enumerate() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[y];
        let g = grad.row_mut(i);
        for (gk, &v) in g.iter_mut().zip(row) {
            *gk = (v - log_z).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// `α · mean((logits − stored)²) + β · cross_entropy(logits, labels)`; the mean
/// runs over every entry of the batch.
pub fn der_pp_buffer_loss<T: Scalar>(
    logits: &Matrix<T>,
    stored_logits: &Matrix<T>,
    labels: &[usize],
    alpha: T,
    beta: T,
) -> Result<(T, Matrix<T>)> {
    if logits.shape() != stored_logits.shape() {
        return Err(Error::shape(
            "der_pp_buffer_loss",
            format!("{:?} vs stored {:?}", logits.shape(), stored_logits.shape()),
        ));
    }
    let (ce, ce_grad) = cross_entropy(logits, labels)?;
    let count = logits.as_slice().len();
    if count == 0 {
        return Ok((T::zero(), ce_grad));
    }
    let inv = T::one() / T::from_usize_lossy(count);
    let two = T::lit(2.0);
    let mut mse = T::zero();
    let mut grad = ce_grad.scale(beta);
    for ((g, &l), &s) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(stored_logits.as_slice())
    {
        let d = l - s;
        mse += d * d;
        *g += alpha * two * d * inv;
    }
    Ok((alpha * mse * inv + beta * ce, grad))
}

/// Bottleneck term on one batch.
#[derive(Clone, Debug)]
pub struct HbrTerms<T> {
    /// `x_term − y_term`
    pub value: T,
    /// `λ_x Σⱼ HSIC(X, Z_j)`
    pub x_term: T,
    /// `λ_y Σⱼ HSIC(Y, Z_j)`
    pub y_term: T,
    /// `(layer, ∂value/∂Z_layer)`
    pub grad_hidden: Vec<(usize, Matrix<T>)>,
}

/// `λ_x Σⱼ HSIC(X, Z_j) − λ_y Σⱼ HSIC(Y, Z_j)` over `cfg.hbr_layers`, with the
/// gradient at each selected `Z_j`.
pub fn hbr_loss<T: Scalar>(
    trace: &ForwardTrace<T>,
    x: &Matrix<T>,
    y_onehot: &Matrix<T>,
    cfg: &DualHsicConfig,
) -> Result<HbrTerms<T>> {
    let n = trace.batch_size();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    if x.rows() != n || y_onehot.rows() != n {
        return Err(Error::shape(
            "hbr_loss",
            format!("trace has {n} rows, x {}, y {}", x.rows(), y_onehot.rows()),
        ));
    }
    let layers = cfg.hbr_layers.resolve(trace.hidden.len())?;
    let lx = T::lit(cfg.lambda_x);
    let ly = T::lit(cfg.lambda_y);
    let kx = (cfg.lambda_x != 0.0)
        .then(|| CenteredKernel::new(x, &cfg.kernel_x))
        .transpose()?;
    let ky = (cfg.lambda_y != 0.0)
        .then(|| CenteredKernel::new(y_onehot, &cfg.kernel_y))
        .transpose()?;

    let mut x_term = T::zero();
    let mut y_term = T::zero();
    let mut grad_hidden = Vec::with_capacity(layers.len());
    for j in layers {
        let z = trace.z(j)?;
        let mut g = Matrix::zeros(z.rows(), z.cols());
        if let Some(kx) = &kx {
            let (h, gh) = kx.hsic_and_gradient(z, &cfg.kernel_z)?;
            x_term += lx * h.value;
            g.add_scaled(lx, &gh)?;
        }
        if let Some(ky) = &ky {
            let (h, gh) = ky.hsic_and_gradient(z, &cfg.kernel_z)?;
            y_term += ly * h.value;
            g.add_scaled(-ly, &gh)?;
        }
        grad_hidden.push((j, g));
    }
    Ok(HbrTerms {
        value: x_term - y_term,
        x_term,
        y_term,
        grad_hidden,
    })
}

/// Alignment term between buffered and current last-layer representations.
#[derive(Clone, Debug)]
pub struct HaTerms<T> {
    /// Unweighted `L_HA`.
    pub value: T,
    /// Gradients of `λ_HA · L_HA`.
    pub grad_z_buffer: Matrix<T>,
    pub grad_z_current: Matrix<T>,
    pub head_grads: HeadGrads<T>,
}

/// `L_HA = −½(HSIC(Z^M, p(Z^t)) + HSIC(p(Z^M), Z^t))` and the gradients of
/// `λ_HA · L_HA` with respect to both inputs and the head weights. No
/// stop-gradient: both branches receive gradient.
pub fn ha_loss<T: Scalar>(
    z_buffer: &Matrix<T>,
    z_current: &Matrix<T>,
    head: &ProjectionHead<T>,
    lambda_ha: T,
    kernel: &KernelConfig,
) -> Result<HaTerms<T>> {
    if z_buffer.shape() != z_current.shape() {
        return Err(Error::shape(
            "ha_loss",
            format!(
                "buffer batch {:?} vs current batch {:?}",
                z_buffer.shape(),
                z_current.shape()
            ),
        ));
    }
    let n = z_buffer.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let p_buf = head.forward(z_buffer)?;
    let p_cur = head.forward(z_current)?;

    let k_zb = CenteredKernel::new(z_buffer, kernel)?;
    let k_zc = CenteredKernel::new(z_current, kernel)?;
    let k_pb = CenteredKernel::new(&p_buf.output, kernel)?;
    let k_pc = CenteredKernel::new(&p_cur.output, kernel)?;

    // term 1: HSIC(Z^M, p(Z^t)); term 2: HSIC(p(Z^M), Z^t)
    let (h1, g1_zb) = k_pc.hsic_and_gradient(z_buffer, kernel)?;
    let (_, g1_pc) = k_zb.hsic_and_gradient(&p_cur.output, kernel)?;
    let (h2, g2_pb) = k_zc.hsic_and_gradient(&p_buf.output, kernel)?;
    let (_, g2_zc) = k_pb.hsic_and_gradient(z_current, kernel)?;

    let half = T::lit(0.5);
    let value = -half * (h1.value + h2.value);
    let s = -half * lambda_ha;

    let (via_head_b, head_b) = head.backward(&p_buf, &g2_pb.scale(s))?;
    let (via_head_c, head_c) = head.backward(&p_cur, &g1_pc.scale(s))?;

    let mut grad_z_buffer = g1_zb.scale(s);
    grad_z_buffer.add_scaled(T::one(), &via_head_b)?;
    let mut grad_z_current = g2_zc.scale(s);
    grad_z_current.add_scaled(T::one(), &via_head_c)?;
    let mut head_grads = head_b;
    head_grads.add_assign(&head_c)?;

    Ok(HaTerms {
        value,
        grad_z_buffer,
        grad_z_current,
        head_grads,
    })
}

/// Gradient contributions landing on one forward pass.
#[derive(Clone, Debug)]
pub struct SiteGrads<T> {
    pub logits: Matrix<T>,
    pub hidden: Vec<(usize, Matrix<T>)>,
}

/// Per-term values of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    /// Base loss on the current batch.
    pub base_current: T,
    /// Base replay loss on the buffered batch.
    pub base_buffer: T,
    /// `λ_x Σⱼ HSIC(X, Z_j)` summed over the sites HBR applies to.
    pub hbr_x: T,
    /// `λ_y Σⱼ HSIC(Y, Z_j)` summed over the sites HBR applies to.
    pub hbr_y: T,
    /// Unweighted `L_HA`.
    pub ha: T,
    pub lambda_ha: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn base(&self) -> T {
        self.base_current + self.base_buffer
    }

    pub fn hbr(&self) -> T {
        self.hbr_x - self.hbr_y
    }

    /// `L_CL + L_HBR + λ_HA · L_HA`
    pub fn total(&self) -> T {
        self.base() + self.hbr() + self.lambda_ha * self.ha
    }
}

#[derive(Clone, Debug)]
pub struct LossReport<T> {
    pub total: T,
    pub terms: LossTerms<T>,
    pub current: SiteGrads<T>,
    pub buffer: Option<SiteGrads<T>>,
    pub head: Option<HeadGrads<T>>,
}

/// Components of one step's objective, each already evaluated.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub base_current: (T, Matrix<T>),
    pub base_buffer: Option<(T, Matrix<T>)>,
    pub hbr_buffer: Option<HbrTerms<T>>,
    pub hbr_current: Option<HbrTerms<T>>,
    pub ha: Option<HaTerms<T>>,
    pub lambda_ha: T,
    /// Hidden layer count `L`; alignment gradients land on `Z_L`.
    pub depth: usize,
}

/// Sums the parts per `L_CL + L_HBR + λ_HA · L_HA` and groups gradients by the
/// forward pass they flow back through.
pub fn total_loss<T: Scalar>(parts: LossParts<T>) -> Result<LossReport<T>> {
    let LossParts {
        base_current,
        base_buffer,
        hbr_buffer,
        hbr_current,
        ha,
        lambda_ha,
        depth,
    } = parts;
    let mut terms = LossTerms {
        base_current: base_current.0,
        lambda_ha,
        ..LossTerms::default()
    };

    let mut current = SiteGrads {
        logits: base_current.1,
        hidden: Vec::new(),
    };
    let mut buffer = match base_buffer {
        Some((v, g)) => {
            terms.base_buffer = v;
            Some(SiteGrads {
                logits: g,
                hidden: Vec::new(),
            })
        }
        None => None,
    };

    if let Some(h) = hbr_current {
        terms.hbr_x += h.x_term;
        terms.hbr_y += h.y_term;
        current.hidden.extend(h.grad_hidden);
    }
    if let Some(h) = hbr_buffer {
        let site = buffer
            .as_mut()
            .ok_or_else(|| Error::Config("bottleneck term on a missing buffer batch".into()))?;
        terms.hbr_x += h.x_term;
        terms.hbr_y += h.y_term;
        site.hidden.extend(h.grad_hidden);
    }
    let mut head = None;
    if let Some(a) = ha {
        let site = buffer
            .as_mut()
            .ok_or_else(|| Error::Config("alignment term on a missing buffer batch".into()))?;
        terms.ha = a.value;
        site.hidden.push((depth, a.grad_z_buffer));
        current.hidden.push((depth, a.grad_z_current));
        head = Some(a.head_grads);
    }

    Ok(LossReport {
        total: terms.total(),
        terms,
        current,
        buffer,
        head,
    })
}

/// One training batch; `stored_logits` is only needed for DER++ replay.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub x: Matrix<T>,
    pub labels: Vec<usize>,
    pub stored_logits: Option<Matrix<T>>,
}

/// Base rehearsal loss `L_CL`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseLoss {
    /// Experience replay: cross-entropy on both batches.
    Er,
    /// Cross-entropy on the current batch; logit matching plus cross-entropy on
    /// the buffered batch.
    Derpp { alpha: f64, beta: f64 },
}

/// Everything produced by evaluating one step's objective.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub report: LossReport<T>,
    pub grads: ModelGrads<T>,
    pub current_trace: ForwardTrace<T>,
    pub buffer_trace: Option<ForwardTrace<T>>,
}

/// Evaluates the full objective on a current batch and an optional buffered
/// batch, and backpropagates it into every parameter.
///
/// Terms needing the buffer are skipped when `buffer` is `None`; HSIC terms are
/// skipped for batches with fewer than two rows.
pub fn objective<T: Scalar>(
    model: &Model<T>,
    current: &LabeledBatch<T>,
    buffer: Option<&LabeledBatch<T>>,
    base: BaseLoss,
    cfg: &DualHsicConfig,
) -> Result<StepOutput<T>> {
    let net = &model.net;
    let classes = net.spec.num_classes;
    let current_trace = forward(net, &current.x)?;
    let base_current = cross_entropy(&current_trace.logits, &current.labels)?;

    let buffer_trace = buffer.map(|b| forward(net, &b.x)).transpose()?;
    let base_buffer = match (buffer, &buffer_trace) {
        (Some(b), Some(t)) => Some(match base {
            BaseLoss::Er => cross_entropy(&t.logits, &b.labels)?,
            BaseLoss::Derpp { alpha, beta } => {
                let stored = b.stored_logits.as_ref().ok_or_else(|| {
                    Error::Config("DER++ replay needs stored logits in the buffer".into())
                })?;
                der_pp_buffer_loss(&t.logits, stored, &b.labels, T::lit(alpha), T::lit(beta))?
            }
        }),
        _ => None,
    };

    let hbr_on =
        |batch: &LabeledBatch<T>, trace: &ForwardTrace<T>| -> Result<Option<HbrTerms<T>>> {
            if !cfg.hbr_enabled() || batch.labels.len() < 2 {
                return Ok(None);
            }
            let y = Matrix::one_hot(&batch.labels, classes)?;
            hbr_loss(trace, &batch.x, &y, cfg).map(Some)
        };
    let hbr_current = if cfg.hbr_target.on_current() {
        hbr_on(current, &current_trace)?
    } else {
        None
    };
    let hbr_buffer = match (buffer, &buffer_trace) {
        (Some(b), Some(t)) if cfg.hbr_target.on_buffer() => hbr_on(b, t)?,
        _ => None,
    };

    let lambda_ha = T::lit(cfg.lambda_ha);
    let ha = match &buffer_trace {
        Some(bt) if cfg.ha_enabled() && bt.batch_size() >= 2 => Some(ha_loss(
            bt.last_hidden(),
            current_trace.last_hidden(),
            &model.head,
            lambda_ha,
            &cfg.kernel_z,
        )?),
        _ => None,
    };

    let report = total_loss(LossParts {
        base_current,
        base_buffer,
        hbr_buffer,
        hbr_current,
        ha,
        lambda_ha,
        depth: net.depth(),
    })?;

    let mut net_grads = backward(
        net,
        &current_trace,
        &report.current.logits,
        &report.current.hidden,
    )?;
    if let (Some(site), Some(t)) = (&report.buffer, &buffer_trace) {
        net_grads.add_assign(&backward(net, t, &site.logits, &site.hidden)?)?;
    }
    let head = report
        .head
        .clone()
        .unwrap_or_else(|| HeadGrads::zeros_like(&model.head));

    Ok(StepOutput {
        grads: ModelGrads {
            net: net_grads,
            head,
        },
        report,
        current_trace,
        buffer_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsic::empirical_hsic;
    use crate::network::{Activation, MlpSpec};
    use crate::rng::RngState;
    use crate::testutil::{central_diff, max_rel_err, normal_matrix};

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn toy_model(seed: u64, dims: &[usize]) -> Model<f64> {
        let spec = MlpSpec::new(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
            Activation::Tanh,
        )
        .unwrap();
        Model::init(&spec, seed).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&mat(1, 2, &[0.3, 0.3]), &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let (l, g) = cross_entropy(&mat(1, 3, &[100.0, -100.0, -50.0]), &[0]).unwrap();
        assert!(l < 1e-20);
        assert!(g.max_abs() < 1e-20);
        assert!(matches!(
            cross_entropy(&mat(1, 2, &[0.0, 0.0]), &[2]),
            Err(Error::InvalidLabel {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let logits = normal_matrix(&mut rng, 4, 3);
        let labels = [0, 2, 1, 2];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let fd = central_diff(
            |v| cross_entropy(&mat(4, 3, v), &labels).unwrap().0,
            logits.as_slice(),
            1e-6,
        );
        assert!(max_rel_err(g.as_slice(), &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn der_pp_examples_and_gradient() {
        let logits = mat(2, 2, &[40.0, -40.0, -40.0, 40.0]);
        let (l, _) = der_pp_buffer_loss(&logits, &logits, &[0, 1], 0.3, 0.5).unwrap();
        assert!(l.abs() < 1e-20);

        let mut rng = RngState::new(8);
        let logits = normal_matrix(&mut rng, 3, 4);
        let stored = normal_matrix(&mut rng, 3, 4);
        let labels = [3, 0, 1];
        let (only_ce, g0) = der_pp_buffer_loss(&logits, &stored, &labels, 0.0, 0.7).unwrap();
        let (ce, gce) = cross_entropy(&logits, &labels).unwrap();
        assert_eq!(only_ce, 0.7 * ce);
        assert_eq!(g0, gce.scale(0.7));

        let (_, g) = der_pp_buffer_loss(&logits, &stored, &labels, 0.2, 0.5).unwrap();
        let fd = central_diff(
            |v| {
                der_pp_buffer_loss(&mat(3, 4, v), &stored, &labels, 0.2, 0.5)
                    .unwrap()
                    .0
            },
            logits.as_slice(),
            1e-6,
        );
        assert!(max_rel_err(g.as_slice(), &fd, 1e-8) < 1e-6);
        assert!(der_pp_buffer_loss(&logits, &Matrix::zeros(3, 3), &labels, 0.2, 0.5).is_err());
    }

    #[test]
    fn hbr_zero_coefficients() {
        let model = toy_model(0, &[3, 5, 4, 2]);
        let mut rng = RngState::new(1);
        let x = normal_matrix(&mut rng, 6, 3);
        let t = forward(&model.net, &x).unwrap();
        let y = Matrix::one_hot(&[0, 1, 0, 1, 1, 0], 2).unwrap();
        let cfg = DualHsicConfig {
            lambda_x: 0.0,
            lambda_y: 0.0,
            ..DualHsicConfig::default()
        };
        let h = hbr_loss(&t, &x, &y, &cfg).unwrap();
        assert_eq!(h.value, 0.0);
        assert!(h.grad_hidden.iter().all(|(_, g)| g.max_abs() == 0.0));
    }

    #[test]
    fn hbr_single_class_has_no_label_term() {
        let model = toy_model(0, &[3, 5, 4, 2]);
        let mut rng = RngState::new(2);
        let x = normal_matrix(&mut rng, 6, 3);
        let t = forward(&model.net, &x).unwrap();
        let y = Matrix::one_hot(&[1; 6], 2).unwrap();
        let h = hbr_loss(&t, &x, &y, &DualHsicConfig::default()).unwrap();
        assert_eq!(h.y_term, 0.0);
        assert!(h.x_term > 0.0);
    }

    #[test]
    fn hbr_composes_from_estimator() {
        let model = toy_model(4, &[3, 5, 4, 2]);
        let mut rng = RngState::new(9);
        let x = normal_matrix(&mut rng, 8, 3);
        let labels = [0, 1, 1, 0, 1, 0, 0, 1];
        let y = Matrix::one_hot(&labels, 2).unwrap();
        let t = forward(&model.net, &x).unwrap();
        let cfg = DualHsicConfig::default();
        let k = KernelConfig::default();
        let h: Vec<f64> = (0..2)
            .map(|j| empirical_hsic(&x, &t.hidden[j], &k, &k).unwrap().value)
            .collect();
        let g: Vec<f64> = (0..2)
            .map(|j| empirical_hsic(&y, &t.hidden[j], &k, &k).unwrap().value)
            .collect();
        let expected = 0.001 * (h[0] + h[1]) - 0.05 * (g[0] + g[1]);
        let got = hbr_loss(&t, &x, &y, &cfg).unwrap().value;
        assert!((got - expected).abs() <= 1e-14 * expected.abs().max(1e-3));
    }

    #[test]
    fn hbr_gradient_matches_finite_differences() {
        let mut rng = RngState::new(5);
        let x = normal_matrix(&mut rng, 8, 3);
        let y = Matrix::one_hot(&[0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        let z1 = normal_matrix(&mut rng, 8, 4);
        let z2 = normal_matrix(&mut rng, 8, 2);
        let cfg = DualHsicConfig {
            lambda_x: 0.3,
            lambda_y: 0.7,
            kernel_z: KernelConfig::gaussian(1.5),
            ..DualHsicConfig::default()
        };
        let make = |a: &Matrix<f64>, b: &Matrix<f64>| ForwardTrace {
            input: x.clone(),
            pre: vec![a.clone(), b.clone()],
            hidden: vec![a.clone(), b.clone()],
            logits: Matrix::zeros(8, 3),
        };
        let h = hbr_loss(&make(&z1, &z2), &x, &y, &cfg).unwrap();
        let fd1 = central_diff(
            |v| {
                hbr_loss(&make(&mat(8, 4, v), &z2), &x, &y, &cfg)
                    .unwrap()
                    .value
            },
            z1.as_slice(),
            1e-5,
        );
        let fd2 = central_diff(
            |v| {
                hbr_loss(&make(&z1, &mat(8, 2, v)), &x, &y, &cfg)
                    .unwrap()
                    .value
            },
            z2.as_slice(),
            1e-5,
        );
        assert_eq!(h.grad_hidden[0].0, 1);
        assert_eq!(h.grad_hidden[1].0, 2);
        assert!(max_rel_err(h.grad_hidden[0].1.as_slice(), &fd1, 1e-7) < 1e-4);
        assert!(max_rel_err(h.grad_hidden[1].1.as_slice(), &fd2, 1e-7) < 1e-4);
    }

    #[test]
    fn hbr_rejects_tiny_batch() {
        let model = toy_model(0, &[3, 4, 2]);
        let x = Matrix::zeros(1, 3);
        let t = forward(&model.net, &x).unwrap();
        let y = Matrix::one_hot(&[0], 2).unwrap();
        assert!(matches!(
            hbr_loss(&t, &x, &y, &DualHsicConfig::default()),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn ha_identity_head_collapses_to_negative_hsic() {
        // head(z) = relu(z I) I = z for nonnegative z
        let d = 3;
        let mut head = ProjectionHead::<f64>::zeros(d, Activation::Relu);
        for i in 0..d {
            head.hidden.weight[(i, i)] = 1.0;
            head.output.weight[(i, i)] = 1.0;
        }
        let mut rng = RngState::new(6);
        let z = normal_matrix(&mut rng, 5, d).map(f64::abs);
        let k = KernelConfig::default();
        let a = ha_loss(&z, &z, &head, 1.0, &k).unwrap();
        let h = empirical_hsic(&z, &z, &k, &k).unwrap().value;
        assert!((a.value + h).abs() < 1e-15);
        assert!(a.value <= 0.0);
    }

    #[test]
    fn ha_constant_batch_is_zero() {
        let head = ProjectionHead::<f64>::init(3, Activation::Relu, 1);
        let mut rng = RngState::new(7);
        let z = normal_matrix(&mut rng, 4, 3);
        let c = Matrix::filled(4, 3, 0.5);
        let k = KernelConfig::default();
        assert_eq!(ha_loss(&c, &z, &head, -0.75, &k).unwrap().value, 0.0);
        assert_eq!(ha_loss(&z, &c, &head, -0.75, &k).unwrap().value, 0.0);
        assert!(ha_loss(&z, &Matrix::zeros(5, 3), &head, 1.0, &k).is_err());
    }

    #[test]
    fn ha_is_symmetric_in_its_batches() {
        let head = ProjectionHead::<f64>::init(4, Activation::Tanh, 3);
        let mut rng = RngState::new(8);
        let a = normal_matrix(&mut rng, 6, 4);
        let b = normal_matrix(&mut rng, 6, 4);
        let k = KernelConfig::gaussian(2.0);
        let ab = ha_loss(&a, &b, &head, 1.0, &k).unwrap().value;
        let ba = ha_loss(&b, &a, &head, 1.0, &k).unwrap().value;
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn ha_gradients_match_finite_differences() {
        let dim = 3;
        let head = ProjectionHead::<f64>::init(dim, Activation::Tanh, 12);
        let mut rng = RngState::new(12);
        let zb = normal_matrix(&mut rng, 6, dim);
        let zc = normal_matrix(&mut rng, 6, dim);
        let k = KernelConfig::gaussian(1.0);
        let lambda = -0.75;
        let a = ha_loss(&zb, &zc, &head, lambda, &k).unwrap();

        let fd_b = central_diff(
            |v| {
                lambda
                    * ha_loss(&mat(6, dim, v), &zc, &head, lambda, &k)
                        .unwrap()
                        .value
            },
            zb.as_slice(),
            1e-5,
        );
        let fd_c = central_diff(
            |v| {
                lambda
                    * ha_loss(&zb, &mat(6, dim, v), &head, lambda, &k)
                        .unwrap()
                        .value
            },
            zc.as_slice(),
            1e-5,
        );
        assert!(max_rel_err(a.grad_z_buffer.as_slice(), &fd_b, 1e-7) < 1e-4);
        assert!(max_rel_err(a.grad_z_current.as_slice(), &fd_c, 1e-7) < 1e-4);

        // head weights, through a Model wrapper for flattening
        let spec = MlpSpec::new(2, vec![dim], 2, Activation::Tanh).unwrap();
        let mut model = Model::<f64>::init(&spec, 0).unwrap();
        model.head = head.clone();
        let analytic = ModelGrads {
            net: crate::network::MlpGrads::zeros_like(&model.net),
            head: a.head_grads.clone(),
        }
        .flatten();
        let theta = model.flatten();
        let net_len = theta.len() - head_param_count(&head);
        let fd = central_diff(
            |v| {
                let mut m = model.clone();
                m.unflatten(v).unwrap();
                lambda * ha_loss(&zb, &zc, &m.head, lambda, &k).unwrap().value
            },
            &theta,
            1e-5,
        );
        assert!(max_rel_err(&analytic[net_len..], &fd[net_len..], 1e-7) < 1e-4);
    }

    fn head_param_count(head: &ProjectionHead<f64>) -> usize {
        [&head.hidden, &head.output]
            .iter()
            .map(|d| d.weight.as_slice().len() + d.bias.as_slice().len())
            .sum()
    }

    #[test]
    fn total_reductions() {
        let model = toy_model(1, &[3, 5, 4, 3]);
        let mut rng = RngState::new(13);
        let cur = LabeledBatch {
            x: normal_matrix(&mut rng, 6, 3),
            labels: vec![0, 1, 2, 0, 1, 2],
            stored_logits: None,
        };
        let buf = LabeledBatch {
            x: normal_matrix(&mut rng, 6, 3),
            labels: vec![2, 2, 1, 0, 0, 1],
            stored_logits: None,
        };
        let off = objective(
            &model,
            &cur,
            Some(&buf),
            BaseLoss::Er,
            &DualHsicConfig::disabled(),
        )
        .unwrap();
        let ce_cur = cross_entropy(&off.current_trace.logits, &cur.labels)
            .unwrap()
            .0;
        let ce_buf = cross_entropy(&off.buffer_trace.as_ref().unwrap().logits, &buf.labels)
            .unwrap()
            .0;
        assert_eq!(off.report.total, ce_cur + ce_buf);
        assert!(off.report.head.is_none());

        let no_ha = DualHsicConfig {
            lambda_ha: 0.0,
            ..DualHsicConfig::default()
        };
        let r = objective(&model, &cur, Some(&buf), BaseLoss::Er, &no_ha)
            .unwrap()
            .report;
        assert_eq!(r.total, r.terms.base() + r.terms.hbr());
        assert_eq!(r.terms.ha, 0.0);

        let full = objective(
            &model,
            &cur,
            Some(&buf),
            BaseLoss::Er,
            &DualHsicConfig::default(),
        )
        .unwrap();
        let t = full.report.terms;
        let rebuilt = t.base_current + t.base_buffer + t.hbr_x - t.hbr_y + t.lambda_ha * t.ha;
        assert!((full.report.total - rebuilt).abs() <= 1e-10);
    }

    #[test]
    fn empty_buffer_skips_replay_terms() {
        let model = toy_model(1, &[3, 4, 2]);
        let mut rng = RngState::new(14);
        let cur = LabeledBatch {
            x: normal_matrix(&mut rng, 4, 3),
            labels: vec![0, 1, 1, 0],
            stored_logits: None,
        };
        let out = objective(&model, &cur, None, BaseLoss::Er, &DualHsicConfig::default()).unwrap();
        assert_eq!(out.report.terms.base_buffer, 0.0);
        assert_eq!(out.report.terms.hbr_x, 0.0);
        assert_eq!(out.report.terms.ha, 0.0);
        assert_eq!(out.report.total, out.report.terms.base_current);
    }

    /// Whole-objective gradient for every parameter, ER and DER++ bases, HBR on
    /// both sites so every code path is exercised.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = RngState::new(21);
        let model = toy_model(21, &[4, 5, 3, 4]);
        let cur = LabeledBatch {
            x: normal_matrix(&mut rng, 8, 4),
            labels: vec![2, 3, 2, 3, 3, 2, 2, 3],
            stored_logits: None,
        };
        let buf = LabeledBatch {
            x: normal_matrix(&mut rng, 8, 4),
            labels: vec![0, 1, 1, 0, 0, 1, 1, 0],
            stored_logits: Some(normal_matrix(&mut rng, 8, 4)),
        };
        let cfg = DualHsicConfig {
            lambda_x: 0.2,
            lambda_y: 0.5,
            lambda_ha: -0.75,
            hbr_target: HbrSite::Both,
            kernel_z: KernelConfig::gaussian(1.0),
            ..DualHsicConfig::default()
        };
        for base in [
            BaseLoss::Er,
            BaseLoss::Derpp {
                alpha: 0.3,
                beta: 0.6,
            },
        ] {
            let out = objective(&model, &cur, Some(&buf), base, &cfg).unwrap();
            let analytic = out.grads.flatten();
            let theta = model.flatten();
            let fd = central_diff(
                |v| {
                    let mut m = model.clone();
                    m.unflatten(v).unwrap();
                    objective(&m, &cur, Some(&buf), base, &cfg)
                        .unwrap()
                        .report
                        .total
                },
                &theta,
                1e-6,
            );
            let err = max_rel_err(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "{base:?}: rel err {err}");
        }
    }

    #[test]
    fn layer_selection_parsing() {
        #[derive(Deserialize)]
        struct W {
            l: LayerSelection,
        }
        let p = |s: &str| toml::from_str::<W>(s).map(|w| w.l);
        assert_eq!(p("l = 'all'").unwrap(), LayerSelection::All);
        assert_eq!(p("l = 2").unwrap(), LayerSelection::First(2));
        assert_eq!(
            p("l = [3, 1]").unwrap(),
            LayerSelection::Explicit(vec![3, 1])
        );
        assert!(p("l = 0").is_err());
        assert!(p("l = 'some'").is_err());
        assert_eq!(
            LayerSelection::Explicit(vec![3, 1, 3]).resolve(3).unwrap(),
            vec![1, 3]
        );
        assert!(LayerSelection::First(4).resolve(3).is_err());
        assert!(LayerSelection::Explicit(vec![]).resolve(3).is_err());
    }
}
