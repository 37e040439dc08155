//! Layered models built from parametric units.
//!
//! A [`Model`] is an ordered list of [`LayerUnit`]s: convolutions, affine
//! maps, batch normalizations, and activations. Units before `encoder_end`
//! form the feature extractor; the remainder is the classifier head. The
//! model owns its parameters and their gradient accumulators; each forward
//! pass binds the parameters onto a fresh [`Tape`] and each backward pass
//! accumulates tape gradients back into the model.
//!
//! Batch-normalization statistics follow one rule set everywhere:
//! `Mode::Train` normalizes with batch statistics and folds them into the
//! running buffers; `Mode::Eval` with [`BnMode::Batch`] normalizes with
//! batch statistics but leaves the buffers untouched; `Mode::Eval` with
//! [`BnMode::Running`] normalizes with the stored running statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{NodeId, Tape, TapeGrads};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Kind and state of one layer unit.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitKind {
    /// Affine map `x · wᵀ + b`; flattens 4-d inputs row-wise first.
    Linear { d_in: usize, d_out: usize },
    /// 3×3 convolution, stride 1, padding 1.
    Conv2d { c_in: usize, c_out: usize },
    /// Feature normalization with learned scale/shift and running statistics.
    BatchNorm {
        features: usize,
        eps: f64,
        momentum: f64,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    /// Elementwise `max(x, 0)`; has no parameters.
    Relu,
}

/// One layer with its parameters and gradient accumulators.
#[derive(Debug, Clone)]
pub struct LayerUnit {
    pub name: String,
    pub kind: UnitKind,
    /// Parameter tensors: `[w, b]` for linear/conv, `[gamma, beta]` for
    /// batchnorm, empty for activations.
    pub params: Vec<Tensor>,
    /// Gradient accumulators matching `params`; `None` until a backward
    /// pass or `zero_grads` populates them.
    pub grads: Option<Vec<Tensor>>,
}

impl LayerUnit {
    /// True when the unit carries parameters.
    pub fn is_parametric(&self) -> bool {
        !self.params.is_empty()
    }

    /// Total parameter count of the unit.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    fn zero_grads(&mut self) {
        self.grads = Some(
            self.params
                .iter()
                .map(|t| Tensor::zeros(t.shape.clone()))
                .collect(),
        );
    }
}

/// Which statistics evaluation-mode batchnorm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Running,
    Batch,
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output node handles of a full forward pass.
pub struct ForwardPass {
    /// Classifier output, `[n, num_classes]`.
    pub logits: NodeId,
    /// Feature-extractor output (input to the first classifier unit),
    /// flattened to `[n, repr_dim]`.
    pub representation: NodeId,
}

/// Tape leaves holding the bound parameters of a container, indexed
/// `[unit][param]`. Units without parameters hold empty rows.
pub struct Binding {
    pub leaves: Vec<Vec<NodeId>>,
}

/// Anything that owns an ordered list of layer units.
///
/// Gradient accumulation, update rules, and the numeric gradient check are
/// written against this trait so they apply to models and to auxiliary
/// heads alike.
pub trait ParamContainer {
    fn units(&self) -> &[LayerUnit];
    fn units_mut(&mut self) -> &mut [LayerUnit];

    /// Resets gradient accumulators to zeros.
    fn zero_grads(&mut self) {
        for u in self.units_mut() {
            u.zero_grads();
        }
    }

    /// Copies parameters onto a tape as leaves.
    fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        let mut leaves = Vec::with_capacity(self.units().len());
        for u in self.units() {
            let mut row = Vec::with_capacity(u.params.len());
            for p in &u.params {
                row.push(tape.leaf(p.shape.clone(), p.data.clone())?);
            }
            leaves.push(row);
        }
        Ok(Binding { leaves })
    }

    /// Adds the tape gradients of the bound leaves into the container's
    /// accumulators. Accumulators start at zero if absent, so calling this
    /// twice with the same tape doubles the stored gradients.
    fn accumulate_grads(&mut self, binding: &Binding, grads: &TapeGrads) {
        for (u, row) in self.units_mut().iter_mut().zip(&binding.leaves) {
            if u.grads.is_none() {
                u.zero_grads();
            }
            let gs = u.grads.as_mut().unwrap();
            for (t, &leaf) in gs.iter_mut().zip(row) {
                for (acc, g) in t.data.iter_mut().zip(grads.of(leaf)) {
                    *acc += g;
                }
            }
        }
    }

    /// Plain gradient step `θ ← θ − lr·g` over every parameter.
    fn apply_update(&mut self, lr: f64) -> Result<()> {
        for u in self.units_mut() {
            if !u.is_parametric() {
                continue;
            }
            let name = u.name.clone();
            let gs = u.grads.as_ref().ok_or(Error::MissingGrads { unit: name })?;
            let updates: Vec<Vec<f64>> = gs.iter().map(|g| g.data.clone()).collect();
            for (p, g) in u.params.iter_mut().zip(updates) {
                for (pv, gv) in p.data.iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
        }
        Ok(())
    }

    /// Total parameter count.
    fn param_count(&self) -> usize {
        self.units().iter().map(|u| u.param_count()).sum()
    }

    /// True when every parameter is finite.
    fn params_finite(&self) -> bool {
        self.units()
            .iter()
            .all(|u| u.params.iter().all(|t| t.all_finite()))
    }

    /// True when every gradient accumulator exists and is finite.
    fn grads_finite(&self) -> bool {
        self.units().iter().all(|u| match &u.grads {
            Some(gs) => gs.iter().all(|t| t.all_finite()),
            None => !u.is_parametric(),
        })
    }
}

/// Gradient vector of one parametric unit, flattened across its tensors.
#[derive(Debug, Clone)]
pub struct UnitGrads {
    pub name: String,
    pub flat: Vec<f64>,
}

/// Per-parametric-unit flattened gradients, in unit order.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub units: Vec<UnitGrads>,
}

/// Reads the current gradient accumulators of every parametric unit as flat
/// vectors. Errors if any parametric unit has no populated gradients.
pub fn layer_grad_vectors<T: ParamContainer>(container: &T) -> Result<GradientSnapshot> {
    let mut units = Vec::new();
    for u in container.units() {
        if !u.is_parametric() {
            continue;
        }
        let gs = u.grads.as_ref().ok_or(Error::MissingGrads {
            unit: u.name.clone(),
        })?;
        let mut flat = Vec::with_capacity(u.param_count());
        for g in gs {
            flat.extend_from_slice(&g.data);
        }
        units.push(UnitGrads {
            name: u.name.clone(),
            flat,
        });
    }
    Ok(GradientSnapshot { units })
}

/// Bit-exact copy of parameters and running statistics, for rollback.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    params: Vec<Vec<Vec<f64>>>,
    running: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// Captures every parameter and batchnorm running buffer.
pub fn snapshot<T: ParamContainer>(container: &T) -> ParamSnapshot {
    let params = container
        .units()
        .iter()
        .map(|u| u.params.iter().map(|t| t.data.clone()).collect())
        .collect();
    let running = container
        .units()
        .iter()
        .map(|u| match &u.kind {
            UnitKind::BatchNorm {
                running_mean,
                running_var,
                ..
            } => Some((running_mean.clone(), running_var.clone())),
            _ => None,
        })
        .collect();
    ParamSnapshot { params, running }
}

/// Restores a snapshot taken from the same container layout.
pub fn restore<T: ParamContainer>(container: &mut T, snap: &ParamSnapshot) -> Result<()> {
    if snap.params.len() != container.units().len() {
        return Err(Error::LayoutMismatch {
            context: format!(
                "snapshot has {} units, container has {}",
                snap.params.len(),
                container.units().len()
            ),
        });
    }
    for ((u, ps), rs) in container
        .units_mut()
        .iter_mut()
        .zip(&snap.params)
        .zip(&snap.running)
    {
        if ps.len() != u.params.len() {
            return Err(Error::LayoutMismatch {
                context: format!("unit {}: snapshot tensor count differs", u.name),
            });
        }
        for (t, d) in u.params.iter_mut().zip(ps) {
            if t.data.len() != d.len() {
                return Err(Error::LayoutMismatch {
                    context: format!("unit {}: snapshot tensor length differs", u.name),
                });
            }
            t.data.copy_from_slice(d);
        }
        if let UnitKind::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &mut u.kind
        {
            let (m, v) = rs.as_ref().ok_or(Error::LayoutMismatch {
                context: format!("unit {}: snapshot lacks running statistics", u.name),
            })?;
            running_mean.copy_from_slice(m);
            running_var.copy_from_slice(v);
        }
    }
    Ok(())
}

/// Applies one unit to a node, using the unit's bound parameter leaves.
///
/// Linear units flatten 4-d inputs row-wise first. Batchnorm follows the
/// mode rules described in the module docs and updates the unit's running
/// buffers on training passes.
pub(crate) fn apply_layer(
    unit: &mut LayerUnit,
    tape: &mut Tape,
    leaves: &[NodeId],
    mut cur: NodeId,
    mode: Mode,
    bn_mode: BnMode,
) -> Result<NodeId> {
    let out = match &mut unit.kind {
        UnitKind::Linear { d_in, .. } => {
            let shape = tape.shape(cur).to_vec();
            if shape.len() == 4 {
                let n = shape[0];
                let flat = shape[1] * shape[2] * shape[3];
                cur = tape.reshape(cur, vec![n, flat])?;
            }
            let got = tape.shape(cur)[1];
            if got != *d_in {
                return Err(Error::shape(
                    format!("linear {}", unit.name),
                    format!("[n, {d_in}]"),
                    format!("[n, {got}]"),
                ));
            }
            tape.linear(cur, leaves[0], leaves[1])?
        }
        UnitKind::Conv2d { .. } => tape.conv2d(cur, leaves[0], leaves[1])?,
        UnitKind::BatchNorm {
            eps,
            momentum,
            running_mean,
            running_var,
            ..
        } => {
            let gamma = leaves[0];
            let beta = leaves[1];
            match (mode, bn_mode) {
                (Mode::Train, _) => {
                    let (y, stats) = tape.batchnorm_batch(cur, gamma, beta, *eps)?;
                    let m = stats.count as f64;
                    let unbias = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
                    for (r, &b) in running_mean.iter_mut().zip(&stats.mean) {
                        *r = (1.0 - *momentum) * *r + *momentum * b;
                    }
                    for (r, &b) in running_var.iter_mut().zip(&stats.var) {
                        *r = (1.0 - *momentum) * *r + *momentum * (b * unbias);
                    }
                    y
                }
                (Mode::Eval, BnMode::Batch) => tape.batchnorm_batch(cur, gamma, beta, *eps)?.0,
                (Mode::Eval, BnMode::Running) => {
                    tape.batchnorm_given(cur, gamma, beta, running_mean, running_var, *eps)?
                }
            }
        }
        UnitKind::Relu => tape.relu(cur),
    };
    Ok(out)
}

/// Classifier model: feature extractor followed by a linear head.
#[derive(Debug, Clone)]
pub struct Model {
    pub units: Vec<LayerUnit>,
    /// Units `[0, encoder_end)` form the feature extractor.
    pub encoder_end: usize,
    /// Statistics rule for `Mode::Eval` forwards.
    pub bn_mode: BnMode,
    pub num_classes: usize,
    /// Expected input shape per example, `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
}

impl ParamContainer for Model {
    fn units(&self) -> &[LayerUnit] {
        &self.units
    }
    fn units_mut(&mut self) -> &mut [LayerUnit] {
        &mut self.units
    }
}

impl Model {
    /// Names of parametric units, in order. Penalty vectors align to this.
    pub fn parametric_unit_names(&self) -> Vec<String> {
        self.units
            .iter()
            .filter(|u| u.is_parametric())
            .map(|u| u.name.clone())
            .collect()
    }

    /// Indices into `units` of the parametric units, in order.
    pub fn parametric_unit_indices(&self) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.is_parametric())
            .map(|(i, _)| i)
            .collect()
    }

    /// True when the unit at `idx` belongs to the feature extractor.
    pub fn is_encoder_unit(&self, idx: usize) -> bool {
        idx < self.encoder_end
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<usize> {
        let xs = tape.shape(x);
        let (c, h, w) = self.input_shape;
        if xs.len() != 4 || xs[1] != c || xs[2] != h || xs[3] != w {
            return Err(Error::shape(
                "model input",
                format!("[n, {c}, {h}, {w}]"),
                format!("{:?}", xs),
            ));
        }
        Ok(xs[0])
    }

    fn apply_unit(
        &mut self,
        idx: usize,
        tape: &mut Tape,
        binding: &Binding,
        cur: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let bn_mode = self.bn_mode;
        apply_layer(&mut self.units[idx], tape, &binding.leaves[idx], cur, mode, bn_mode)
    }

    /// Runs the feature extractor, returning the representation flattened
    /// to `[n, repr_dim]`.
    pub fn forward_encoder(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let n = self.check_input(tape, x)?;
        let mut cur = x;
        for idx in 0..self.encoder_end {
            cur = self.apply_unit(idx, tape, binding, cur, mode)?;
        }
        let shape = tape.shape(cur).to_vec();
        if shape.len() == 4 {
            let flat = shape[1] * shape[2] * shape[3];
            cur = tape.reshape(cur, vec![n, flat])?;
        }
        Ok(cur)
    }

    /// Full forward pass: representation plus classifier logits.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        x: NodeId,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let representation = self.forward_encoder(tape, binding, x, mode)?;
        let mut cur = representation;
        for idx in self.encoder_end..self.units.len() {
            cur = self.apply_unit(idx, tape, binding, cur, mode)?;
        }
        let shape = tape.shape(cur);
        if shape.len() != 2 || shape[1] != self.num_classes {
            return Err(Error::shape(
                "classifier output",
                format!("[n, {}]", self.num_classes),
                format!("{:?}", shape),
            ));
        }
        Ok(ForwardPass {
            logits: cur,
            representation,
        })
    }

    /// Dimension of the flattened representation fed to the classifier.
    pub fn representation_dim(&self) -> usize {
        match &self.units[self.encoder_end].kind {
            UnitKind::Linear { d_in, .. } => *d_in,
            _ => 0,
        }
    }

    /// Weight matrix rows of the final linear unit, one per class.
    pub fn head_weight_rows(&self) -> Result<Vec<Vec<f64>>> {
        let head = self.units.last().ok_or(Error::Empty {
            context: "model units".into(),
        })?;
        match &head.kind {
            UnitKind::Linear { d_in, d_out } => {
                let w = &head.params[0];
                Ok((0..*d_out)
                    .map(|o| w.data[o * d_in..(o + 1) * d_in].to_vec())
                    .collect())
            }
            _ => Err(Error::invalid("final unit is not linear")),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms from (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| randn(rng) * scale).collect();
    Tensor { shape, data }
}

pub(crate) fn linear_unit(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> LayerUnit {
    LayerUnit {
        name: name.into(),
        kind: UnitKind::Linear { d_in, d_out },
        params: vec![
            init_tensor(vec![d_out, d_in], d_in, rng),
            Tensor::zeros(vec![d_out]),
        ],
        grads: None,
    }
}

fn conv_unit(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> LayerUnit {
    LayerUnit {
        name: name.into(),
        kind: UnitKind::Conv2d { c_in, c_out },
        params: vec![
            init_tensor(vec![c_out, c_in, 3, 3], c_in * 9, rng),
            Tensor::zeros(vec![c_out]),
        ],
        grads: None,
    }
}

pub(crate) fn bn_unit(name: &str, features: usize) -> LayerUnit {
    LayerUnit {
        name: name.into(),
        kind: UnitKind::BatchNorm {
            features,
            eps: 1e-5,
            momentum: 0.1,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        },
        params: vec![Tensor::ones(vec![features]), Tensor::zeros(vec![features])],
        grads: None,
    }
}

pub(crate) fn relu_unit(name: &str) -> LayerUnit {
    LayerUnit {
        name: name.into(),
        kind: UnitKind::Relu,
        params: vec![],
        grads: None,
    }
}

/// Two-block convolutional classifier:
/// conv→bn→relu, conv→bn→relu, linear→relu, linear head.
pub fn small_cnn(
    input: (usize, usize, usize),
    channels: (usize, usize),
    hidden: usize,
    num_classes: usize,
    seed: u64,
) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = input;
    let units = vec![
        conv_unit("conv1", c, channels.0, &mut rng),
        bn_unit("bn1", channels.0),
        relu_unit("act1"),
        conv_unit("conv2", channels.0, channels.1, &mut rng),
        bn_unit("bn2", channels.1),
        relu_unit("act2"),
        linear_unit("fc1", channels.1 * h * w, hidden, &mut rng),
        relu_unit("act3"),
        linear_unit("head", hidden, num_classes, &mut rng),
    ];
    Model {
        units,
        encoder_end: 8,
        bn_mode: BnMode::Running,
        num_classes,
        input_shape: input,
    }
}

/// Three-layer fully connected classifier over flattened images:
/// linear→relu, linear→relu, linear head.
pub fn mlp(
    input: (usize, usize, usize),
    hidden: (usize, usize),
    num_classes: usize,
    seed: u64,
) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = input.0 * input.1 * input.2;
    let units = vec![
        linear_unit("fc1", d, hidden.0, &mut rng),
        relu_unit("act1"),
        linear_unit("fc2", hidden.0, hidden.1, &mut rng),
        relu_unit("act2"),
        linear_unit("head", hidden.1, num_classes, &mut rng),
    ];
    Model {
        units,
        encoder_end: 4,
        bn_mode: BnMode::Running,
        num_classes,
        input_shape: input,
    }
}

/// Which evaluation the gradient-check driver is asking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Return the loss value only; must not touch gradient accumulators.
    Value,
    /// Run backward and accumulate gradients, then return the loss value.
    Grad,
}

/// Result of a numeric gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates checked.
    pub checked: usize,
    /// Location of the worst coordinate, for debugging.
    pub worst: String,
}

/// Central-difference verification of analytic gradients.
///
/// `eval` must be a pure function of the container's parameters: it builds a
/// fresh tape, runs a forward pass (evaluation mode, so running statistics
/// stay fixed), and for [`Pass::Grad`] also backpropagates into the
/// container's accumulators. Up to `max_coords` coordinates are sampled with
/// the given seed; each is nudged by `±eps` and the central difference is
/// compared against the recorded analytic gradient with error
/// `|a − n| / max(1, |a|, |n|)`.
pub fn numeric_gradient_check<T, F>(
    container: &mut T,
    eval: &mut F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: ParamContainer,
    F: FnMut(&mut T, Pass) -> Result<f64>,
{
    container.zero_grads();
    eval(container, Pass::Grad)?;

    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    for (ui, u) in container.units().iter().enumerate() {
        for (pi, p) in u.params.iter().enumerate() {
            for k in 0..p.len() {
                coords.push((ui, pi, k));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::invalid("gradient check on a container with no parameters"));
    }
    let analytic: Vec<Vec<Vec<f64>>> = container
        .units()
        .iter()
        .map(|u| match &u.grads {
            Some(gs) => gs.iter().map(|g| g.data.clone()).collect(),
            None => vec![],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if coords.len() > max_coords {
        // Partial Fisher-Yates: the first `max_coords` entries become a
        // uniform sample without replacement.
        for i in 0..max_coords {
            let j = i + rng.gen_range(0..coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for (ui, pi, k) in coords {
        let a = analytic[ui][pi][k];
        let orig = container.units()[ui].params[pi].data[k];
        container.units_mut()[ui].params[pi].data[k] = orig + eps;
        let lp = eval(container, Pass::Value)?;
        container.units_mut()[ui].params[pi].data[k] = orig - eps;
        let lm = eval(container, Pass::Value)?;
        container.units_mut()[ui].params[pi].data[k] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!(
                "{}[{}][{}]: analytic {} vs numeric {}",
                container.units()[ui].name,
                pi,
                k,
                a,
                numeric
            );
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_leaf(tape: &mut Tape, n: usize, input: (usize, usize, usize), seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * input.0 * input.1 * input.2;
        let data = (0..len).map(|_| rng.gen::<f64>()).collect();
        tape.leaf(vec![n, input.0, input.1, input.2], data).unwrap()
    }

    #[test]
    fn builders_have_expected_layout() {
        let m = small_cnn((3, 8, 8), (4, 4), 16, 5, 1);
        assert_eq!(m.parametric_unit_names(), ["conv1", "bn1", "conv2", "bn2", "fc1", "head"]);
        assert_eq!(m.representation_dim(), 16);
        let m = mlp((3, 8, 8), (32, 16), 5, 1);
        assert_eq!(m.parametric_unit_names(), ["fc1", "fc2", "head"]);
        assert_eq!(m.param_count(), 192 * 32 + 32 + 32 * 16 + 16 + 16 * 5 + 5);
    }

    #[test]
    fn forward_produces_logits_and_representation() {
        let mut m = small_cnn((3, 8, 8), (4, 4), 16, 5, 2);
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 3, (3, 8, 8), 10);
        let binding = m.bind(&mut tape).unwrap();
        let out = m.forward(&mut tape, &binding, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.logits), &[3, 5]);
        assert_eq!(tape.shape(out.representation), &[3, 16]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut m = mlp((3, 8, 8), (8, 8), 3, 0);
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 2, (3, 4, 4), 1);
        let binding = m.bind(&mut tape).unwrap();
        assert!(m.forward(&mut tape, &binding, x, Mode::Eval).is_err());
    }

    #[test]
    fn train_mode_updates_running_statistics_and_eval_modes_do_not() {
        let mut m = small_cnn((3, 8, 8), (4, 4), 16, 5, 3);
        let before: Vec<f64> = match &m.units[1].kind {
            UnitKind::BatchNorm { running_mean, .. } => running_mean.clone(),
            _ => unreachable!(),
        };

        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 4, (3, 8, 8), 11);
        let binding = m.bind(&mut tape).unwrap();
        m.bn_mode = BnMode::Batch;
        m.forward(&mut tape, &binding, x, Mode::Eval).unwrap();
        let after_eval: Vec<f64> = match &m.units[1].kind {
            UnitKind::BatchNorm { running_mean, .. } => running_mean.clone(),
            _ => unreachable!(),
        };
        assert_eq!(before, after_eval);

        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 4, (3, 8, 8), 11);
        let binding = m.bind(&mut tape).unwrap();
        m.forward(&mut tape, &binding, x, Mode::Train).unwrap();
        let after_train: Vec<f64> = match &m.units[1].kind {
            UnitKind::BatchNorm { running_mean, .. } => running_mean.clone(),
            _ => unreachable!(),
        };
        assert_ne!(before, after_train);
    }

    #[test]
    fn running_update_matches_momentum_formula() {
        let mut m = mlp((1, 1, 2), (4, 4), 2, 4);
        m.units.insert(1, bn_unit("bn1", 4));
        m.encoder_end += 1;
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let binding = m.bind(&mut tape).unwrap();
        let fc1 = tape.value(binding.leaves[0][0]).to_vec();
        m.forward(&mut tape, &binding, x, Mode::Train).unwrap();
        // Recompute the expected running mean for feature 0 by hand.
        let h0 = [
            fc1[0] * 1.0 + fc1[1] * 2.0,
            fc1[0] * 3.0 + fc1[1] * 4.0,
        ];
        let mean = (h0[0] + h0[1]) / 2.0;
        let var_pop = ((h0[0] - mean).powi(2) + (h0[1] - mean).powi(2)) / 2.0;
        let var_unbiased = var_pop * 2.0;
        match &m.units[1].kind {
            UnitKind::BatchNorm {
                running_mean,
                running_var,
                ..
            } => {
                assert!((running_mean[0] - 0.1 * mean).abs() < 1e-12);
                assert!((running_var[0] - (0.9 + 0.1 * var_unbiased)).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn grad_accumulation_doubles_and_zeroing_resets() {
        let mut m = mlp((1, 2, 2), (4, 4), 3, 5);
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 2, (1, 2, 2), 12);
        let binding = m.bind(&mut tape).unwrap();
        let out = m.forward(&mut tape, &binding, x, Mode::Eval).unwrap();
        let p = tape.softmax_rows(out.logits, 1.0).unwrap();
        let loss = tape.cross_entropy_one_hot(p, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        m.accumulate_grads(&binding, &grads);
        let once = layer_grad_vectors(&m).unwrap();
        m.accumulate_grads(&binding, &grads);
        let twice = layer_grad_vectors(&m).unwrap();
        for (a, b) in once.units.iter().zip(&twice.units) {
            for (x1, x2) in a.flat.iter().zip(&b.flat) {
                assert!((x2 - 2.0 * x1).abs() < 1e-15);
            }
        }
        m.zero_grads();
        let zeroed = layer_grad_vectors(&m).unwrap();
        assert!(zeroed.units.iter().all(|u| u.flat.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn grads_unavailable_before_any_backward() {
        let m = mlp((1, 2, 2), (4, 4), 3, 6);
        assert!(matches!(
            layer_grad_vectors(&m),
            Err(Error::MissingGrads { .. })
        ));
        let mut m = m;
        assert!(matches!(m.apply_update(0.1), Err(Error::MissingGrads { .. })));
    }

    #[test]
    fn apply_update_moves_against_gradient() {
        let mut m = mlp((1, 1, 2), (2, 2), 2, 7);
        m.zero_grads();
        m.units[0].grads.as_mut().unwrap()[0].data[0] = 2.0;
        let before = m.units[0].params[0].data[0];
        m.apply_update(0.5).unwrap();
        assert!((m.units[0].params[0].data[0] - (before - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn snapshot_restore_is_bit_exact() {
        let mut m = small_cnn((3, 8, 8), (4, 4), 16, 5, 8);
        let snap = snapshot(&m);
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, 4, (3, 8, 8), 13);
        let binding = m.bind(&mut tape).unwrap();
        let out = m.forward(&mut tape, &binding, x, Mode::Train).unwrap();
        let p = tape.softmax_rows(out.logits, 1.0).unwrap();
        let loss = tape.mean_row_entropy(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        m.accumulate_grads(&binding, &grads);
        m.apply_update(0.1).unwrap();
        let moved = snapshot(&m);
        assert_ne!(snap, moved);
        restore(&mut m, &snap).unwrap();
        assert_eq!(snapshot(&m), snap);
    }

    #[test]
    fn numeric_check_passes_for_cross_entropy_on_mlp() {
        let mut m = mlp((1, 2, 2), (6, 4), 3, 9);
        m.bn_mode = BnMode::Batch;
        let labels = vec![0, 1, 2, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let report = numeric_gradient_check(
            &mut m,
            &mut |m: &mut Model, pass| {
                let mut tape = Tape::new();
                let x = tape.leaf(vec![4, 1, 2, 2], data.clone())?;
                let binding = m.bind(&mut tape)?;
                let out = m.forward(&mut tape, &binding, x, Mode::Eval)?;
                let p = tape.softmax_rows(out.logits, 1.0)?;
                let loss = tape.cross_entropy_one_hot(p, &labels)?;
                if pass == Pass::Grad {
                    let grads = tape.backward(loss)?;
                    m.accumulate_grads(&binding, &grads);
                }
                Ok(tape.scalar(loss))
            },
            1e-4,
            120,
            100,
        )
        .unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_err < 1e-6,
            "worst coordinate: {}",
            report.worst
        );
    }
}
