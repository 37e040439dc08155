//! Nearest-source-prototype auxiliary classification.
//!
//! A small projector maps the frozen feature extractor's representation
//! into an embedding space where each class keeps an exponential moving
//! average prototype. Classification is softmax over cosine similarity to
//! the prototypes at a sharp temperature. Because the prototype head never
//! touches the linear classifier, its losses can update the feature
//! extractor at test time without perturbing the decision layer.
//!
//! The projector and prototypes are fitted on labeled source data before
//! deployment: each batch minimizes the prototype cross-entropy of an
//! example and of an augmented copy, and prototypes track projections by
//! EMA. A class's prototype starts as the first projection seen for that
//! class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_transform, batch_leaf, LabeledDataset, TransformSpec};
use crate::graph::{NodeId, Tape};
use crate::model::{
    apply_layer, bn_unit, linear_unit, relu_unit, BnMode, LayerUnit, Mode, Model,
    ParamContainer,
};
use crate::tensor::softmax_row;
use crate::{derive_seed, Error, Result};

/// Default EMA retention for prototype updates.
pub const DEFAULT_ALPHA: f64 = 0.99;
/// Default softmax temperature for prototype classification.
pub const DEFAULT_TAU: f64 = 0.1;

/// Where prototypes live and what queries them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeSource {
    /// Prototypes are EMAs of projector outputs; queries are projections.
    ProjectionZ,
    /// Prototypes are EMAs of raw representations; requires projector
    /// depth 0 so queries live in the same space.
    RepresentationH,
    /// Prototypes are the classifier head's weight rows, kept fixed;
    /// requires projector depth 0.
    ClassifierWeights,
}

impl PrototypeSource {
    pub fn name(&self) -> &'static str {
        match self {
            PrototypeSource::ProjectionZ => "projection_z",
            PrototypeSource::RepresentationH => "representation_h",
            PrototypeSource::ClassifierWeights => "classifier_weights",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "projection_z" => Ok(PrototypeSource::ProjectionZ),
            "representation_h" => Ok(PrototypeSource::RepresentationH),
            "classifier_weights" => Ok(PrototypeSource::ClassifierWeights),
            _ => Err(Error::invalid(format!("unknown prototype source {name:?}"))),
        }
    }
}

/// Embedding head applied to the representation: `depth` linear layers of
/// `width` units with batchnorm+relu between them. Depth 0 is the identity.
#[derive(Debug, Clone)]
pub struct Projector {
    pub units: Vec<LayerUnit>,
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub bn_mode: BnMode,
}

impl ParamContainer for Projector {
    fn units(&self) -> &[LayerUnit] {
        &self.units
    }
    fn units_mut(&mut self) -> &mut [LayerUnit] {
        &mut self.units
    }
}

impl Projector {
    /// Builds a seeded projector. Depth 0 yields the identity map.
    pub fn new(input_dim: usize, depth: usize, width: usize, seed: u64) -> Result<Self> {
        if depth > 3 {
            return Err(Error::invalid(format!(
                "projector depth must be 0..=3, got {depth}"
            )));
        }
        if depth > 0 && width == 0 {
            return Err(Error::invalid("projector width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut units = Vec::new();
        let mut d_in = input_dim;
        for i in 0..depth {
            units.push(linear_unit(&format!("plin{}", i + 1), d_in, width, &mut rng));
            if i + 1 < depth {
                units.push(bn_unit(&format!("pbn{}", i + 1), width));
                units.push(relu_unit(&format!("pact{}", i + 1)));
            }
            d_in = width;
        }
        Ok(Projector {
            units,
            depth,
            width,
            input_dim,
            bn_mode: BnMode::Batch,
        })
    }

    /// Embedding dimension produced by the projector.
    pub fn output_dim(&self) -> usize {
        if self.depth == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    /// Maps representation rows `[n, input_dim]` to embeddings. Depth 0
    /// returns the input node unchanged.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &crate::model::Binding,
        h: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let hs = tape.shape(h);
        if hs.len() != 2 || hs[1] != self.input_dim {
            return Err(Error::shape(
                "projector input",
                format!("[n, {}]", self.input_dim),
                format!("{:?}", hs),
            ));
        }
        let bn_mode = self.bn_mode;
        let mut cur = h;
        for (idx, unit) in self.units.iter_mut().enumerate() {
            cur = apply_layer(unit, tape, &binding.leaves[idx], cur, mode, bn_mode)?;
        }
        Ok(cur)
    }
}

/// Per-class EMA prototypes with the cosine-softmax readout.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
    /// EMA retention: `q ← α·q + (1−α)·z`.
    pub alpha: f64,
    /// Softmax temperature over cosine similarities.
    pub tau: f64,
    pub source: PrototypeSource,
}

impl PrototypeBank {
    /// An uninitialized bank; the first update per class sets its prototype.
    pub fn empty(
        num_classes: usize,
        dim: usize,
        alpha: f64,
        tau: f64,
        source: PrototypeSource,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if tau <= 0.0 {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        if num_classes < 2 || dim == 0 {
            return Err(Error::invalid(format!(
                "bank needs >=2 classes and positive dim, got {num_classes}x{dim}"
            )));
        }
        Ok(PrototypeBank {
            prototypes: vec![vec![0.0; dim]; num_classes],
            initialized: vec![false; num_classes],
            alpha,
            tau,
            source,
        })
    }

    /// A bank whose prototypes are fixed rows (used for classifier-weight
    /// prototypes); all classes count as initialized.
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        alpha: f64,
        tau: f64,
        source: PrototypeSource,
    ) -> Result<Self> {
        let mut bank = PrototypeBank::empty(
            rows.len(),
            rows.first().map(|r| r.len()).unwrap_or(0),
            alpha,
            tau,
            source,
        )?;
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != bank.dim() {
                return Err(Error::LayoutMismatch {
                    context: format!("prototype {k} has a different dimension"),
                });
            }
            bank.prototypes[k] = row;
            bank.initialized[k] = true;
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    /// Folds one embedding into its class prototype. The first update of a
    /// class adopts the embedding outright; later ones blend by EMA.
    pub fn ema_update(&mut self, class: usize, z: &[f64]) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} prototypes",
                self.num_classes()
            )));
        }
        if z.len() != self.dim() {
            return Err(Error::shape(
                "prototype update",
                format!("[{}]", self.dim()),
                format!("[{}]", z.len()),
            ));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding for class {class}"),
            });
        }
        if self.initialized[class] {
            let a = self.alpha;
            for (q, &v) in self.prototypes[class].iter_mut().zip(z) {
                *q = a * *q + (1.0 - a) * v;
            }
        } else {
            self.prototypes[class].copy_from_slice(z);
            self.initialized[class] = true;
        }
        Ok(())
    }

    /// Checks that every class has a finite, nonzero prototype.
    pub fn validate(&self) -> Result<()> {
        for (k, (p, &init)) in self.prototypes.iter().zip(&self.initialized).enumerate() {
            if !init {
                return Err(Error::ClassMissing { class: k });
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("prototype {k}"),
                });
            }
            if crate::tensor::norm(p) < 1e-12 {
                return Err(Error::invalid(format!("prototype {k} is numerically zero")));
            }
        }
        Ok(())
    }

    /// Class distribution of one embedding: softmax over cosine
    /// similarities at temperature `tau`. A zero-norm query is equally far
    /// from everything and yields the uniform distribution.
    pub fn predict_row(&self, z: &[f64]) -> Vec<f64> {
        let sims: Vec<f64> = self
            .prototypes
            .iter()
            .map(|q| crate::tensor::cosine_similarity(z, q))
            .collect();
        softmax_row(&sims, self.tau)
    }
}

/// Records the bank's cosine-softmax readout of an embedding node,
/// `[n, dim] → [n, num_classes]`, differentiable through the embeddings.
/// Prototypes enter as constants.
pub fn nsp_predict_node(tape: &mut Tape, z: NodeId, bank: &PrototypeBank) -> Result<NodeId> {
    bank.validate()?;
    let zs = tape.shape(z);
    if zs.len() != 2 || zs[1] != bank.dim() {
        return Err(Error::shape(
            "prototype readout input",
            format!("[n, {}]", bank.dim()),
            format!("{:?}", zs),
        ));
    }
    let sims = tape.cosine_to_anchors(z, &bank.prototypes)?;
    tape.softmax_rows(sims, bank.tau)
}

/// Projector-training loss: prototype cross-entropy of the example plus
/// that of its augmented copy, averaged over the batch.
pub fn embedding_loss(
    tape: &mut Tape,
    pred: NodeId,
    pred_aug: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let a = tape.cross_entropy_one_hot(pred, labels)?;
    let b = tape.cross_entropy_one_hot(pred_aug, labels)?;
    tape.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

/// Entropy shaping of prototype predictions: minimize per-example entropy,
/// maximize the entropy of the batch-mean prediction.
pub fn aux_entropy_loss(
    tape: &mut Tape,
    pred: NodeId,
    lambda_a1: f64,
    lambda_a2: f64,
) -> Result<NodeId> {
    let mean_h = tape.mean_row_entropy(pred)?;
    let h_mean = tape.entropy_of_mean_row(pred)?;
    tape.weighted_sum(&[(mean_h, lambda_a1), (h_mean, -lambda_a2)])
}

/// Consistency across augmentation: cross-entropy of the augmented
/// prediction under the clean one. With `stop_grad` the clean prediction is
/// treated as a constant target.
pub fn self_supervised_loss(
    tape: &mut Tape,
    pred: NodeId,
    pred_aug: NodeId,
    stop_grad: bool,
) -> Result<NodeId> {
    let target = if stop_grad { tape.detach(pred) } else { pred };
    tape.cross_entropy_rows(target, pred_aug)
}

/// Full auxiliary objective: entropy shaping plus weighted consistency.
#[allow(clippy::too_many_arguments)]
pub fn aux_loss(
    tape: &mut Tape,
    pred: NodeId,
    pred_aug: NodeId,
    lambda_a1: f64,
    lambda_a2: f64,
    lambda_s: f64,
    stop_grad: bool,
) -> Result<NodeId> {
    let ent = aux_entropy_loss(tape, pred, lambda_a1, lambda_a2)?;
    let ss = self_supervised_loss(tape, pred, pred_aug, stop_grad)?;
    tape.weighted_sum(&[(ent, 1.0), (ss, lambda_s)])
}

/// Configuration for fitting the projector and prototypes on source data.
#[derive(Debug, Clone)]
pub struct NspTrainConfig {
    pub depth: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub tau: f64,
    pub source: PrototypeSource,
    pub seed: u64,
}

impl Default for NspTrainConfig {
    fn default() -> Self {
        NspTrainConfig {
            depth: 2,
            width: 64,
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            source: PrototypeSource::ProjectionZ,
            seed: 0,
        }
    }
}

/// Extracts representations for a batch on a fresh tape and returns them as
/// detached constants, so downstream losses never reach the backbone.
fn detached_representations(
    model: &mut Model,
    tape: &mut Tape,
    images: &[crate::data::Image],
) -> Result<NodeId> {
    let x = batch_leaf(tape, images)?;
    let binding = model.bind(tape)?;
    let h = model.forward_encoder(tape, &binding, x, Mode::Eval)?;
    Ok(tape.detach(h))
}

/// Fits the projector and prototype bank on labeled source data.
///
/// The classifier model is cloned and used frozen, in evaluation mode with
/// running statistics; only projector parameters train. Each batch
/// minimizes [`embedding_loss`] over the batch and an augmented copy, then
/// folds the batch's (pre-update) projections into the prototypes by EMA.
/// With [`PrototypeSource::ClassifierWeights`] the prototypes are the head
/// weight rows and no training happens.
pub fn train_projector_and_prototypes(
    model: &Model,
    dataset: &LabeledDataset,
    transform: &TransformSpec,
    cfg: &NspTrainConfig,
) -> Result<(Projector, PrototypeBank)> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "projector training dataset".into(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::invalid(format!(
            "projector training needs epochs >= 1 and batch_size >= 2, got {} and {}",
            cfg.epochs, cfg.batch_size
        )));
    }
    match cfg.source {
        PrototypeSource::RepresentationH | PrototypeSource::ClassifierWeights
            if cfg.depth != 0 =>
        {
            return Err(Error::invalid(format!(
                "prototype source {} requires projector depth 0, got {}",
                cfg.source.name(),
                cfg.depth
            )));
        }
        _ => {}
    }

    let mut frozen = model.clone();
    frozen.bn_mode = BnMode::Running;
    let repr_dim = frozen.representation_dim();
    let mut projector = Projector::new(repr_dim, cfg.depth, cfg.width, derive_seed(cfg.seed, "projector-init", 0))?;

    if cfg.source == PrototypeSource::ClassifierWeights {
        let bank = PrototypeBank::from_rows(
            frozen.head_weight_rows()?,
            cfg.alpha,
            cfg.tau,
            cfg.source,
        )?;
        return Ok((projector, bank));
    }

    let mut bank = PrototypeBank::empty(
        model.num_classes,
        projector.output_dim(),
        cfg.alpha,
        cfg.tau,
        cfg.source,
    )?;
    let trainable = projector.param_count() > 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "nsp-epoch", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<crate::data::Image> =
                chunk.iter().map(|&i| dataset.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let augmented: Vec<crate::data::Image> = chunk
                .iter()
                .map(|&i| {
                    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        "nsp-transform",
                        (epoch * dataset.len() + i) as u64,
                    ));
                    apply_transform(&dataset.images[i], transform, &mut trng)
                })
                .collect();

            let mut tape = Tape::new();
            let h = detached_representations(&mut frozen, &mut tape, &images)?;
            let h_aug = detached_representations(&mut frozen, &mut tape, &augmented)?;
            let pbinding = projector.bind(&mut tape)?;
            let z = projector.forward(&mut tape, &pbinding, h, Mode::Train)?;
            let z_aug = projector.forward(&mut tape, &pbinding, h_aug, Mode::Train)?;
            let z_values: Vec<Vec<f64>> = {
                let flat = tape.value(z);
                let d = projector.output_dim();
                (0..images.len())
                    .map(|i| flat[i * d..(i + 1) * d].to_vec())
                    .collect()
            };

            // Prototypes enter the loss as constants; a class whose
            // prototype is still unset would make the readout degenerate,
            // so seed the batch's unseen classes first.
            for (zi, &y) in z_values.iter().zip(&labels) {
                if !bank.initialized[y] {
                    bank.ema_update(y, zi)?;
                }
            }
            if bank.initialized.iter().all(|&b| b) {
                let pred = nsp_predict_node(&mut tape, z, &bank)?;
                let pred_aug = nsp_predict_node(&mut tape, z_aug, &bank)?;
                let loss = embedding_loss(&mut tape, pred, pred_aug, &labels)?;
                if trainable {
                    let grads = tape.backward(loss)?;
                    projector.zero_grads();
                    projector.accumulate_grads(&pbinding, &grads);
                    if !projector.grads_finite() {
                        return Err(Error::NonFinite {
                            context: "projector gradients".into(),
                        });
                    }
                    projector.apply_update(cfg.lr)?;
                }
            }
            for (zi, &y) in z_values.iter().zip(&labels) {
                bank.ema_update(y, zi)?;
            }
        }
    }
    bank.validate()?;
    Ok((projector, bank))
}
