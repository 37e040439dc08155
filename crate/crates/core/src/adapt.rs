//! Test-time adaptation protocol.
//!
//! Deployment follows a strict online discipline: batches arrive from a
//! single-pass stream, every example is predicted with the parameters as
//! they stand, and only then does the step's loss update the model. Labels
//! never reach the adaptation path; they are revealed afterwards purely for
//! error accounting.
//!
//! The step loss combines, depending on the run mode, the entropy-shaping
//! objective on classifier predictions, the prototype-head auxiliary
//! objective on embeddings (which reaches the feature extractor but not the
//! classifier head), and the per-unit tethered update that damps
//! shift-agnostic parameters. Any non-finite loss, gradient, or parameter
//! aborts the step and rolls every piece of state back bit-exactly.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::data::{
    apply_transform, batch_leaf, make_target_stream, CorruptionSpec, Image, LabeledDataset,
    TransformSpec,
};
use crate::graph::{NodeId, Tape};
use crate::model::{
    layer_grad_vectors, snapshot, restore, BnMode, Mode, Model, ParamContainer, ParamSnapshot,
};
use crate::nsp::{aux_entropy_loss, nsp_predict_node, self_supervised_loss, PrototypeBank, Projector};
use crate::swr::{apply_update_with_swr, PenaltyVector, ThetaStar, ThetaStarPolicy};
use crate::tensor::argmax;
use crate::{derive_seed, Error, Result};

/// What drives the updates during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// No updates at all; the frozen source model predicts.
    SourceOnly,
    /// Classifier entropy shaping with plain gradient steps.
    MainOnly,
    /// Classifier entropy shaping plus the whole prototype objective,
    /// still with plain gradient steps.
    MainNsp,
    /// Classifier entropy shaping with the tethered update.
    MainSwr,
    /// Tethered update plus the prototype head's entropy shaping.
    MainSwrNspEnt,
    /// Everything: tethered update, prototype entropy shaping, and
    /// augmentation consistency.
    Full,
    /// Cross-entropy on true labels with plain steps; a cheating upper
    /// bound used only as a diagnostic reference.
    SupervisedOracle,
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::SourceOnly => "source_only",
            RunMode::MainOnly => "main_only",
            RunMode::MainNsp => "main_nsp",
            RunMode::MainSwr => "main_swr",
            RunMode::MainSwrNspEnt => "main_swr_nsp_ent",
            RunMode::Full => "full",
            RunMode::SupervisedOracle => "supervised_oracle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "source_only" => Ok(RunMode::SourceOnly),
            "main_only" => Ok(RunMode::MainOnly),
            "main_nsp" => Ok(RunMode::MainNsp),
            "main_swr" => Ok(RunMode::MainSwr),
            "main_swr_nsp_ent" => Ok(RunMode::MainSwrNspEnt),
            "full" => Ok(RunMode::Full),
            "supervised_oracle" => Ok(RunMode::SupervisedOracle),
            _ => Err(Error::invalid(format!("unknown run mode {name:?}"))),
        }
    }

    /// True when the mode builds prototype-head losses.
    pub fn uses_nsp(&self) -> bool {
        matches!(self, RunMode::MainNsp | RunMode::MainSwrNspEnt | RunMode::Full)
    }

    /// True when the mode adds the augmentation-consistency term.
    pub fn uses_selfsup(&self) -> bool {
        matches!(self, RunMode::MainNsp | RunMode::Full)
    }

    /// True when the mode applies the tethered update.
    pub fn uses_swr(&self) -> bool {
        matches!(self, RunMode::MainSwr | RunMode::MainSwrNspEnt | RunMode::Full)
    }

    /// True when the mode changes parameters at all.
    pub fn updates(&self) -> bool {
        !matches!(self, RunMode::SourceOnly)
    }
}

/// Hyperparameters of one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub mode: RunMode,
    pub lr: f64,
    /// Weight of per-example classifier entropy.
    pub lambda_m1: f64,
    /// Weight of batch-marginal classifier entropy (maximized).
    pub lambda_m2: f64,
    /// Weight of per-example prototype entropy.
    pub lambda_a1: f64,
    /// Weight of batch-marginal prototype entropy (maximized).
    pub lambda_a2: f64,
    /// Weight of the augmentation-consistency term.
    pub lambda_s: f64,
    /// Strength of the tethered update.
    pub lambda_r: f64,
    /// Statistics rule during the run.
    pub bn_mode: BnMode,
    /// Anchor policy for the tether.
    pub theta_star_policy: ThetaStarPolicy,
    /// Passes over the stream; above 1 the protocol is offline.
    pub epochs: usize,
    /// Treat the clean prototype prediction as a constant target in the
    /// consistency term.
    pub stop_grad: bool,
    /// Keep folding streamed embeddings into prototypes using predicted
    /// classes.
    pub test_time_ema: bool,
    /// Let the projector's own parameters adapt as well.
    pub projector_finetune: bool,
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: RunMode::Full,
            lr: 1.0,
            lambda_m1: 0.2,
            lambda_m2: 0.25,
            lambda_a1: 0.8,
            lambda_a2: 0.25,
            lambda_s: 0.1,
            lambda_r: 250.0,
            bn_mode: BnMode::Batch,
            theta_star_policy: ThetaStarPolicy::UpdatePrev,
            epochs: 1,
            stop_grad: true,
            test_time_ema: false,
            projector_finetune: false,
            batch_size: 32,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.updates() && !(self.lr > 0.0) {
            return Err(Error::Config {
                detail: format!("lr must be positive, got {}", self.lr),
            });
        }
        for (name, v) in [
            ("lambda_m1", self.lambda_m1),
            ("lambda_m2", self.lambda_m2),
            ("lambda_a1", self.lambda_a1),
            ("lambda_a2", self.lambda_a2),
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config {
                    detail: format!("{name} must be non-negative, got {v}"),
                });
            }
        }
        if !(1..=3).contains(&self.epochs) {
            return Err(Error::Config {
                detail: format!("epochs must be 1..=3, got {}", self.epochs),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::Config {
                detail: format!("batch_size must be at least 2, got {}", self.batch_size),
            });
        }
        Ok(())
    }

    /// Every setting as ordered key=value pairs, the canonical form echoed
    /// into metrics headers and fed to the config fingerprint.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let bn = match self.bn_mode {
            BnMode::Running => "running",
            BnMode::Batch => "batch",
        };
        let anchor = match self.theta_star_policy {
            ThetaStarPolicy::UpdatePrev => "prev",
            ThetaStarPolicy::FrozenSource => "source",
        };
        [
            ("mode", self.mode.name().to_string()),
            ("lr", self.lr.to_string()),
            ("lambda_m1", self.lambda_m1.to_string()),
            ("lambda_m2", self.lambda_m2.to_string()),
            ("lambda_a1", self.lambda_a1.to_string()),
            ("lambda_a2", self.lambda_a2.to_string()),
            ("lambda_s", self.lambda_s.to_string()),
            ("lambda_r", self.lambda_r.to_string()),
            ("bn_stats", bn.to_string()),
            ("anchor", anchor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("stop_grad", self.stop_grad.to_string()),
            ("test_time_ema", self.test_time_ema.to_string()),
            ("projector_finetune", self.projector_finetune.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Entropy shaping of classifier predictions: minimize per-example entropy,
/// maximize the entropy of the batch-mean prediction.
pub fn main_entropy_loss(
    tape: &mut Tape,
    probs: NodeId,
    lambda_m1: f64,
    lambda_m2: f64,
) -> Result<NodeId> {
    let mean_h = tape.mean_row_entropy(probs)?;
    let h_mean = tape.entropy_of_mean_row(probs)?;
    tape.weighted_sum(&[(mean_h, lambda_m1), (h_mean, -lambda_m2)])
}

/// What one protocol step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Pre-update class predictions, one per example.
    pub predictions: Vec<usize>,
    /// Mean entropy of the pre-update classifier predictions.
    pub mean_main_entropy: f64,
    /// Mean entropy of the pre-update prototype predictions, for modes
    /// that build them.
    pub mean_nsp_entropy: Option<f64>,
    /// The step's loss value (0 for source-only).
    pub loss: f64,
    /// False when the step was aborted and rolled back.
    pub applied: bool,
}

/// Mutable state a run threads through its steps.
pub struct AdaptState<'a> {
    pub model: &'a mut Model,
    pub theta_star: &'a mut ThetaStar,
    pub projector: Option<&'a mut Projector>,
    pub bank: Option<&'a mut PrototypeBank>,
}

fn mean_rows_entropy_of(tape: &Tape, probs: NodeId) -> f64 {
    let shape = tape.shape(probs);
    let (n, c) = (shape[0], shape[1]);
    let data = tape.value(probs);
    let mut acc = 0.0;
    for i in 0..n {
        acc += crate::tensor::entropy(&data[i * c..(i + 1) * c]);
    }
    acc / n as f64
}

/// Runs one predict-then-update step on a batch.
///
/// The forward pass happens once, before any update; predictions and
/// entropy metrics come from it. Oracle labels are accepted only in
/// supervised-oracle mode. If the loss, the gradients, or the updated
/// parameters are not finite, every piece of state rolls back bit-exactly
/// and the outcome reports the step as not applied.
pub fn tta_step(
    state: &mut AdaptState<'_>,
    penalty: &PenaltyVector,
    images: &[Image],
    oracle_labels: Option<&[usize]>,
    cfg: &AdaptConfig,
    transform: &TransformSpec,
    step_seed: u64,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::BatchTooSmall {
            context: "adaptation step".into(),
            n: images.len(),
        });
    }
    if cfg.mode == RunMode::SupervisedOracle {
        match oracle_labels {
            Some(ls) if ls.len() == images.len() => {}
            _ => {
                return Err(Error::invalid(
                    "supervised oracle mode needs one label per example",
                ))
            }
        }
    } else if oracle_labels.is_some() {
        return Err(Error::invalid(
            "labels are only accepted in supervised oracle mode",
        ));
    }
    if cfg.mode.uses_nsp() && (state.projector.is_none() || state.bank.is_none()) {
        return Err(Error::invalid(format!(
            "mode {} needs a projector and prototype bank",
            cfg.mode.name()
        )));
    }

    state.model.bn_mode = cfg.bn_mode;
    state.model.zero_grads();

    // Rollback points for everything a step may touch.
    let model_snap = snapshot(state.model);
    let proj_snap = state.projector.as_deref().map(snapshot);
    let bank_snap = state.bank.as_deref().map(|b| b.clone());
    let anchor_snap = state.theta_star.clone();

    let mut tape = Tape::new();
    let x = batch_leaf(&mut tape, images)?;
    let binding = state.model.bind(&mut tape)?;
    let fwd = state.model.forward(&mut tape, &binding, x, Mode::Eval)?;
    let probs = tape.softmax_rows(fwd.logits, 1.0)?;

    let predictions: Vec<usize> = {
        let data = tape.value(probs);
        let c = state.model.num_classes;
        (0..images.len())
            .map(|i| argmax(&data[i * c..(i + 1) * c]))
            .collect()
    };
    let mean_main_entropy = mean_rows_entropy_of(&tape, probs);

    if cfg.mode == RunMode::SourceOnly {
        return Ok(StepOutcome {
            predictions,
            mean_main_entropy,
            mean_nsp_entropy: None,
            loss: 0.0,
            applied: false,
        });
    }

    // Prototype-head nodes, when the mode wants them.
    let mut mean_nsp_entropy = None;
    let mut nsp_pred = None;
    let mut proj_binding = None;
    let mut z_node = None;
    if cfg.mode.uses_nsp() {
        let projector = state.projector.as_mut().unwrap();
        let bank = state.bank.as_deref().unwrap();
        let pbinding = projector.bind(&mut tape)?;
        let z = projector.forward(&mut tape, &pbinding, fwd.representation, Mode::Eval)?;
        let pred = nsp_predict_node(&mut tape, z, bank)?;
        mean_nsp_entropy = Some(mean_rows_entropy_of(&tape, pred));
        nsp_pred = Some(pred);
        z_node = Some(z);
        proj_binding = Some(pbinding);
    }

    // Assemble the step loss.
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    match cfg.mode {
        RunMode::SupervisedOracle => {
            let ce = tape.cross_entropy_one_hot(probs, oracle_labels.unwrap())?;
            terms.push((ce, 1.0));
        }
        _ => {
            let main = main_entropy_loss(&mut tape, probs, cfg.lambda_m1, cfg.lambda_m2)?;
            terms.push((main, 1.0));
        }
    }
    if cfg.mode.uses_nsp() {
        let pred = nsp_pred.unwrap();
        let ent = aux_entropy_loss(&mut tape, pred, cfg.lambda_a1, cfg.lambda_a2)?;
        terms.push((ent, 1.0));
        if cfg.mode.uses_selfsup() {
            let mut augmented = Vec::with_capacity(images.len());
            for (i, img) in images.iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(step_seed, "step-aug", i as u64));
                augmented.push(apply_transform(img, transform, &mut rng));
            }
            let x_aug = batch_leaf(&mut tape, &augmented)?;
            let h_aug = state
                .model
                .forward_encoder(&mut tape, &binding, x_aug, Mode::Eval)?;
            let projector = state.projector.as_mut().unwrap();
            let z_aug = projector.forward(
                &mut tape,
                proj_binding.as_ref().unwrap(),
                h_aug,
                Mode::Eval,
            )?;
            let pred_aug = nsp_predict_node(&mut tape, z_aug, state.bank.as_deref().unwrap())?;
            let ss = self_supervised_loss(&mut tape, pred, pred_aug, cfg.stop_grad)?;
            terms.push((ss, cfg.lambda_s));
        }
    }
    let loss = tape.weighted_sum(&terms)?;
    let loss_value = tape.scalar(loss);
    let forward_finite = tape.values_finite();

    let rollback = |state: &mut AdaptState<'_>| -> Result<()> {
        restore(state.model, &model_snap)?;
        if let (Some(p), Some(s)) = (state.projector.as_deref_mut(), proj_snap.as_ref()) {
            restore(p, s)?;
        }
        if let (Some(b), Some(s)) = (state.bank.as_deref_mut(), bank_snap.as_ref()) {
            *b = s.clone();
        }
        *state.theta_star = anchor_snap.clone();
        Ok(())
    };

    if !forward_finite || !loss_value.is_finite() {
        rollback(state)?;
        return Ok(StepOutcome {
            predictions,
            mean_main_entropy,
            mean_nsp_entropy,
            loss: loss_value,
            applied: false,
        });
    }

    let grads = tape.backward(loss)?;
    state.model.accumulate_grads(&binding, &grads);
    let mut grads_ok = state.model.grads_finite();
    if cfg.mode.uses_nsp() && cfg.projector_finetune {
        let projector = state.projector.as_mut().unwrap();
        projector.zero_grads();
        projector.accumulate_grads(proj_binding.as_ref().unwrap(), &grads);
        grads_ok &= projector.grads_finite();
    }
    if !grads_ok {
        rollback(state)?;
        return Ok(StepOutcome {
            predictions,
            mean_main_entropy,
            mean_nsp_entropy,
            loss: loss_value,
            applied: false,
        });
    }

    if cfg.mode.uses_swr() {
        apply_update_with_swr(state.model, cfg.lr, penalty, state.theta_star, cfg.lambda_r)?;
    } else {
        state.model.apply_update(cfg.lr)?;
    }
    if cfg.mode.uses_nsp() && cfg.projector_finetune {
        state.projector.as_mut().unwrap().apply_update(cfg.lr)?;
    }

    if !state.model.params_finite()
        || state
            .projector
            .as_deref()
            .map(|p| !p.params_finite())
            .unwrap_or(false)
    {
        rollback(state)?;
        return Ok(StepOutcome {
            predictions,
            mean_main_entropy,
            mean_nsp_entropy,
            loss: loss_value,
            applied: false,
        });
    }

    if cfg.mode.uses_swr() {
        state.theta_star.advance(state.model)?;
    }
    if cfg.mode.uses_nsp() && cfg.test_time_ema {
        let z = z_node.unwrap();
        let d = tape.shape(z)[1];
        let z_data = tape.value(z).to_vec();
        let pred = nsp_pred.unwrap();
        let c = tape.shape(pred)[1];
        let pred_data = tape.value(pred).to_vec();
        let bank = state.bank.as_mut().unwrap();
        for i in 0..images.len() {
            let yhat = argmax(&pred_data[i * c..(i + 1) * c]);
            bank.ema_update(yhat, &z_data[i * d..(i + 1) * d])?;
        }
    }

    Ok(StepOutcome {
        predictions,
        mean_main_entropy,
        mean_nsp_entropy,
        loss: loss_value,
        applied: true,
    })
}

/// Recipe for materializing the evaluation stream(s) of a run.
///
/// Offline protocols (2–3 epochs) revisit the data; each epoch draws a
/// fresh single-pass stream from this recipe with an epoch-derived seed, so
/// the single-use stream contract holds while batches still reshuffle.
#[derive(Debug, Clone)]
pub struct StreamSpec<'a> {
    pub dataset: &'a LabeledDataset,
    pub corruption: CorruptionSpec,
    pub batch_size: usize,
    pub seed: u64,
}

impl StreamSpec<'_> {
    fn epoch_stream(&self, epoch: usize) -> Result<crate::data::TargetStream> {
        make_target_stream(
            self.dataset,
            &self.corruption,
            self.batch_size,
            derive_seed(self.seed, "epoch", epoch as u64),
        )
    }
}

/// Per-batch evaluation numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch_index: usize,
    pub n: usize,
    pub n_wrong: usize,
    pub mean_main_entropy: f64,
    pub mean_nsp_entropy: Option<f64>,
}

/// Everything a run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    /// The resolved settings the run actually used, in canonical order.
    pub config: Vec<(String, String)>,
    pub batches: Vec<BatchMetrics>,
    /// Wrong and total over the final epoch.
    pub final_wrong: usize,
    pub final_total: usize,
    pub aborted_steps: usize,
}

impl MetricsRecord {
    /// Error rate over the final epoch's predictions.
    pub fn error_rate(&self) -> f64 {
        if self.final_total == 0 {
            return f64::NAN;
        }
        self.final_wrong as f64 / self.final_total as f64
    }

    /// Short fingerprint of the resolved settings.
    pub fn config_hash(&self) -> String {
        config_fingerprint(&self.config)
    }

    /// Value of one echoed setting, if present.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Digest of key=value pairs, truncated to a short hex tag.
pub fn config_fingerprint(pairs: &[(String, String)]) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in pairs {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Runs the online protocol over one stream recipe.
///
/// Each epoch materializes a fresh stream and walks it batch by batch:
/// predict, account the error against revealed labels, then update. Every
/// example contributes exactly one prediction per epoch; the reported error
/// covers the final epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_online_evaluation(
    model: &mut Model,
    projector: Option<&mut Projector>,
    bank: Option<&mut PrototypeBank>,
    penalty: &PenaltyVector,
    cfg: &AdaptConfig,
    transform: &TransformSpec,
    spec: &StreamSpec<'_>,
    run_id: &str,
) -> Result<MetricsRecord> {
    cfg.validate()?;
    penalty.validate_for(model)?;
    let mut theta_star = ThetaStar::from_model(model, cfg.theta_star_policy);
    let mut state = AdaptState {
        model,
        theta_star: &mut theta_star,
        projector,
        bank,
    };

    let mut batches_out = Vec::new();
    let mut aborted_steps = 0;
    let mut final_wrong = 0;
    let mut final_total = 0;
    let mut global_index = 0usize;
    for epoch in 0..cfg.epochs {
        let mut stream = spec.epoch_stream(epoch)?;
        let batches = stream.take_batches()?;
        if epoch + 1 == cfg.epochs {
            final_wrong = 0;
            final_total = 0;
        }
        for batch in batches {
            let oracle;
            let oracle_ref = if cfg.mode == RunMode::SupervisedOracle {
                oracle = batch.labels.reveal_for_metrics().to_vec();
                Some(oracle.as_slice())
            } else {
                None
            };
            let step_seed = derive_seed(spec.seed, "step", global_index as u64);
            let outcome = tta_step(
                &mut state,
                penalty,
                &batch.images,
                oracle_ref,
                cfg,
                transform,
                step_seed,
            )?;
            if !outcome.applied && cfg.mode.updates() {
                aborted_steps += 1;
            }
            let truth = batch.labels.reveal_for_metrics();
            let n_wrong = outcome
                .predictions
                .iter()
                .zip(truth)
                .filter(|(p, t)| p != t)
                .count();
            if epoch + 1 == cfg.epochs {
                final_wrong += n_wrong;
                final_total += truth.len();
            }
            batches_out.push(BatchMetrics {
                epoch,
                batch_index: global_index,
                n: truth.len(),
                n_wrong,
                mean_main_entropy: outcome.mean_main_entropy,
                mean_nsp_entropy: outcome.mean_nsp_entropy,
            });
            global_index += 1;
        }
    }
    Ok(MetricsRecord {
        run_id: run_id.to_string(),
        mode: cfg.mode.name().to_string(),
        corruption: spec.corruption.kind.name().to_string(),
        severity: spec.corruption.severity,
        seed: spec.seed,
        config: cfg.canonical_pairs(),
        batches: batches_out,
        final_wrong,
        final_total,
        aborted_steps,
    })
}

/// Clones the source state and runs one configuration against one stream.
///
/// The shared source artifacts stay untouched, so a sweep can reuse them
/// across arbitrarily many runs.
pub fn run_with_fresh_state(
    source: &Model,
    projector: &Projector,
    bank: &PrototypeBank,
    penalty: &PenaltyVector,
    cfg: &AdaptConfig,
    transform: &TransformSpec,
    spec: &StreamSpec<'_>,
    run_id: &str,
) -> Result<MetricsRecord> {
    let mut model = source.clone();
    let mut proj = projector.clone();
    let mut bank = bank.clone();
    let (p, b) = if cfg.mode.uses_nsp() {
        (Some(&mut proj), Some(&mut bank))
    } else {
        (None, None)
    };
    run_online_evaluation(&mut model, p, b, penalty, cfg, transform, spec, run_id)
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: String,
    pub lr: f64,
    pub seed: u64,
    pub error: f64,
    pub aborted_steps: usize,
}

/// Runs every configuration against the same stream recipe (per seed) and
/// tabulates final errors.
pub fn ablation_matrix(
    source: &Model,
    projector: &Projector,
    bank: &PrototypeBank,
    penalty: &PenaltyVector,
    configs: &[AdaptConfig],
    transform: &TransformSpec,
    dataset: &LabeledDataset,
    corruption: CorruptionSpec,
    batch_size: usize,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        for &seed in seeds {
            let spec = StreamSpec {
                dataset,
                corruption,
                batch_size,
                seed,
            };
            let run_id = format!("{}-lr{}-s{}", cfg.mode.name(), cfg.lr, seed);
            let record =
                run_with_fresh_state(source, projector, bank, penalty, cfg, transform, &spec, &run_id)?;
            rows.push(AblationRow {
                mode: cfg.mode.name().to_string(),
                lr: cfg.lr,
                seed,
                error: record.error_rate(),
                aborted_steps: record.aborted_steps,
            });
        }
    }
    Ok(rows)
}

/// Source-training hyperparameters.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 5e-2,
            seed: 0,
        }
    }
}

/// Supervised source training: shuffled minibatch cross-entropy descent in
/// training mode (batch statistics, running buffers updated). Returns the
/// final clean training accuracy, measured in evaluation mode on running
/// statistics.
pub fn pretrain_source(
    model: &mut Model,
    dataset: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "source training dataset".into(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 || !(cfg.lr > 0.0) {
        return Err(Error::Config {
            detail: format!(
                "source training needs epochs >= 1, batch_size >= 2, lr > 0; got {} {} {}",
                cfg.epochs, cfg.batch_size, cfg.lr
            ),
        });
    }
    use rand::Rng;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-epoch", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Image> = chunk.iter().map(|&i| dataset.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let mut tape = Tape::new();
            let x = batch_leaf(&mut tape, &images)?;
            let binding = model.bind(&mut tape)?;
            let fwd = model.forward(&mut tape, &binding, x, Mode::Train)?;
            let probs = tape.softmax_rows(fwd.logits, 1.0)?;
            let loss = tape.cross_entropy_one_hot(probs, &labels)?;
            let grads = tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&binding, &grads);
            if !model.grads_finite() {
                return Err(Error::NonFinite {
                    context: format!("source training gradients at epoch {epoch}"),
                });
            }
            model.apply_update(cfg.lr)?;
            if !model.params_finite() {
                return Err(Error::NonFinite {
                    context: format!("source parameters at epoch {epoch}"),
                });
            }
        }
    }
    evaluate_clean_accuracy(model, dataset)
}

/// Accuracy of the model on a labeled set, evaluation mode with running
/// statistics, no state changes.
pub fn evaluate_clean_accuracy(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "evaluation dataset".into(),
        });
    }
    let mut probe = model.clone();
    probe.bn_mode = BnMode::Running;
    let mut correct = 0usize;
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
        let images: Vec<Image> = chunk.iter().map(|&i| dataset.images[i].clone()).collect();
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, &images)?;
        let binding = probe.bind(&mut tape)?;
        let fwd = probe.forward(&mut tape, &binding, x, Mode::Eval)?;
        let c = probe.num_classes;
        let logits = tape.value(fwd.logits);
        for (row, &i) in chunk.iter().enumerate() {
            if argmax(&logits[row * c..(row + 1) * c]) == dataset.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Grad-vector hook for probing which units a loss reaches: accumulates the
/// given loss into the model (and optionally projector), returning the flat
/// per-unit gradient snapshot. Used by tests and diagnostics.
pub fn grads_of_loss(
    model: &mut Model,
    binding: &crate::model::Binding,
    tape: &Tape,
    loss: NodeId,
) -> Result<crate::model::GradientSnapshot> {
    let grads = tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(binding, &grads);
    layer_grad_vectors(model)
}

/// Bit-exact equality of two snapshots, exposed for protocol tests.
pub fn snapshots_equal(a: &ParamSnapshot, b: &ParamSnapshot) -> bool {
    a == b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::small_cnn;
    use crate::nsp::{train_projector_and_prototypes, NspTrainConfig};
    use crate::swr::{compute_penalty_vector, SwrVariant};

    struct Fixture {
        model: Model,
        projector: Projector,
        bank: PrototypeBank,
        penalty: PenaltyVector,
        dataset: LabeledDataset,
        transform: TransformSpec,
    }

    fn fixture() -> Fixture {
        let dataset = generate_dataset(3, 12, 12, 100).unwrap();
        let mut model = small_cnn((3, 12, 12), (4, 4), 12, 3, 50);
        pretrain_source(
            &mut model,
            &dataset,
            &PretrainConfig {
                epochs: 4,
                batch_size: 12,
                lr: 5e-2,
                seed: 1,
            },
        )
        .unwrap();
        let transform = TransformSpec::probe_default();
        let penalty = compute_penalty_vector(
            &model,
            &dataset,
            &transform,
            8,
            2,
            &SwrVariant::default(),
        )
        .unwrap();
        let (projector, bank) = train_projector_and_prototypes(
            &model,
            &dataset,
            &transform,
            &NspTrainConfig {
                depth: 1,
                width: 8,
                epochs: 2,
                batch_size: 12,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        Fixture {
            model,
            projector,
            bank,
            penalty,
            dataset,
            transform,
        }
    }

    fn stream_batch(f: &Fixture, seed: u64) -> Vec<Image> {
        let corruption = CorruptionSpec::new(crate::data::CorruptionKind::GaussianNoise, 3).unwrap();
        let mut stream = make_target_stream(&f.dataset, &corruption, 8, seed).unwrap();
        stream.take_batches().unwrap().remove(0).images
    }

    #[test]
    fn main_loss_on_uniform_predictions_has_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![4, 5], vec![0.0; 20]).unwrap();
        let probs = tape.softmax_rows(logits, 1.0).unwrap();
        let loss = main_entropy_loss(&mut tape, probs, 0.2, 0.25).unwrap();
        let expect = -0.05 * (5.0f64).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn step_predictions_precede_the_update() {
        let mut f = fixture();
        let images = stream_batch(&f, 7);
        let frozen_predictions = {
            let mut frozen = f.model.clone();
            let mut anchor = ThetaStar::from_model(&frozen, ThetaStarPolicy::UpdatePrev);
            let mut state = AdaptState {
                model: &mut frozen,
                theta_star: &mut anchor,
                projector: None,
                bank: None,
            };
            let cfg = AdaptConfig {
                mode: RunMode::SourceOnly,
                ..Default::default()
            };
            tta_step(&mut state, &f.penalty, &images, None, &cfg, &f.transform, 0)
                .unwrap()
                .predictions
        };
        let mut anchor = ThetaStar::from_model(&f.model, ThetaStarPolicy::UpdatePrev);
        let mut state = AdaptState {
            model: &mut f.model,
            theta_star: &mut anchor,
            projector: Some(&mut f.projector),
            bank: Some(&mut f.bank),
        };
        let cfg = AdaptConfig {
            mode: RunMode::Full,
            lr: 1e-2,
            ..Default::default()
        };
        let out = tta_step(&mut state, &f.penalty, &images, None, &cfg, &f.transform, 0).unwrap();
        assert!(out.applied);
        assert_eq!(out.predictions, frozen_predictions);
        assert!(out.mean_nsp_entropy.is_some());
    }

    #[test]
    fn aux_loss_leaves_classifier_head_untouched() {
        let mut f = fixture();
        let images = stream_batch(&f, 8);
        f.model.bn_mode = BnMode::Batch;
        let mut tape = Tape::new();
        let x = batch_leaf(&mut tape, &images).unwrap();
        let binding = f.model.bind(&mut tape).unwrap();
        let fwd = f.model.forward(&mut tape, &binding, x, Mode::Eval).unwrap();
        let pbinding = f.projector.bind(&mut tape).unwrap();
        let z = f
            .projector
            .forward(&mut tape, &pbinding, fwd.representation, Mode::Eval)
            .unwrap();
        let pred = nsp_predict_node(&mut tape, z, &f.bank).unwrap();
        let loss = aux_entropy_loss(&mut tape, pred, 0.8, 0.25).unwrap();
        let snap = grads_of_loss(&mut f.model, &binding, &tape, loss).unwrap();
        let head = snap.units.iter().find(|u| u.name == "head").unwrap();
        assert!(head.flat.iter().all(|&g| g == 0.0));
        let encoder_active = snap
            .units
            .iter()
            .filter(|u| u.name != "head")
            .any(|u| u.flat.iter().any(|&g| g != 0.0));
        assert!(encoder_active);
    }

    #[test]
    fn poisoned_batch_rolls_back_bit_exactly() {
        let mut f = fixture();
        let mut images = stream_batch(&f, 9);
        for img in &mut images {
            for v in &mut img.data {
                *v = 1e308;
            }
        }
        let model_before = snapshot(&f.model);
        let proj_before = snapshot(&f.projector);
        let bank_before = f.bank.clone();
        let mut anchor = ThetaStar::from_model(&f.model, ThetaStarPolicy::UpdatePrev);
        let anchor_before = anchor.clone();
        let mut state = AdaptState {
            model: &mut f.model,
            theta_star: &mut anchor,
            projector: Some(&mut f.projector),
            bank: Some(&mut f.bank),
        };
        let cfg = AdaptConfig {
            mode: RunMode::Full,
            lr: 1e-2,
            test_time_ema: true,
            ..Default::default()
        };
        let out = tta_step(&mut state, &f.penalty, &images, None, &cfg, &f.transform, 1).unwrap();
        assert!(!out.applied);
        assert_eq!(out.predictions.len(), images.len());
        assert!(snapshots_equal(&snapshot(&f.model), &model_before));
        assert!(snapshots_equal(&snapshot(&f.projector), &proj_before));
        assert_eq!(f.bank, bank_before);
        assert_eq!(anchor, anchor_before);
    }

    #[test]
    fn extreme_tether_keeps_movement_negligible() {
        let mut f = fixture();
        let images = stream_batch(&f, 10);
        let before = snapshot(&f.model);
        let mut anchor = ThetaStar::from_model(&f.model, ThetaStarPolicy::UpdatePrev);
        let mut state = AdaptState {
            model: &mut f.model,
            theta_star: &mut anchor,
            projector: None,
            bank: None,
        };
        let cfg = AdaptConfig {
            mode: RunMode::MainSwr,
            lr: 1e-2,
            lambda_r: 1e9,
            ..Default::default()
        };
        // Uniform full-strength penalty: every unit pinned.
        let pinned = PenaltyVector {
            unit_names: f.penalty.unit_names.clone(),
            similarities: vec![1.0; f.penalty.len()],
            weights: vec![1.0; f.penalty.len()],
        };
        let out = tta_step(&mut state, &pinned, &images, None, &cfg, &f.transform, 2).unwrap();
        assert!(out.applied);
        restore_distance_below(&f.model, &before, 1e-6);
    }

    fn restore_distance_below(model: &Model, snap: &ParamSnapshot, bound: f64) {
        let mut probe = model.clone();
        restore(&mut probe, snap).unwrap();
        let mut max_move: f64 = 0.0;
        for (a, b) in model.units.iter().zip(&probe.units) {
            for (ta, tb) in a.params.iter().zip(&b.params) {
                for (va, vb) in ta.data.iter().zip(&tb.data) {
                    max_move = max_move.max((va - vb).abs());
                }
            }
        }
        assert!(max_move < bound, "movement {max_move} >= {bound}");
        assert!(max_move > 0.0);
    }

    #[test]
    fn oracle_labels_are_rejected_outside_oracle_mode() {
        let mut f = fixture();
        let images = stream_batch(&f, 11);
        let labels = vec![0usize; images.len()];
        let mut anchor = ThetaStar::from_model(&f.model, ThetaStarPolicy::UpdatePrev);
        let mut state = AdaptState {
            model: &mut f.model,
            theta_star: &mut anchor,
            projector: None,
            bank: None,
        };
        let cfg = AdaptConfig {
            mode: RunMode::MainOnly,
            ..Default::default()
        };
        assert!(tta_step(
            &mut state,
            &f.penalty,
            &images,
            Some(&labels),
            &cfg,
            &f.transform,
            0
        )
        .is_err());
        let cfg = AdaptConfig {
            mode: RunMode::SupervisedOracle,
            ..Default::default()
        };
        assert!(tta_step(&mut state, &f.penalty, &images, None, &cfg, &f.transform, 0).is_err());
        let out = tta_step(
            &mut state,
            &f.penalty,
            &images,
            Some(&labels),
            &cfg,
            &f.transform,
            0,
        )
        .unwrap();
        assert!(out.applied);
    }

    #[test]
    fn online_run_sees_every_example_once_per_epoch() {
        let f = fixture();
        let corruption =
            CorruptionSpec::new(crate::data::CorruptionKind::GaussianNoise, 2).unwrap();
        let spec = StreamSpec {
            dataset: &f.dataset,
            corruption,
            batch_size: 8,
            seed: 4,
        };
        let cfg = AdaptConfig {
            mode: RunMode::Full,
            lr: 1e-3,
            epochs: 2,
            ..Default::default()
        };
        let record = run_with_fresh_state(
            &f.model,
            &f.projector,
            &f.bank,
            &f.penalty,
            &cfg,
            &f.transform,
            &spec,
            "test-run",
        )
        .unwrap();
        for epoch in 0..2 {
            let n: usize = record
                .batches
                .iter()
                .filter(|b| b.epoch == epoch)
                .map(|b| b.n)
                .sum();
            assert_eq!(n, 36);
        }
        assert_eq!(record.final_total, 36);
        assert_eq!(record.mode, "full");
        assert!(record.error_rate() >= 0.0 && record.error_rate() <= 1.0);
    }

    #[test]
    fn runs_are_deterministic_given_seeds() {
        let f = fixture();
        let corruption =
            CorruptionSpec::new(crate::data::CorruptionKind::Contrast, 4).unwrap();
        let spec = StreamSpec {
            dataset: &f.dataset,
            corruption,
            batch_size: 8,
            seed: 6,
        };
        let cfg = AdaptConfig {
            mode: RunMode::Full,
            lr: 1e-3,
            ..Default::default()
        };
        let a = run_with_fresh_state(
            &f.model, &f.projector, &f.bank, &f.penalty, &cfg, &f.transform, &spec, "r",
        )
        .unwrap();
        let b = run_with_fresh_state(
            &f.model, &f.projector, &f.bank, &f.penalty, &cfg, &f.transform, &spec, "r",
        )
        .unwrap();
        assert_eq!(a, b);
        let spec2 = StreamSpec { seed: 7, ..spec };
        let c = run_with_fresh_state(
            &f.model, &f.projector, &f.bank, &f.penalty, &cfg, &f.transform, &spec2, "r",
        )
        .unwrap();
        assert_ne!(a.batches, c.batches);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = AdaptConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AdaptConfig::default();
        cfg.epochs = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = AdaptConfig::default();
        cfg.lambda_r = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AdaptConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let cfg = AdaptConfig {
            mode: RunMode::SourceOnly,
            lr: 0.0,
            ..Default::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn nsp_modes_require_nsp_state() {
        let mut f = fixture();
        let images = stream_batch(&f, 12);
        let mut anchor = ThetaStar::from_model(&f.model, ThetaStarPolicy::UpdatePrev);
        let mut state = AdaptState {
            model: &mut f.model,
            theta_star: &mut anchor,
            projector: None,
            bank: None,
        };
        let cfg = AdaptConfig {
            mode: RunMode::Full,
            ..Default::default()
        };
        assert!(tta_step(&mut state, &f.penalty, &images, None, &cfg, &f.transform, 0).is_err());
    }

    #[test]
    fn source_only_never_moves_parameters() {
        let f = fixture();
        let corruption =
            CorruptionSpec::new(crate::data::CorruptionKind::GaussianNoise, 5).unwrap();
        let spec = StreamSpec {
            dataset: &f.dataset,
            corruption,
            batch_size: 8,
            seed: 16,
        };
        let mut model = f.model.clone();
        model.bn_mode = BnMode::Running;
        let before = snapshot(&model);
        let cfg = AdaptConfig {
            mode: RunMode::SourceOnly,
            bn_mode: BnMode::Running,
            ..Default::default()
        };
        let record = run_online_evaluation(
            &mut model,
            None,
            None,
            &f.penalty,
            &cfg,
            &f.transform,
            &spec,
            "frozen",
        )
        .unwrap();
        assert!(snapshots_equal(&snapshot(&model), &before));
        assert_eq!(record.aborted_steps, 0);
    }
}
