//! Shift-agnostic weight regularization.
//!
//! Before deployment, each parametric unit is probed for how much its
//! gradients care about input appearance: for `n` labeled source examples,
//! the cross-entropy gradient of the unit is computed on the example and on
//! an augmented copy, and the two are compared by cosine similarity. Units
//! whose gradients barely move under augmentation are shift-agnostic; they
//! carry label information rather than appearance information and should be
//! protected during test-time adaptation.
//!
//! The per-unit similarities are min-max rescaled to `[0, 1]` and squared
//! (by default), giving a penalty weight `w_l` per unit. During adaptation
//! the weight scales a quadratic tether `λ_r · w_l · ‖θ_l − θ*_l‖²` toward
//! an anchor `θ*` (the previous step's parameters, or the frozen source
//! ones). The tether is folded into the update in closed form, so arbitrarily
//! large `λ_r` damps movement to zero instead of destabilizing the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_transform, batch_leaf, LabeledDataset, TransformSpec};
use crate::graph::Tape;
use crate::model::{layer_grad_vectors, BnMode, Mode, Model, ParamContainer};
use crate::tensor::{cosine_similarity, minmax_rescale};
use crate::{derive_seed, Error, Result};

/// Hand-specified penalty profile overriding the probing procedure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManualCurve {
    /// Same weight on every parametric unit.
    Constant(f64),
    /// Weight rises linearly from 0 on the first parametric unit to 1 on
    /// the last.
    LinearRamp,
    /// Weight 0 on feature-extractor units, 1 on classifier units.
    Step,
}

/// Shape options for the penalty curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwrVariant {
    /// Power applied to the rescaled similarity, `1..=3`.
    pub exponent: u32,
    /// Replace each weight by `1 − w` after the exponent.
    pub flip_vertical: bool,
    /// Reverse the weights across the unit order.
    pub flip_horizontal: bool,
    /// When set, skip probing entirely and use this profile.
    pub manual: Option<ManualCurve>,
}

impl Default for SwrVariant {
    fn default() -> Self {
        SwrVariant {
            exponent: 2,
            flip_vertical: false,
            flip_horizontal: false,
            manual: None,
        }
    }
}

impl SwrVariant {
    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.exponent) {
            return Err(Error::invalid(format!(
                "penalty exponent must be 1..=3, got {}",
                self.exponent
            )));
        }
        if let Some(ManualCurve::Constant(c)) = self.manual {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!(
                    "constant penalty must lie in [0, 1], got {c}"
                )));
            }
        }
        if self.manual.is_some() && (self.flip_vertical || self.flip_horizontal) {
            return Err(Error::invalid(
                "manual penalty curves cannot be combined with flips",
            ));
        }
        Ok(())
    }
}

/// Per-parametric-unit penalty weights with their raw similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyVector {
    pub unit_names: Vec<String>,
    /// Mean gradient cosine similarity per unit, before rescaling.
    pub similarities: Vec<f64>,
    /// Final weights in `[0, 1]`, aligned with `unit_names`.
    pub weights: Vec<f64>,
}

impl PenaltyVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Checks alignment against a model's parametric units.
    pub fn validate_for(&self, model: &Model) -> Result<()> {
        let names = model.parametric_unit_names();
        if names != self.unit_names {
            return Err(Error::LayoutMismatch {
                context: format!(
                    "penalty units {:?} vs model units {:?}",
                    self.unit_names, names
                ),
            });
        }
        if self.weights.len() != names.len() || self.similarities.len() != names.len() {
            return Err(Error::LayoutMismatch {
                context: "penalty vector lengths disagree".into(),
            });
        }
        Ok(())
    }
}

fn weights_from_similarities(s: &[f64], variant: &SwrVariant) -> Vec<f64> {
    let base = minmax_rescale(s);
    let mut w: Vec<f64> = base
        .iter()
        .map(|&b| b.powi(variant.exponent as i32))
        .collect();
    if variant.flip_vertical {
        for v in &mut w {
            *v = 1.0 - *v;
        }
    }
    if variant.flip_horizontal {
        w.reverse();
    }
    w
}

fn manual_weights(curve: ManualCurve, model: &Model) -> Vec<f64> {
    let indices = model.parametric_unit_indices();
    let count = indices.len();
    match curve {
        ManualCurve::Constant(c) => vec![c; count],
        ManualCurve::LinearRamp => (0..count)
            .map(|l| {
                if count > 1 {
                    l as f64 / (count - 1) as f64
                } else {
                    1.0
                }
            })
            .collect(),
        ManualCurve::Step => indices
            .iter()
            .map(|&i| if model.is_encoder_unit(i) { 0.0 } else { 1.0 })
            .collect(),
    }
}

fn single_example_grads(
    model: &mut Model,
    img: &crate::data::Image,
    label: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = batch_leaf(&mut tape, std::slice::from_ref(img))?;
    let binding = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &binding, x, Mode::Eval)?;
    let p = tape.softmax_rows(out.logits, 1.0)?;
    let loss = tape.cross_entropy_one_hot(p, &[label])?;
    let grads = tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&binding, &grads);
    Ok(layer_grad_vectors(model)?
        .units
        .into_iter()
        .map(|u| u.flat)
        .collect())
}

/// Probes gradient stability under augmentation and builds the penalty.
///
/// The model is cloned internally; the caller's model, including its
/// running statistics and gradient accumulators, is never touched. Probing
/// runs in evaluation mode on the clone's running statistics, one example
/// per pass, with examples drawn uniformly from the dataset. With a manual
/// curve in the variant, probing is skipped and the similarities are set
/// equal to the requested weights.
pub fn compute_penalty_vector(
    model: &Model,
    dataset: &LabeledDataset,
    transform: &TransformSpec,
    n_samples: usize,
    seed: u64,
    variant: &SwrVariant,
) -> Result<PenaltyVector> {
    variant.validate()?;
    let unit_names = model.parametric_unit_names();
    if unit_names.is_empty() {
        return Err(Error::invalid("model has no parametric units"));
    }
    if let Some(curve) = variant.manual {
        let weights = manual_weights(curve, model);
        return Ok(PenaltyVector {
            unit_names,
            similarities: weights.clone(),
            weights,
        });
    }
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "penalty probing dataset".into(),
        });
    }
    if n_samples == 0 {
        return Err(Error::invalid("penalty probing needs at least one sample"));
    }

    let mut probe = model.clone();
    probe.bn_mode = BnMode::Running;
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, "swr-pick", 0));
    let mut sums = vec![0.0; unit_names.len()];
    for i in 0..n_samples {
        let idx = pick.gen_range(0..dataset.len());
        let img = &dataset.images[idx];
        let label = dataset.labels[idx];
        let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "swr-transform", i as u64));
        let aug = apply_transform(img, transform, &mut trng);
        let g = single_example_grads(&mut probe, img, label)?;
        let g_aug = single_example_grads(&mut probe, &aug, label)?;
        for (l, (a, b)) in g.iter().zip(&g_aug).enumerate() {
            sums[l] += cosine_similarity(a, b);
        }
    }
    let similarities: Vec<f64> = sums.iter().map(|s| s / n_samples as f64).collect();
    let weights = weights_from_similarities(&similarities, variant);
    Ok(PenaltyVector {
        unit_names,
        similarities,
        weights,
    })
}

/// Anchor policy for the quadratic tether.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaStarPolicy {
    /// Re-anchor to the parameters after every applied step.
    UpdatePrev,
    /// Keep the source parameters as the anchor forever.
    FrozenSource,
}

/// Tether anchor: a copy of every parameter tensor, aligned with the
/// model's unit list (empty rows for activation units).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaStar {
    pub policy: ThetaStarPolicy,
    tensors: Vec<Vec<Vec<f64>>>,
}

impl ThetaStar {
    /// Snapshots the model's current parameters as the anchor.
    pub fn from_model(model: &Model, policy: ThetaStarPolicy) -> Self {
        ThetaStar {
            policy,
            tensors: model
                .units
                .iter()
                .map(|u| u.params.iter().map(|t| t.data.clone()).collect())
                .collect(),
        }
    }

    /// Re-anchors after an applied step when the policy asks for it.
    pub fn advance(&mut self, model: &Model) -> Result<()> {
        if self.policy == ThetaStarPolicy::FrozenSource {
            return Ok(());
        }
        self.check_alignment(model)?;
        for (row, u) in self.tensors.iter_mut().zip(&model.units) {
            for (t, p) in row.iter_mut().zip(&u.params) {
                t.copy_from_slice(&p.data);
            }
        }
        Ok(())
    }

    /// Anchor tensors of unit `idx`.
    pub fn unit(&self, idx: usize) -> &[Vec<f64>] {
        &self.tensors[idx]
    }

    fn check_alignment(&self, model: &Model) -> Result<()> {
        let ok = self.tensors.len() == model.units.len()
            && self
                .tensors
                .iter()
                .zip(&model.units)
                .all(|(row, u)| {
                    row.len() == u.params.len()
                        && row.iter().zip(&u.params).all(|(t, p)| t.len() == p.len())
                });
        if ok {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                context: "anchor does not match model layout".into(),
            })
        }
    }
}

/// Evaluates the tether loss `λ_r · Σ_l w_l · ‖θ_l − θ*_l‖²` without
/// touching gradient accumulators.
pub fn swr_regularization_value(
    model: &Model,
    theta_star: &ThetaStar,
    penalty: &PenaltyVector,
    lambda_r: f64,
) -> Result<f64> {
    penalty.validate_for(model)?;
    theta_star.check_alignment(model)?;
    let mut value = 0.0;
    for (l, &ui) in model.parametric_unit_indices().iter().enumerate() {
        let w = penalty.weights[l];
        let anchor = theta_star.unit(ui);
        let mut sq = 0.0;
        for (p, a) in model.units[ui].params.iter().zip(anchor) {
            for (pv, av) in p.data.iter().zip(a) {
                let d = pv - av;
                sq += d * d;
            }
        }
        value += w * sq;
    }
    Ok(lambda_r * value)
}

/// Evaluates the tether loss and adds its analytic gradient,
/// `2 · λ_r · w_l · (θ_l − θ*_l)` per unit, into the model's accumulators.
pub fn swr_regularization(
    model: &mut Model,
    theta_star: &ThetaStar,
    penalty: &PenaltyVector,
    lambda_r: f64,
) -> Result<f64> {
    let value = swr_regularization_value(model, theta_star, penalty, lambda_r)?;
    let indices = model.parametric_unit_indices();
    for (l, &ui) in indices.iter().enumerate() {
        let w = penalty.weights[l];
        let anchor: Vec<Vec<f64>> = theta_star.unit(ui).to_vec();
        let unit = &mut model.units[ui];
        if unit.grads.is_none() {
            unit.grads = Some(
                unit.params
                    .iter()
                    .map(|t| crate::tensor::Tensor::zeros(t.shape.clone()))
                    .collect(),
            );
        }
        let gs = unit.grads.as_mut().unwrap();
        for ((g, p), a) in gs.iter_mut().zip(&unit.params).zip(&anchor) {
            for ((gv, pv), av) in g.data.iter_mut().zip(&p.data).zip(a) {
                *gv += 2.0 * lambda_r * w * (pv - av);
            }
        }
    }
    Ok(value)
}

/// Gradient step with the tether folded in exactly.
///
/// Per parametric unit `l` with `κ = 2 · lr · λ_r · w_l`, the new
/// parameters minimize `lr·(g·θ) + ½‖θ − θ_old‖² + ½κ‖θ − θ*‖²`, giving
/// `θ ← (θ_old − lr·g + κ·θ*) / (1 + κ)`. At `λ_r = 0` this is exactly the
/// plain step `θ − lr·g`; as `λ_r → ∞` the update pins parameters to the
/// anchor, so even extreme penalties slow units down instead of blowing
/// them up.
pub fn apply_update_with_swr(
    model: &mut Model,
    lr: f64,
    penalty: &PenaltyVector,
    theta_star: &ThetaStar,
    lambda_r: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if lambda_r < 0.0 {
        return Err(Error::invalid(format!(
            "tether strength must be non-negative, got {lambda_r}"
        )));
    }
    penalty.validate_for(model)?;
    theta_star.check_alignment(model)?;
    for (l, &ui) in model.parametric_unit_indices().iter().enumerate() {
        let kappa = 2.0 * lr * lambda_r * penalty.weights[l];
        let anchor: Vec<Vec<f64>> = theta_star.unit(ui).to_vec();
        let unit = &mut model.units[ui];
        let name = unit.name.clone();
        let gs = unit.grads.as_ref().ok_or(Error::MissingGrads { unit: name })?;
        let grad_data: Vec<Vec<f64>> = gs.iter().map(|g| g.data.clone()).collect();
        for ((p, g), a) in unit.params.iter_mut().zip(&grad_data).zip(&anchor) {
            for ((pv, gv), av) in p.data.iter_mut().zip(g).zip(a) {
                if kappa == 0.0 {
                    *pv -= lr * gv;
                } else {
                    *pv = (*pv - lr * gv + kappa * av) / (1.0 + kappa);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::{mlp, small_cnn, numeric_gradient_check, snapshot, Pass};

    fn probe_setup() -> (Model, LabeledDataset) {
        let model = small_cnn((3, 12, 12), (4, 4), 12, 3, 5);
        let ds = generate_dataset(3, 6, 12, 20).unwrap();
        (model, ds)
    }

    #[test]
    fn penalty_has_unit_range_and_alignment() {
        let (model, ds) = probe_setup();
        let p = compute_penalty_vector(
            &model,
            &ds,
            &TransformSpec::probe_default(),
            16,
            1,
            &SwrVariant::default(),
        )
        .unwrap();
        assert_eq!(p.unit_names, model.parametric_unit_names());
        assert_eq!(p.len(), 6);
        assert!(p.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert!(p.weights.iter().any(|&w| w == 0.0));
        assert!(p.weights.iter().any(|&w| w == 1.0));
        p.validate_for(&model).unwrap();
    }

    #[test]
    fn identity_transform_gives_all_ones() {
        let (model, ds) = probe_setup();
        let p = compute_penalty_vector(
            &model,
            &ds,
            &TransformSpec::identity(),
            8,
            2,
            &SwrVariant::default(),
        )
        .unwrap();
        assert!(p.weights.iter().all(|&w| w == 1.0));
        assert!(p.similarities.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn probing_is_deterministic_and_leaves_model_untouched() {
        let (model, ds) = probe_setup();
        let before = snapshot(&model);
        let t = TransformSpec::probe_default();
        let a = compute_penalty_vector(&model, &ds, &t, 12, 3, &SwrVariant::default()).unwrap();
        let b = compute_penalty_vector(&model, &ds, &t, 12, 3, &SwrVariant::default()).unwrap();
        let c = compute_penalty_vector(&model, &ds, &t, 12, 4, &SwrVariant::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.similarities, c.similarities);
        assert_eq!(snapshot(&model), before);
        assert!(model.units.iter().all(|u| u.grads.is_none()));
    }

    #[test]
    fn exponent_shrinks_interior_weights() {
        let s = vec![0.1, 0.9, 0.5, 0.3];
        let w1 = weights_from_similarities(&s, &SwrVariant { exponent: 1, ..Default::default() });
        let w2 = weights_from_similarities(&s, &SwrVariant { exponent: 2, ..Default::default() });
        let w3 = weights_from_similarities(&s, &SwrVariant { exponent: 3, ..Default::default() });
        for i in 0..s.len() {
            assert!(w2[i] <= w1[i] + 1e-15);
            assert!(w3[i] <= w2[i] + 1e-15);
        }
        assert_eq!(w1[0], 0.0);
        assert_eq!(w1[1], 1.0);
    }

    #[test]
    fn flips_mirror_the_curve() {
        let s = vec![0.0, 0.25, 1.0];
        let base = weights_from_similarities(&s, &SwrVariant::default());
        let v = weights_from_similarities(
            &s,
            &SwrVariant {
                flip_vertical: true,
                ..Default::default()
            },
        );
        for (b, f) in base.iter().zip(&v) {
            assert!((f - (1.0 - b)).abs() < 1e-15);
        }
        let h = weights_from_similarities(
            &s,
            &SwrVariant {
                flip_horizontal: true,
                ..Default::default()
            },
        );
        let mut rev = base.clone();
        rev.reverse();
        assert_eq!(h, rev);
    }

    #[test]
    fn manual_curves_override_probing() {
        let (model, ds) = probe_setup();
        let t = TransformSpec::probe_default();
        let constant = SwrVariant {
            manual: Some(ManualCurve::Constant(0.25)),
            ..Default::default()
        };
        let p = compute_penalty_vector(&model, &ds, &t, 4, 0, &constant).unwrap();
        assert!(p.weights.iter().all(|&w| w == 0.25));

        let ramp = SwrVariant {
            manual: Some(ManualCurve::LinearRamp),
            ..Default::default()
        };
        let p = compute_penalty_vector(&model, &ds, &t, 4, 0, &ramp).unwrap();
        assert_eq!(p.weights[0], 0.0);
        assert_eq!(*p.weights.last().unwrap(), 1.0);
        assert!(p.weights.windows(2).all(|w| w[1] > w[0]));

        let step = SwrVariant {
            manual: Some(ManualCurve::Step),
            ..Default::default()
        };
        let p = compute_penalty_vector(&model, &ds, &t, 4, 0, &step).unwrap();
        // conv1, bn1, conv2, bn2, fc1 sit in the encoder; head does not.
        assert_eq!(p.weights, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let bad = SwrVariant {
            manual: Some(ManualCurve::Constant(0.5)),
            flip_vertical: true,
            ..Default::default()
        };
        assert!(compute_penalty_vector(&model, &ds, &t, 4, 0, &bad).is_err());
        let bad = SwrVariant {
            exponent: 4,
            ..Default::default()
        };
        assert!(compute_penalty_vector(&model, &ds, &t, 4, 0, &bad).is_err());
    }

    fn uniform_penalty(model: &Model, w: f64) -> PenaltyVector {
        let names = model.parametric_unit_names();
        PenaltyVector {
            similarities: vec![w; names.len()],
            weights: vec![w; names.len()],
            unit_names: names,
        }
    }

    #[test]
    fn regularization_value_matches_hand_sum() {
        let mut model = mlp((1, 1, 2), (2, 2), 2, 9);
        let anchor = ThetaStar::from_model(&model, ThetaStarPolicy::FrozenSource);
        let penalty = uniform_penalty(&model, 0.5);
        assert_eq!(
            swr_regularization_value(&model, &anchor, &penalty, 250.0).unwrap(),
            0.0
        );
        model.units[0].params[0].data[0] += 0.1;
        model.units[2].params[1].data[1] -= 0.2;
        let v = swr_regularization_value(&model, &anchor, &penalty, 250.0).unwrap();
        let expect = 250.0 * 0.5 * (0.1f64 * 0.1 + 0.2 * 0.2);
        assert!((v - expect).abs() < 1e-12);
        let v0 = swr_regularization_value(&model, &anchor, &penalty, 0.0).unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn regularization_gradient_passes_numeric_check() {
        let mut model = mlp((1, 1, 2), (3, 2), 2, 11);
        let mut shifted = model.clone();
        for u in &mut shifted.units {
            for t in &mut u.params {
                for v in &mut t.data {
                    *v += 0.05;
                }
            }
        }
        let anchor = ThetaStar::from_model(&shifted, ThetaStarPolicy::FrozenSource);
        let penalty = uniform_penalty(&model, 0.7);
        let report = numeric_gradient_check(
            &mut model,
            &mut |m: &mut Model, pass| match pass {
                Pass::Value => swr_regularization_value(m, &anchor, &penalty, 3.0),
                Pass::Grad => swr_regularization(m, &anchor, &penalty, 3.0),
            },
            1e-4,
            60,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{}", report.worst);
    }

    #[test]
    fn zero_tether_reduces_to_plain_sgd_bitwise() {
        let mut a = mlp((1, 1, 2), (3, 2), 2, 13);
        let mut b = a.clone();
        a.zero_grads();
        b.zero_grads();
        for u in [&mut a, &mut b] {
            for unit in u.units_mut() {
                if let Some(gs) = &mut unit.grads {
                    for (i, g) in gs.iter_mut().enumerate() {
                        for (j, v) in g.data.iter_mut().enumerate() {
                            *v = ((i + 1) * (j + 1)) as f64 * 0.01;
                        }
                    }
                }
            }
        }
        let anchor = ThetaStar::from_model(&a, ThetaStarPolicy::UpdatePrev);
        let penalty = uniform_penalty(&a, 1.0);
        a.apply_update(0.05).unwrap();
        apply_update_with_swr(&mut b, 0.05, &penalty, &anchor, 0.0).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));
    }

    #[test]
    fn extreme_tether_freezes_parameters() {
        let mut model = mlp((1, 1, 2), (3, 2), 2, 17);
        let anchor = ThetaStar::from_model(&model, ThetaStarPolicy::UpdatePrev);
        let penalty = uniform_penalty(&model, 1.0);
        model.zero_grads();
        for unit in model.units_mut() {
            if let Some(gs) = &mut unit.grads {
                for g in gs.iter_mut() {
                    for v in &mut g.data {
                        *v = 5.0;
                    }
                }
            }
        }
        apply_update_with_swr(&mut model, 1e-3, &penalty, &anchor, 1e9).unwrap();
        let mut max_move: f64 = 0.0;
        for (u, unit) in model.units.iter().enumerate() {
            for (p, t) in unit.params.iter().enumerate() {
                for (k, &v) in t.data.iter().enumerate() {
                    max_move = max_move.max((v - anchor.unit(u)[p][k]).abs());
                }
            }
        }
        assert!(max_move < 1e-6, "max movement {max_move}");
        assert!(max_move > 0.0);
    }

    #[test]
    fn anchor_policies_advance_differently() {
        let mut model = mlp((1, 1, 2), (3, 2), 2, 19);
        let mut frozen = ThetaStar::from_model(&model, ThetaStarPolicy::FrozenSource);
        let mut rolling = ThetaStar::from_model(&model, ThetaStarPolicy::UpdatePrev);
        let source = frozen.clone();
        model.units[0].params[0].data[0] += 1.0;
        frozen.advance(&model).unwrap();
        rolling.advance(&model).unwrap();
        assert_eq!(frozen.tensors, source.tensors);
        assert!((rolling.unit(0)[0][0] - model.units[0].params[0].data[0]).abs() < 1e-15);
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let model = mlp((1, 1, 2), (3, 2), 2, 23);
        let other = small_cnn((3, 8, 8), (4, 4), 8, 2, 23);
        let penalty = uniform_penalty(&other, 1.0);
        assert!(penalty.validate_for(&model).is_err());
        let anchor = ThetaStar::from_model(&other, ThetaStarPolicy::UpdatePrev);
        assert!(anchor.check_alignment(&model).is_err());
    }
}
