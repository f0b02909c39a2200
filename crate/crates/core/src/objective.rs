//! Detection and segmentation cross-entropy losses, their weighted sum, the
//! batched loss-and-gradient pass, and a central-difference gradient checker.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Branch, Model, SampleTarget};
use crate::seed;
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_det) || !ok(self.lambda_seg) {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_det == 0.0 && self.lambda_seg == 0.0 {
            return Err(Error::Validation("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Which samples contribute to the segmentation loss and its normaliser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegSamples {
    /// Real images take part with an all-zero target mask.
    #[default]
    All,
    /// Only forged images; `N` counts forgeries in the batch.
    ForgeryOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_det: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_seg: Option<f64>,
    pub batch_size: usize,
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Compensated summation; keeps the loss value accurate enough for
/// finite-difference checks over thousands of pixels.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

fn is_binary<F: Scalar>(v: F) -> bool {
    v == F::zero() || v == F::one()
}

/// Pixel cross-entropy averaged over pixels and over the `n` maps stacked in
/// `s` and `m` (each of length `n·h·w`).
pub fn seg_loss<F: Scalar>(s: &[F], m: &[F], n: usize) -> Result<f64> {
    if s.len() != m.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, mask has {}",
            s.len(),
            m.len()
        )));
    }
    if n == 0 || s.len() % n != 0 || s.is_empty() {
        return Err(Error::Dimension(format!("{} pixels cannot form {n} maps", s.len())));
    }
    if let Some(bad) = m.iter().find(|v| !is_binary(**v)) {
        return Err(Error::Validation(format!("mask value {bad:?} is not 0 or 1")));
    }
    let hw = s.len() / n;
    let mut total = Neumaier::default();
    for (sk, mk) in s.chunks(hw).zip(m.chunks(hw)) {
        let mut per = Neumaier::default();
        for (sv, mv) in sk.iter().zip(mk) {
            let sc = clamp(sv.to_f64_lossy());
            let mf = mv.to_f64_lossy();
            per.add((1.0 - mf) * (1.0 - sc).ln() + mf * sc.ln());
        }
        total.add(per.sum() / hw as f64);
    }
    Ok(-total.sum() / n as f64)
}

/// Mean binary cross-entropy of forgery probabilities `p` against labels `y`.
pub fn det_loss<F: Scalar>(p: &[F], y: &[F]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    if let Some(bad) = y.iter().find(|v| !is_binary(**v)) {
        return Err(Error::Validation(format!("label {bad:?} is not 0 or 1")));
    }
    let mut total = Neumaier::default();
    for (pv, yv) in p.iter().zip(y) {
        let pc = clamp(pv.to_f64_lossy());
        let yf = yv.to_f64_lossy();
        total.add((1.0 - yf) * (1.0 - pc).ln() + yf * pc.ln());
    }
    Ok(-total.sum() / p.len() as f64)
}

pub fn total_loss(l_det: f64, l_seg: f64, weights: LossWeights) -> f64 {
    weights.lambda_det * l_det + weights.lambda_seg * l_seg
}

/// `∂ det_loss(σ(z), y) / ∂z = (σ(z) − y) / N`, away from the ε clamp.
pub fn det_loss_logit_grad(z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if z.len() != y.len() || z.is_empty() {
        return Err(Error::Dimension(format!("{} logits vs {} labels", z.len(), y.len())));
    }
    let n = z.len() as f64;
    Ok(z.iter().zip(y).map(|(z, y)| (sigmoid(*z) - y) / n).collect())
}

/// `∂ seg_loss(σ(z), m, n) / ∂z = (σ(z) − m) / (n·h·w)`, away from the ε clamp.
pub fn seg_loss_logit_grad(z: &[f64], m: &[f64], n: usize) -> Result<Vec<f64>> {
    if z.len() != m.len() || n == 0 || z.len() % n != 0 {
        return Err(Error::Dimension(format!("{} logits vs {} mask values for {n} samples", z.len(), m.len())));
    }
    let denom = z.len() as f64;
    Ok(z.iter().zip(m).map(|(z, m)| (sigmoid(*z) - m) / denom).collect())
}

/// One labelled training sample in model precision.
#[derive(Debug, Clone)]
pub struct TrainSample<F> {
    pub image: Tensor<F>,
    /// Row-major `h × w` binary mask.
    pub mask: Vec<F>,
    pub label: F,
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub detection: bool,
    pub segmentation: bool,
    pub seg_samples: SegSamples,
}

impl Objective {
    pub fn joint() -> Self {
        Self {
            weights: LossWeights::default(),
            detection: true,
            segmentation: true,
            seg_samples: SegSamples::All,
        }
    }
}

/// Loss report and summed parameter gradient of `objective` over `batch`.
///
/// Samples are processed independently (in parallel when enabled) and their
/// gradients are reduced in batch order, so the result does not depend on the
/// execution mode.
pub fn loss_and_grad<F: Scalar>(
    model: &Model<F>,
    batch: &[TrainSample<F>],
    objective: &Objective,
) -> Result<(LossReport, Vec<F>)> {
    objective.weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if objective.detection && !model.config.has(Branch::Detection) {
        return Err(Error::Capability("detection"));
    }
    if objective.segmentation && !model.config.has(Branch::Segmentation) {
        return Err(Error::Capability("segmentation"));
    }
    let n = batch.len();
    let seg_n = match objective.seg_samples {
        SegSamples::All => n,
        SegSamples::ForgeryOnly => batch.iter().filter(|s| s.label == F::one()).count(),
    };
    let det_scale = F::from_f64_lossy(objective.weights.lambda_det / n as f64);
    let seg_scale = F::from_f64_lossy(objective.weights.lambda_seg / seg_n.max(1) as f64);

    let per_sample = exec::map(batch, |s| {
        if !is_binary(s.label) {
            return Err(Error::Validation(format!("label {:?} is not 0 or 1", s.label)));
        }
        if s.mask.iter().any(|v| !is_binary(*v)) {
            return Err(Error::Validation("mask is not binary".into()));
        }
        let use_seg = objective.segmentation
            && (objective.seg_samples == SegSamples::All || s.label == F::one());
        let target = SampleTarget {
            det: objective.detection.then_some((s.label, det_scale)),
            seg: use_seg.then_some((s.mask.as_slice(), seg_scale)),
        };
        let mut grads = vec![F::zero(); model.param_count()];
        let loss = model.accumulate_sample(&s.image, target, &mut grads)?;
        Ok((loss, grads))
    });

    let mut grads = vec![F::zero(); model.param_count()];
    let mut det_sum = 0.0;
    let mut seg_sum = 0.0;
    for item in per_sample {
        let (loss, g) = item?;
        det_sum += loss.det.unwrap_or(0.0);
        seg_sum += loss.seg.unwrap_or(0.0);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a = *a + *b;
        }
    }
    let l_det = objective.detection.then(|| det_sum / n as f64);
    let l_seg = objective
        .segmentation
        .then(|| if seg_n == 0 { 0.0 } else { seg_sum / seg_n as f64 });
    let w = objective.weights;
    let l_total = total_loss(l_det.unwrap_or(0.0), l_seg.unwrap_or(0.0), LossWeights {
        lambda_det: if objective.detection { w.lambda_det } else { 0.0 },
        lambda_seg: if objective.segmentation { w.lambda_seg } else { 0.0 },
    });
    if !l_total.is_finite() {
        return Err(Error::Numerical(format!("loss is {l_total}")));
    }
    Ok((
        LossReport {
            l_total,
            l_det,
            l_seg,
            batch_size: n,
        },
        grads,
    ))
}

/// Same objective value computed from evaluation-mode logits and the public
/// loss functions, independent of the backward-pass code path.
pub fn objective_value(model: &Model<f64>, batch: &[TrainSample<f64>], objective: &Objective) -> Result<f64> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    let mut seg_n = 0;
    for s in batch {
        let (det, seg) = model.logits(&s.image)?;
        if objective.detection {
            let z = det.ok_or(Error::Capability("detection"))?;
            probs.push(1.0 / (1.0 + (-z).exp()));
            labels.push(s.label);
        }
        if objective.segmentation && (objective.seg_samples == SegSamples::All || s.label == 1.0) {
            let z = seg.ok_or(Error::Capability("segmentation"))?;
            maps.extend(z.iter().map(|v| 1.0 / (1.0 + (-v).exp())));
            masks.extend_from_slice(&s.mask);
            seg_n += 1;
        }
    }
    let l_det = if objective.detection { det_loss(&probs, &labels)? } else { 0.0 };
    let l_seg = if objective.segmentation && seg_n > 0 {
        seg_loss(&maps, &masks, seg_n)?
    } else {
        0.0
    };
    let w = objective.weights;
    Ok(if objective.detection { w.lambda_det * l_det } else { 0.0 }
        + if objective.segmentation { w.lambda_seg * l_seg } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: Vec<usize>,
    pub worst_coordinate: usize,
}

/// Relative error with a floor that keeps vanishing gradients from
/// dominating: `|a − n| / max(|a|, |n|, 1e-6)`. Below the floor this is an
/// absolute test, since a central difference at step 1e-5 cannot resolve
/// gradients much smaller than that in double precision.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss` on
/// `n_coords` randomly chosen coordinates (all of them if fewer exist).
///
/// Each coordinate is differenced at `step` and `step / 10` and keeps the
/// smaller error, so a ReLU kink inside one bracket does not register as a
/// wrong gradient.
pub fn grad_check<L>(
    loss: L,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    n_coords: usize,
    rng_seed: u64,
) -> Result<GradCheckReport>
where
    L: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension("parameter and gradient lengths differ".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let coords: Vec<usize> = if n_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut c = sample(&mut rng, params.len(), n_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut theta = params.to_vec();
    let mut worst = (0.0, 0);
    for &i in &coords {
        let orig = theta[i];
        let mut err = f64::INFINITY;
        for h in [step, step / 10.0] {
            theta[i] = orig + h;
            let fp = loss(&theta)?;
            theta[i] = orig - h;
            let fm = loss(&theta)?;
            theta[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!("loss not finite at coordinate {i}")));
            }
            err = err.min(rel_error(analytic[i], (fp - fm) / (2.0 * h)));
        }
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        coordinates: coords,
        worst_coordinate: worst.1,
    })
}

/// Gradient check of the full model objective with respect to `n_coords`
/// random parameters, in double precision.
pub fn grad_check_model(
    model: &Model<f64>,
    batch: &[TrainSample<f64>],
    objective: &Objective,
    step: f64,
    n_coords: usize,
    rng_seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(model, batch, objective)?;
    grad_check(
        |theta| {
            let mut m = model.clone();
            m.params.copy_from_slice(theta);
            objective_value(&m, batch, objective)
        },
        &model.params,
        &analytic,
        step,
        n_coords,
        rng_seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_closed_form() {
        let l = seg_loss(&[0.5f64], &[1.0], 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let d = det_loss(&[0.5f64], &[1.0]).unwrap();
        assert!((d - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictions_hit_the_eps_floor() {
        let m = [1.0f64, 0.0, 0.0, 1.0];
        assert!(seg_loss(&m, &m, 1).unwrap() <= 2e-7);
        assert!(det_loss(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap() <= 2e-7);
    }

    #[test]
    fn two_by_two_and_two_sample_examples() {
        let s = [0.9f64, 0.1, 0.2, 0.8];
        let m = [1.0f64, 0.0, 0.0, 1.0];
        let expect = -(0.9f64.ln() * 2.0 + 0.8f64.ln() * 2.0) / 4.0;
        assert!((seg_loss(&s, &m, 1).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.164252).abs() < 1e-6);

        let d = det_loss(&[0.8f64, 0.3], &[1.0, 0.0]).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((d - expect).abs() < 1e-12);
        assert!((d - 0.289909).abs() < 1e-6);
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        assert!(matches!(seg_loss(&[0.5f64], &[0.5], 1), Err(Error::Validation(_))));
        assert!(matches!(det_loss(&[0.5f64], &[2.0]), Err(Error::Validation(_))));
        assert!(matches!(det_loss(&[0.5f64, 0.2], &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn weighted_total() {
        assert_eq!(total_loss(0.5, 0.25, LossWeights::default()), 0.75);
        let no_seg = LossWeights { lambda_det: 1.0, lambda_seg: 0.0 };
        assert_eq!(total_loss(0.37, 0.91, no_seg), 0.37);
        let no_det = LossWeights { lambda_det: 0.0, lambda_seg: 1.0 };
        assert_eq!(total_loss(0.37, 0.91, no_det), 0.91);
        assert!(LossWeights { lambda_det: 0.0, lambda_seg: 0.0 }.validate().is_err());
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let r = grad_check(|t| Ok(t[0] * t[0]), &[1.0], &[2.0], 0.0, 1, 0);
        assert!(matches!(r, Err(Error::Validation(_))));
        let ok = grad_check(|t| Ok(t[0] * t[0]), &[1.0], &[2.0], 1e-5, 1, 0).unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let nan = grad_check(|_| Ok(f64::NAN), &[1.0], &[2.0], 1e-5, 1, 0);
        assert!(matches!(nan, Err(Error::Numerical(_))));
    }
}
