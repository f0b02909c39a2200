//! The shared-encoder network with a detection head and a segmentation decoder.
//!
//! `F(I) = {p, S}`: one encoder produces a spatial feature map; the detection
//! head pools it globally and maps it to a forgery probability `p`, and the
//! de-convolution decoder upsamples it back to input resolution and squashes
//! every pixel to a manipulation probability `S`. There are no
//! encoder→decoder skip connections.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{self, ConvGeom, Op, ParamAlloc};
use crate::seed;
use crate::tensor::{sigmoid, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Depthwise-separable residual encoder.
    XcepStyle,
    /// Strided plain convolutions, a U-Net contracting path without skips.
    PlainConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Detection,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// `[height, width, channels]`.
    pub input_size: [usize; 3],
    /// Number of ×2 upsampling blocks; the encoder downsamples as many times.
    pub decoder_stages: usize,
    /// Width of the first encoder stage; doubles each stage.
    pub feature_channels: usize,
    pub branches: Vec<Branch>,
    pub head_hidden: usize,
    pub norm_groups: usize,
    /// Extra stride-1 residual blocks after the last xcep-style stage.
    pub middle_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_kind: EncoderKind::XcepStyle,
            input_size: [256, 256, 3],
            decoder_stages: 4,
            feature_channels: 16,
            branches: vec![Branch::Detection, Branch::Segmentation],
            head_hidden: 64,
            norm_groups: 4,
            middle_blocks: 1,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, branch: Branch) -> bool {
        self.branches.contains(&branch)
    }

    pub fn height(&self) -> usize {
        self.input_size[0]
    }

    pub fn width(&self) -> usize {
        self.input_size[1]
    }

    pub fn channels(&self) -> usize {
        self.input_size[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Validation("model needs at least one branch".into()));
        }
        let [h, w, c] = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Validation(format!("input size {h}x{w}x{c} has a zero extent")));
        }
        if self.decoder_stages == 0 || self.decoder_stages > 16 {
            return Err(Error::Validation(format!(
                "decoder_stages must be in 1..=16, got {}",
                self.decoder_stages
            )));
        }
        let factor = 1usize << self.decoder_stages;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Validation(format!(
                "{} decoder stages cannot reach input resolution {h}x{w}: both sides must be multiples of {factor}",
                self.decoder_stages
            )));
        }
        if self.feature_channels == 0 || self.head_hidden == 0 || self.norm_groups == 0 {
            return Err(Error::Validation(
                "feature_channels, head_hidden and norm_groups must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn stage_channels(&self) -> Vec<usize> {
        (0..self.decoder_stages)
            .map(|i| self.feature_channels << i.min(4))
            .collect()
    }
}

/// Layer layout and parameter ranges of a built model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: Vec<Op>,
    pub head: Vec<Op>,
    pub decoder: Vec<Op>,
    pub encoder_params: Range<usize>,
    pub head_params: Range<usize>,
    pub decoder_params: Range<usize>,
    pub feature_shape: (usize, usize, usize),
}

impl Architecture {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let g = config.norm_groups;
        let mut alloc = ParamAlloc::default();
        let chans = config.stage_channels();
        let mut encoder = Vec::new();
        let mut cin = config.channels();
        match config.encoder_kind {
            EncoderKind::PlainConv => {
                for &ch in &chans {
                    encoder.push(alloc.conv(ConvGeom { cin, cout: ch, kernel: 3, stride: 2, pad: 1 }));
                    encoder.push(alloc.norm(ch, g));
                    encoder.push(Op::Relu);
                    encoder.push(alloc.conv(ConvGeom { cin: ch, cout: ch, kernel: 3, stride: 1, pad: 1 }));
                    encoder.push(alloc.norm(ch, g));
                    encoder.push(Op::Relu);
                    cin = ch;
                }
            }
            EncoderKind::XcepStyle => {
                let stem = config.feature_channels;
                encoder.push(alloc.conv(ConvGeom { cin, cout: stem, kernel: 3, stride: 1, pad: 1 }));
                encoder.push(alloc.norm(stem, g));
                encoder.push(Op::Relu);
                cin = stem;
                for &ch in &chans {
                    let body = vec![
                        alloc.depthwise(cin, 3, 2, 1),
                        alloc.conv(ConvGeom { cin, cout: ch, kernel: 1, stride: 1, pad: 0 }),
                        alloc.norm(ch, g),
                        Op::Relu,
                        alloc.depthwise(ch, 3, 1, 1),
                        alloc.conv(ConvGeom { cin: ch, cout: ch, kernel: 1, stride: 1, pad: 0 }),
                        alloc.norm(ch, g),
                    ];
                    let shortcut = vec![
                        alloc.conv(ConvGeom { cin, cout: ch, kernel: 1, stride: 2, pad: 0 }),
                        alloc.norm(ch, g),
                    ];
                    encoder.push(Op::Residual { body, shortcut });
                    encoder.push(Op::Relu);
                    cin = ch;
                }
                for _ in 0..config.middle_blocks {
                    let body = vec![
                        alloc.depthwise(cin, 3, 1, 1),
                        alloc.conv(ConvGeom { cin, cout: cin, kernel: 1, stride: 1, pad: 0 }),
                        alloc.norm(cin, g),
                        Op::Relu,
                        alloc.depthwise(cin, 3, 1, 1),
                        alloc.conv(ConvGeom { cin, cout: cin, kernel: 1, stride: 1, pad: 0 }),
                        alloc.norm(cin, g),
                    ];
                    encoder.push(Op::Residual { body, shortcut: Vec::new() });
                    encoder.push(Op::Relu);
                }
            }
        }
        let encoder_params = 0..alloc.position();
        let in_shape = (config.channels(), config.height(), config.width());
        let feature_shape = nn::seq_out_shape(&encoder, in_shape)
            .ok_or_else(|| Error::Validation("encoder cannot process the input size".into()))?;

        let head_start = alloc.position();
        let head = if config.has(Branch::Detection) {
            vec![
                Op::GlobalAvgPool,
                alloc.linear(feature_shape.0, config.head_hidden),
                Op::Relu,
                alloc.linear(config.head_hidden, 1),
            ]
        } else {
            Vec::new()
        };
        let head_params = head_start..alloc.position();

        let dec_start = alloc.position();
        let decoder = if config.has(Branch::Segmentation) {
            let mut ops = Vec::new();
            let mut c = feature_shape.0;
            for _ in 0..config.decoder_stages {
                let cout = (c / 2).max(4);
                ops.push(alloc.deconv(ConvGeom { cin: c, cout, kernel: 4, stride: 2, pad: 1 }));
                ops.push(alloc.norm(cout, g));
                ops.push(Op::Relu);
                c = cout;
            }
            ops.push(alloc.conv(ConvGeom { cin: c, cout: 1, kernel: 3, stride: 1, pad: 1 }));
            ops
        } else {
            Vec::new()
        };
        let decoder_params = dec_start..alloc.position();
        if !decoder.is_empty() {
            let out = nn::seq_out_shape(&decoder, feature_shape);
            if out != Some((1, config.height(), config.width())) {
                return Err(Error::Validation(format!(
                    "decoder output {out:?} does not reach input resolution {}x{}",
                    config.height(),
                    config.width()
                )));
            }
        }
        Ok(Self {
            encoder,
            head,
            decoder,
            encoder_params,
            head_params,
            decoder_params,
            feature_shape,
        })
    }

    pub fn param_count(&self) -> usize {
        self.decoder_params.end
    }
}

/// `(p, S)` for one sample; absent branches yield `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<F> {
    pub p: Option<F>,
    /// Row-major `h × w` soft mask.
    pub s: Option<Vec<F>>,
}

/// Per-sample targets and loss scales for one backward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleTarget<'a, F> {
    /// `(label, scale)`: the detection logit receives `scale · (p − y)`.
    pub det: Option<(F, F)>,
    /// `(mask, scale)`: each pixel logit receives `scale · (s − m) / (h·w)`.
    pub seg: Option<(&'a [F], F)>,
}

/// Unscaled per-sample losses from a training pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub det: Option<f64>,
    pub seg: Option<f64>,
}

/// Last encoder stage activations for one sample.
#[derive(Debug, Clone)]
pub struct EncoderActivations<F> {
    pub activations: Tensor<F>,
}

/// Detection score at a given activation tensor together with its gradients.
#[derive(Debug, Clone)]
pub struct DetectionProbe<F> {
    pub logit: F,
    pub p: F,
    /// `∂logit/∂A`
    pub grad_logit: Tensor<F>,
    /// `∂p/∂A`
    pub grad_p: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Builds and initialises a model. The encoder, head and decoder draw
    /// from independent streams, so dropping a branch never changes the
    /// initial values of the others.
    pub fn build(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        let arch = Architecture::build(&config)?;
        let mut params = vec![F::zero(); arch.param_count()];
        nn::init_seq(&arch.encoder, &mut params, &mut seed::rng_for(rng_seed, "encoder"));
        nn::init_seq(&arch.head, &mut params, &mut seed::rng_for(rng_seed, "head"));
        nn::init_seq(&arch.decoder, &mut params, &mut seed::rng_for(rng_seed, "decoder"));
        Ok(Self { config, arch, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        let arch = Architecture::build(&config)?;
        if params.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { config, arch, params })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn branch_params(&self, branch: Branch) -> Range<usize> {
        match branch {
            Branch::Detection => self.arch.head_params.clone(),
            Branch::Segmentation => self.arch.decoder_params.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let expect = (self.config.channels(), self.config.height(), self.config.width());
        if x.shape() != expect {
            return Err(Error::Dimension(format!(
                "input shape {:?} (c,h,w) does not match configured {:?}",
                x.shape(),
                expect
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        Ok(nn::infer_seq(&self.arch.encoder, &self.params, x.clone()))
    }

    fn decode(&self, feat: Tensor<F>) -> Vec<F> {
        nn::infer_seq(&self.arch.decoder, &self.params, feat)
            .data
            .into_iter()
            .map(squash_open)
            .collect()
    }

    /// Evaluation-mode forward pass for one sample.
    pub fn forward_one(&self, x: &Tensor<F>) -> Result<ModelOutput<F>> {
        let feat = self.encode(x)?;
        let p = self
            .config
            .has(Branch::Detection)
            .then(|| squash_open(nn::infer_seq(&self.arch.head, &self.params, feat.clone()).data[0]));
        let s = self.config.has(Branch::Segmentation).then(|| self.decode(feat));
        Ok(ModelOutput { p, s })
    }

    /// Evaluation-mode forward pass over a batch; samples are independent.
    pub fn forward(&self, batch: &[Tensor<F>]) -> Result<Vec<ModelOutput<F>>> {
        exec::map(batch, |x| self.forward_one(x)).into_iter().collect()
    }

    pub fn spatial_activations(&self, batch: &[Tensor<F>]) -> Result<Vec<EncoderActivations<F>>> {
        if !self.config.has(Branch::Detection) {
            return Err(Error::Capability("detection"));
        }
        exec::map(batch, |x| {
            self.encode(x).map(|activations| EncoderActivations { activations })
        })
        .into_iter()
        .collect()
    }

    /// Runs the detection head from `activations` and back-propagates to them.
    pub fn probe_detection(&self, activations: &Tensor<F>) -> Result<DetectionProbe<F>> {
        if !self.config.has(Branch::Detection) {
            return Err(Error::Capability("detection"));
        }
        if activations.shape() != self.arch.feature_shape {
            return Err(Error::Dimension(format!(
                "activation shape {:?} does not match encoder output {:?}",
                activations.shape(),
                self.arch.feature_shape
            )));
        }
        let (out, saved) = nn::forward_seq(&self.arch.head, &self.params, activations.clone());
        let logit = out.data[0];
        let mut scratch = vec![F::zero(); self.params.len()];
        let grad_logit = nn::backward_seq(
            &self.arch.head,
            &self.params,
            &saved,
            Tensor::from_vec(1, 1, 1, vec![F::one()]),
            &mut scratch,
        );
        let p = sigmoid(logit);
        let dp = p * (F::one() - p);
        let mut grad_p = grad_logit.clone();
        for v in &mut grad_p.data {
            *v = *v * dp;
        }
        Ok(DetectionProbe { logit, p, grad_logit, grad_p })
    }

    /// Training-mode pass for one sample: accumulates the scaled loss gradient
    /// into `grads` and returns the unscaled per-sample losses.
    pub fn accumulate_sample(
        &self,
        x: &Tensor<F>,
        target: SampleTarget<'_, F>,
        grads: &mut [F],
    ) -> Result<SampleLoss> {
        self.check_input(x)?;
        let params = &self.params;
        let (feat, enc_saved) = nn::forward_seq(&self.arch.encoder, params, x.clone());
        let mut dfeat = Tensor::zeros(feat.c, feat.h, feat.w);
        let mut loss = SampleLoss::default();
        let eps = crate::objective::EPS;

        if let Some((y, scale)) = target.det {
            if !self.config.has(Branch::Detection) {
                return Err(Error::Capability("detection"));
            }
            let (out, saved) = nn::forward_seq(&self.arch.head, params, feat.clone());
            let p = sigmoid(out.data[0]);
            let pc = p.to_f64_lossy().clamp(eps, 1.0 - eps);
            let yf = y.to_f64_lossy();
            loss.det = Some(-((1.0 - yf) * (1.0 - pc).ln() + yf * pc.ln()));
            let g = Tensor::from_vec(1, 1, 1, vec![scale * (p - y)]);
            let d = nn::backward_seq(&self.arch.head, params, &saved, g, grads);
            dfeat.add_assign(&d);
        }
        if let Some((mask, scale)) = target.seg {
            if !self.config.has(Branch::Segmentation) {
                return Err(Error::Capability("segmentation"));
            }
            let (out, saved) = nn::forward_seq(&self.arch.decoder, params, feat.clone());
            if mask.len() != out.data.len() {
                return Err(Error::Dimension(format!(
                    "mask has {} pixels, prediction has {}",
                    mask.len(),
                    out.data.len()
                )));
            }
            let hw = F::from_usize(out.data.len()).unwrap();
            let mut sum = 0.0f64;
            let mut g = out.clone();
            for ((gv, z), m) in g.data.iter_mut().zip(&out.data).zip(mask) {
                let s = sigmoid(*z);
                let sc = s.to_f64_lossy().clamp(eps, 1.0 - eps);
                let mf = m.to_f64_lossy();
                sum += (1.0 - mf) * (1.0 - sc).ln() + mf * sc.ln();
                *gv = scale * (s - *m) / hw;
            }
            loss.seg = Some(-sum / out.data.len() as f64);
            let d = nn::backward_seq(&self.arch.decoder, params, &saved, g, grads);
            dfeat.add_assign(&d);
        }
        if target.det.is_some() || target.seg.is_some() {
            nn::backward_seq(&self.arch.encoder, params, &enc_saved, dfeat, grads);
        }
        Ok(loss)
    }

    /// Saved-state-free helper used by gradient checks: raw pre-squash
    /// outputs `(detection logit, segmentation logits)`.
    pub fn logits(&self, x: &Tensor<F>) -> Result<(Option<F>, Option<Vec<F>>)> {
        let feat = self.encode(x)?;
        let det = self
            .config
            .has(Branch::Detection)
            .then(|| nn::infer_seq(&self.arch.head, &self.params, feat.clone()).data[0]);
        let seg = self
            .config
            .has(Branch::Segmentation)
            .then(|| nn::infer_seq(&self.arch.decoder, &self.params, feat).data);
        Ok((det, seg))
    }
}

/// Logistic squashing kept strictly inside (0, 1) at the working precision.
fn squash_open<F: Scalar>(z: F) -> F {
    let s = sigmoid(z);
    let tiny = F::epsilon();
    s.max(tiny).min(F::one() - tiny)
}
