//! Patch feature extraction.
//!
//! The built-in extractor ("toybone") is a four-stage net of {3x3 conv
//! without padding, batch norm, ReLU} with per-stage strides [2, 2, 2, 1]:
//! total stride 8, receptive field 31 pixels, so a 127 patch maps to a 13x13
//! grid and a 287 patch to 33x33. Stages can be frozen individually; a
//! frozen stage takes no gradient updates and runs its batch norm in infer
//! mode so its checkpoint bytes stay put while frozen.

use crate::error::{Error, Result};
use crate::numerics::{relu, relu_backward, BatchNorm, BnCache, BnGrads, Mode, Tensor};
use rand::Rng;

/// Shape facts a head or tracker needs from any feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneContract {
    pub stride: usize,
    pub receptive_field: usize,
    pub out_channels: usize,
}

impl BackboneContract {
    /// Feature cells per side for a square input, or an error when the input
    /// size violates the stride contract.
    pub fn feat_size(&self, input: usize) -> Result<usize> {
        let rf = self.receptive_field;
        if input < rf || (input - rf) % self.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {input} violates the stride contract: need size >= {rf} with (size - {rf}) divisible by {}",
                self.stride
            )));
        }
        Ok((input - rf) / self.stride + 1)
    }
}

pub trait FeatureExtractor {
    fn contract(&self) -> BackboneContract;
    /// Inference-mode feature extraction from a `[s, s, 3]` patch.
    fn extract(&self, patch: &Tensor) -> Result<Tensor>;
}

/// Valid (no padding) k x k convolution with stride, channels last.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[c_out, k, k, c_in]`
    pub weight: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        Conv2d {
            weight: Tensor::randn(&[c_out, k, k, c_in], std, rng),
            stride,
        }
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_side(&self, input: usize) -> Result<usize> {
        let k = self.k();
        if input < k || (input - k) % self.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "input side {input} violates the stride contract of a k={k} stride={} layer",
                self.stride
            )));
        }
        Ok((input - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, cin) = match x.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d expects [h, w, c], got {other:?}"
                )))
            }
        };
        if cin != self.c_in() {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects {} input channels, got {}",
                self.c_in(),
                cin
            )));
        }
        let k = self.k();
        let s = self.stride;
        let oh = self.out_side(h)?;
        let ow = self.out_side(w)?;
        let cout = self.c_out();
        let mut out = vec![0.0; oh * ow * cout];
        let wd = self.weight.data();
        let xd = x.data();
        for i in 0..oh {
            for j in 0..ow {
                let orow = &mut out[(i * ow + j) * cout..(i * ow + j + 1) * cout];
                for o in 0..cout {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let xbase = ((i * s + u) * w + j * s) * cin;
                        let wbase = ((o * k + u) * k) * cin;
                        for v in 0..k {
                            let xrow = &xd[xbase + v * cin..xbase + (v + 1) * cin];
                            let wrow = &wd[wbase + v * cin..wbase + (v + 1) * cin];
                            for c in 0..cin {
                                acc += wrow[c] * xrow[c];
                            }
                        }
                    }
                    orow[o] = acc;
                }
            }
        }
        Tensor::from_vec(&[oh, ow, cout], out)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Conv2dGrads)> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow, cout) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        if cout != self.c_out() || oh != self.out_side(h)? || ow != self.out_side(w)? {
            return Err(Error::ShapeMismatch(format!(
                "conv2d backward dy {:?} does not match input {:?}",
                dy.shape(),
                x.shape()
            )));
        }
        let k = self.k();
        let s = self.stride;
        let mut dx = vec![0.0; h * w * cin];
        let mut dw = vec![0.0; self.weight.numel()];
        let wd = self.weight.data();
        let xd = x.data();
        let gd = dy.data();
        for i in 0..oh {
            for j in 0..ow {
                let grow = &gd[(i * ow + j) * cout..(i * ow + j + 1) * cout];
                for o in 0..cout {
                    let g = grow[o];
                    if g == 0.0 {
                        continue;
                    }
                    for u in 0..k {
                        let xbase = ((i * s + u) * w + j * s) * cin;
                        let wbase = ((o * k + u) * k) * cin;
                        for v in 0..k {
                            let xoff = xbase + v * cin;
                            let woff = wbase + v * cin;
                            for c in 0..cin {
                                dx[xoff + c] += g * wd[woff + c];
                                dw[woff + c] += g * xd[xoff + c];
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), dx)?,
            Conv2dGrads {
                weight: Tensor::from_vec(self.weight.shape(), dw)?,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    x: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
}

#[derive(Debug, Clone)]
pub struct StageGrads {
    pub conv: Conv2dGrads,
    pub bn: BnGrads,
}

impl Stage {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, StageCache)> {
        let y1 = self.conv.forward(x)?;
        let (y2, bn_cache) = self.bn.forward(&y1, mode)?;
        let y3 = relu(&y2);
        Ok((
            y3,
            StageCache {
                x: x.clone(),
                bn: bn_cache,
                pre_relu: y2,
            },
        ))
    }

    fn backward(&self, cache: &StageCache, dy: &Tensor) -> Result<(Tensor, StageGrads)> {
        let d2 = relu_backward(&cache.pre_relu, dy)?;
        let (d1, bn_grads) = self.bn.backward(&cache.bn, &d2)?;
        let (dx, conv_grads) = self.conv.backward(&cache.x, &d1)?;
        Ok((
            dx,
            StageGrads {
                conv: conv_grads,
                bn: bn_grads,
            },
        ))
    }
}

pub const STAGE_COUNT: usize = 4;
const STAGE_STRIDES: [usize; STAGE_COUNT] = [2, 2, 2, 1];

/// The built-in desk-scale feature extractor.
#[derive(Debug, Clone)]
pub struct Toybone {
    pub stages: Vec<Stage>,
    frozen: [bool; STAGE_COUNT],
}

#[derive(Debug, Clone)]
pub struct ToyboneCache {
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone, Default)]
pub struct ToyboneGrads {
    /// One entry per stage; `None` for frozen stages.
    pub stages: Vec<Option<StageGrads>>,
}

impl Toybone {
    /// Stage widths scale with the output width: [c/4, c/2, c, c].
    pub fn new<R: Rng>(out_channels: usize, rng: &mut R) -> Result<Self> {
        if out_channels < 4 {
            return Err(Error::Config(format!(
                "backbone channels must be >= 4, got {out_channels}"
            )));
        }
        let widths = [
            (out_channels / 4).max(1),
            (out_channels / 2).max(1),
            out_channels,
            out_channels,
        ];
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        let mut c_in = 3;
        for (i, &c_out) in widths.iter().enumerate() {
            stages.push(Stage {
                conv: Conv2d::new(c_in, c_out, 3, STAGE_STRIDES[i], rng),
                bn: BatchNorm::new(c_out),
            });
            c_in = c_out;
        }
        Ok(Toybone {
            stages,
            frozen: [false; STAGE_COUNT],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().unwrap().conv.c_out()
    }

    pub fn feat_size(&self, input: usize) -> Result<usize> {
        self.contract().feat_size(input)
    }

    fn stage_mode(&self, i: usize, mode: Mode) -> Mode {
        if self.frozen[i] {
            Mode::Infer
        } else {
            mode
        }
    }

    fn validate_patch(&self, patch: &Tensor) -> Result<()> {
        match patch.shape() {
            [h, w, 3] if h == w => {
                self.feat_size(*h)?;
                Ok(())
            }
            other => Err(Error::ShapeMismatch(format!(
                "backbone expects a square [s, s, 3] patch, got {other:?}"
            ))),
        }
    }

    pub fn forward(&self, patch: &Tensor, mode: Mode) -> Result<(Tensor, ToyboneCache)> {
        self.validate_patch(patch)?;
        let mut caches = Vec::with_capacity(STAGE_COUNT);
        let mut x = patch.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let (y, cache) = stage.forward(&x, self.stage_mode(i, mode))?;
            caches.push(cache);
            x = y;
        }
        Ok((x, ToyboneCache { stages: caches }))
    }

    /// Train-mode forward that folds batch statistics into the running stats
    /// of every unfrozen stage.
    pub fn forward_updating(&mut self, patch: &Tensor) -> Result<(Tensor, ToyboneCache)> {
        let (y, cache) = self.forward(patch, Mode::Train)?;
        self.absorb_into_running(&cache);
        Ok((y, cache))
    }

    /// Folds the batch statistics recorded in a cache into the running stats
    /// of every unfrozen stage.
    pub fn absorb_into_running(&mut self, cache: &ToyboneCache) {
        for (i, sc) in cache.stages.iter().enumerate() {
            if !self.frozen[i] {
                self.stages[i].bn.absorb(&sc.bn);
            }
        }
    }

    /// Backward pass; frozen stages contribute no parameter gradients, and
    /// propagation stops once every remaining stage below is frozen.
    pub fn backward(&self, cache: &ToyboneCache, dfeat: &Tensor) -> Result<ToyboneGrads> {
        let first_trainable = match self.frozen.iter().position(|f| !f) {
            Some(i) => i,
            None => {
                return Ok(ToyboneGrads {
                    stages: vec![None; STAGE_COUNT],
                })
            }
        };
        let mut grads: Vec<Option<StageGrads>> = vec![None; STAGE_COUNT];
        let mut dy = dfeat.clone();
        for i in (first_trainable..STAGE_COUNT).rev() {
            let (dx, g) = self.stages[i].backward(&cache.stages[i], &dy)?;
            if !self.frozen[i] {
                grads[i] = Some(g);
            }
            dy = dx;
        }
        Ok(ToyboneGrads { stages: grads })
    }

    fn parse_stage_spec(&self, spec: &str) -> Result<Vec<usize>> {
        let spec = spec.trim();
        if spec == "all" {
            return Ok((0..STAGE_COUNT).collect());
        }
        let parse_one = |s: &str| -> Result<usize> {
            s.strip_prefix("stage")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| (1..=STAGE_COUNT).contains(&n))
                .map(|n| n - 1)
                .ok_or_else(|| Error::UnknownStage(s.to_string()))
        };
        if let Some((a, b)) = spec.split_once("..") {
            let lo = parse_one(a)?;
            let hi = parse_one(&format!("stage{}", b.trim()))
                .or_else(|_| parse_one(b))?;
            if hi < lo {
                return Err(Error::UnknownStage(spec.to_string()));
            }
            return Ok((lo..=hi).collect());
        }
        Ok(vec![parse_one(spec)?])
    }

    /// Freezes the named stages: "all", "stageN", or "stageN..M".
    pub fn freeze(&mut self, spec: &str) -> Result<()> {
        for i in self.parse_stage_spec(spec)? {
            self.frozen[i] = true;
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, spec: &str) -> Result<()> {
        for i in self.parse_stage_spec(spec)? {
            self.frozen[i] = false;
        }
        Ok(())
    }

    pub fn is_frozen(&self, stage: usize) -> bool {
        self.frozen[stage]
    }

    pub fn fully_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    pub fn collect_state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("{prefix}.stage{}", i + 1);
            out.push((format!("{p}.conv.weight"), &s.conv.weight));
            out.push((format!("{p}.bn.gamma"), &s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &s.bn.beta));
            out.push((format!("{p}.bn.running_mean"), &s.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &s.bn.running_var));
        }
    }

    pub fn collect_state_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = format!("{prefix}.stage{}", i + 1);
            out.push((format!("{p}.conv.weight"), &mut s.conv.weight));
            out.push((format!("{p}.bn.gamma"), &mut s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut s.bn.beta));
            out.push((format!("{p}.bn.running_mean"), &mut s.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &mut s.bn.running_var));
        }
    }

    /// Trainable (unfrozen) parameters only.
    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        let frozen = self.frozen;
        for (i, s) in self.stages.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let p = format!("{prefix}.stage{}", i + 1);
            out.push((format!("{p}.conv.weight"), &mut s.conv.weight));
            out.push((format!("{p}.bn.gamma"), &mut s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut s.bn.beta));
        }
    }

    /// Gradient entries matching [`Toybone::collect_params_mut`] names.
    pub fn collect_grads(prefix: &str, grads: &ToyboneGrads, out: &mut Vec<(String, Tensor)>) {
        for (i, g) in grads.stages.iter().enumerate() {
            if let Some(g) = g {
                let p = format!("{prefix}.stage{}", i + 1);
                out.push((format!("{p}.conv.weight"), g.conv.weight.clone()));
                out.push((format!("{p}.bn.gamma"), g.bn.gamma.clone()));
                out.push((format!("{p}.bn.beta"), g.bn.beta.clone()));
            }
        }
    }
}

impl FeatureExtractor for Toybone {
    fn contract(&self) -> BackboneContract {
        BackboneContract {
            stride: 8,
            receptive_field: 31,
            out_channels: self.out_channels(),
        }
    }

    fn extract(&self, patch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(patch, Mode::Infer)?.0)
    }
}

/// The whole extractor as a gradient-checkable op (train mode, all stages
/// trainable).
#[derive(Debug, Clone)]
pub struct BackboneOp(pub Toybone);

impl crate::numerics::DiffOp for BackboneOp {
    fn name(&self) -> &str {
        "backbone"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![self.0.forward(&inputs[0], Mode::Train)?.0])
    }

    fn forward_backward(
        &self,
        inputs: &[Tensor],
        grad_outputs: &[Tensor],
    ) -> Result<crate::numerics::BackwardResult> {
        let (y, cache) = self.0.forward(&inputs[0], Mode::Train)?;
        let grads = self.0.backward(&cache, &grad_outputs[0])?;
        // Recover the input gradient by replaying the last backward step.
        let mut dy = grad_outputs[0].clone();
        for i in (0..STAGE_COUNT).rev() {
            let (dx, _) = self.0.stages[i].backward(&cache.stages[i], &dy)?;
            dy = dx;
        }
        let mut params = Vec::new();
        Toybone::collect_grads("net", &grads, &mut params);
        Ok(crate::numerics::BackwardResult {
            outputs: vec![y],
            input_grads: vec![dy],
            param_grads: params,
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.0.collect_state("net", &mut out);
        out.into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut entries = Vec::new();
        self.0.collect_state_mut("net", &mut entries);
        for (n, t) in entries {
            if n == name {
                *t = value;
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("unknown param {name}")))
    }
}
