//! Anchor-free prediction head and its training losses.
//!
//! Each response-map cell gets a 2-class objectness logit pair, an optional
//! centerness logit, and four nonnegative distances (left, top, right,
//! bottom) from the cell's patch-space anchor point to the box sides. The
//! distances come out of an exponential so they are positive by
//! construction. Losses: softmax cross-entropy over all cells, binary
//! cross-entropy on positive-cell centerness, and IoU loss on positive-cell
//! boxes.

use crate::error::{Error, Result};
use crate::gam::ResponseMap;
use crate::geometry::{BoundingBox, GridSpec};
use crate::numerics::{
    relu, relu_backward, BatchNorm, BnCache, BnGrads, Conv1x1, Conv1x1Cache, Conv1x1Grads, Mode,
    Tensor,
};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    /// Width of the trunk and towers.
    pub hidden: usize,
    /// Conv+bn+relu layers per tower.
    pub tower_depth: usize,
    /// Whether the centerness branch exists.
    pub centerness: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            tower_depth: 1,
            centerness: true,
        }
    }
}

/// Loss mixing weights: total = cls + cen_weight·cen + reg_weight·reg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cen: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cen: 1.0, reg: 3.0 }
    }
}

/// conv1x1 + batch norm + relu.
#[derive(Debug, Clone)]
struct Block {
    conv: Conv1x1,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct BlockCache {
    conv: Conv1x1Cache,
    bn: BnCache,
    pre_relu: Tensor,
}

#[derive(Debug, Clone)]
struct BlockGrads {
    conv: Conv1x1Grads,
    bn: BnGrads,
}

impl Block {
    fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Block {
            conv: Conv1x1::new(c_in, c_out, false, rng),
            bn: BatchNorm::new(c_out),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
        let (lin, conv) = self.conv.forward(x)?;
        let (pre_relu, bn) = self.bn.forward(&lin, mode)?;
        let y = relu(&pre_relu);
        Ok((y, BlockCache { conv, bn, pre_relu }))
    }

    fn backward(&self, cache: &BlockCache, dy: &Tensor) -> Result<(Tensor, BlockGrads)> {
        let d_pre = relu_backward(&cache.pre_relu, dy)?;
        let (d_lin, bn) = self.bn.backward(&cache.bn, &d_pre)?;
        let (dx, conv) = self.conv.backward(&cache.conv, &d_lin)?;
        Ok((dx, BlockGrads { conv, bn }))
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    trunk: Block,
    cls_tower: Vec<Block>,
    reg_tower: Vec<Block>,
    cls_out: Conv1x1,
    cen_out: Option<Conv1x1>,
    reg_out: Conv1x1,
}

/// Per-cell predictions. `reg` holds (l, t, r, b) distances in patch pixels.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub cen: Option<Tensor>,
    pub reg: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    trunk: BlockCache,
    cls_tower: Vec<BlockCache>,
    reg_tower: Vec<BlockCache>,
    cls_out: Conv1x1Cache,
    cen_out: Option<Conv1x1Cache>,
    reg_out: Conv1x1Cache,
    reg: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    trunk: BlockGrads,
    cls_tower: Vec<BlockGrads>,
    reg_tower: Vec<BlockGrads>,
    cls_out: Conv1x1Grads,
    cen_out: Option<Conv1x1Grads>,
    reg_out: Conv1x1Grads,
}

impl Head {
    pub fn new<R: Rng>(in_channels: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("head hidden width must be >= 1".into()));
        }
        let trunk = Block::new(in_channels, cfg.hidden, rng);
        let tower = |rng: &mut R| -> Vec<Block> {
            (0..cfg.tower_depth)
                .map(|_| Block::new(cfg.hidden, cfg.hidden, rng))
                .collect()
        };
        let cls_tower = tower(rng);
        let reg_tower = tower(rng);
        let cls_out = Conv1x1::new(cfg.hidden, 2, true, rng);
        let cen_out = cfg.centerness.then(|| Conv1x1::new(cfg.hidden, 1, true, rng));
        let mut reg_out = Conv1x1::new(cfg.hidden, 4, true, rng);
        // start the distances near a plausible object scale instead of e^0
        if let Some(b) = &mut reg_out.bias {
            b.fill(16.0f64.ln());
        }
        Ok(Head {
            trunk,
            cls_tower,
            reg_tower,
            cls_out,
            cen_out,
            reg_out,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.trunk.conv.c_in()
    }

    pub fn has_centerness(&self) -> bool {
        self.cen_out.is_some()
    }

    pub fn forward(&self, resp: &ResponseMap, mode: Mode) -> Result<(HeadOutput, HeadCache)> {
        if resp.values.last_dim() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} response channels, got {}",
                self.in_channels(),
                resp.values.last_dim()
            )));
        }
        let (mut cls_feat, trunk_cache) = self.trunk.forward(&resp.values, mode)?;
        let mut reg_feat = cls_feat.clone();
        let mut cls_tower_caches = Vec::with_capacity(self.cls_tower.len());
        for block in &self.cls_tower {
            let (y, c) = block.forward(&cls_feat, mode)?;
            cls_feat = y;
            cls_tower_caches.push(c);
        }
        let mut reg_tower_caches = Vec::with_capacity(self.reg_tower.len());
        for block in &self.reg_tower {
            let (y, c) = block.forward(&reg_feat, mode)?;
            reg_feat = y;
            reg_tower_caches.push(c);
        }
        let (cls, cls_out_cache) = self.cls_out.forward(&cls_feat)?;
        let (cen, cen_out_cache) = match &self.cen_out {
            Some(conv) => {
                let (y, c) = conv.forward(&cls_feat)?;
                (Some(y), Some(c))
            }
            None => (None, None),
        };
        let (reg_raw, reg_out_cache) = self.reg_out.forward(&reg_feat)?;
        let reg = reg_raw.map(f64::exp);
        Ok((
            HeadOutput {
                cls,
                cen,
                reg: reg.clone(),
            },
            HeadCache {
                trunk: trunk_cache,
                cls_tower: cls_tower_caches,
                reg_tower: reg_tower_caches,
                cls_out: cls_out_cache,
                cen_out: cen_out_cache,
                reg_out: reg_out_cache,
                reg,
            },
        ))
    }

    /// Backward from gradients on the three outputs to the response map.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_cls: &Tensor,
        d_cen: Option<&Tensor>,
        d_reg: &Tensor,
    ) -> Result<(Tensor, HeadGrads)> {
        // reg = exp(raw)
        let mut d_reg_raw = d_reg.clone();
        for (g, &r) in d_reg_raw.data_mut().iter_mut().zip(cache.reg.data()) {
            *g *= r;
        }
        let (mut d_reg_feat, reg_out_grads) = self.reg_out.backward(&cache.reg_out, &d_reg_raw)?;
        let mut reg_tower_grads = vec![None; self.reg_tower.len()];
        for i in (0..self.reg_tower.len()).rev() {
            let (dx, g) = self.reg_tower[i].backward(&cache.reg_tower[i], &d_reg_feat)?;
            d_reg_feat = dx;
            reg_tower_grads[i] = Some(g);
        }

        let (mut d_cls_feat, cls_out_grads) = self.cls_out.backward(&cache.cls_out, d_cls)?;
        let cen_out_grads = match (&self.cen_out, d_cen, &cache.cen_out) {
            (Some(conv), Some(d), Some(c)) => {
                let (dx, g) = conv.backward(c, d)?;
                d_cls_feat.add_scaled_assign(&dx, 1.0)?;
                Some(g)
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::ShapeMismatch(
                    "centerness gradient does not match head configuration".into(),
                ))
            }
        };
        let mut cls_tower_grads = vec![None; self.cls_tower.len()];
        for i in (0..self.cls_tower.len()).rev() {
            let (dx, g) = self.cls_tower[i].backward(&cache.cls_tower[i], &d_cls_feat)?;
            d_cls_feat = dx;
            cls_tower_grads[i] = Some(g);
        }

        d_cls_feat.add_scaled_assign(&d_reg_feat, 1.0)?;
        let (dresp, trunk_grads) = self.trunk.backward(&cache.trunk, &d_cls_feat)?;
        Ok((
            dresp,
            HeadGrads {
                trunk: trunk_grads,
                cls_tower: cls_tower_grads.into_iter().map(Option::unwrap).collect(),
                reg_tower: reg_tower_grads.into_iter().map(Option::unwrap).collect(),
                cls_out: cls_out_grads,
                cen_out: cen_out_grads,
                reg_out: reg_out_grads,
            },
        ))
    }

    /// Folds batch statistics of one training forward into running stats.
    pub fn absorb(&mut self, cache: &HeadCache) {
        self.trunk.bn.absorb(&cache.trunk.bn);
        for (block, c) in self.cls_tower.iter_mut().zip(&cache.cls_tower) {
            block.bn.absorb(&c.bn);
        }
        for (block, c) in self.reg_tower.iter_mut().zip(&cache.reg_tower) {
            block.bn.absorb(&c.bn);
        }
    }

    fn blocks(&self) -> Vec<(String, &Block)> {
        let mut out = vec![("trunk".to_string(), &self.trunk)];
        for (i, b) in self.cls_tower.iter().enumerate() {
            out.push((format!("cls_tower{}", i + 1), b));
        }
        for (i, b) in self.reg_tower.iter().enumerate() {
            out.push((format!("reg_tower{}", i + 1), b));
        }
        out
    }

    fn outs(&self) -> Vec<(&'static str, &Conv1x1)> {
        let mut v = vec![("cls_out", &self.cls_out)];
        if let Some(c) = &self.cen_out {
            v.push(("cen_out", c));
        }
        v.push(("reg_out", &self.reg_out));
        v
    }

    pub fn collect_state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, block) in self.blocks() {
            out.push((format!("{prefix}.{name}.conv.weight"), &block.conv.weight));
            out.push((format!("{prefix}.{name}.bn.gamma"), &block.bn.gamma));
            out.push((format!("{prefix}.{name}.bn.beta"), &block.bn.beta));
            out.push((
                format!("{prefix}.{name}.bn.running_mean"),
                &block.bn.running_mean,
            ));
            out.push((
                format!("{prefix}.{name}.bn.running_var"),
                &block.bn.running_var,
            ));
        }
        for (name, conv) in self.outs() {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            if let Some(b) = &conv.bias {
                out.push((format!("{prefix}.{name}.bias"), b));
            }
        }
    }

    pub fn collect_state_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        let mut blocks = vec![("trunk".to_string(), &mut self.trunk)];
        for (i, b) in self.cls_tower.iter_mut().enumerate() {
            blocks.push((format!("cls_tower{}", i + 1), b));
        }
        for (i, b) in self.reg_tower.iter_mut().enumerate() {
            blocks.push((format!("reg_tower{}", i + 1), b));
        }
        for (name, block) in blocks {
            out.push((
                format!("{prefix}.{name}.conv.weight"),
                &mut block.conv.weight,
            ));
            out.push((format!("{prefix}.{name}.bn.gamma"), &mut block.bn.gamma));
            out.push((format!("{prefix}.{name}.bn.beta"), &mut block.bn.beta));
            out.push((
                format!("{prefix}.{name}.bn.running_mean"),
                &mut block.bn.running_mean,
            ));
            out.push((
                format!("{prefix}.{name}.bn.running_var"),
                &mut block.bn.running_var,
            ));
        }
        let mut outs = vec![("cls_out", &mut self.cls_out)];
        if let Some(c) = &mut self.cen_out {
            outs.push(("cen_out", c));
        }
        outs.push(("reg_out", &mut self.reg_out));
        for (name, conv) in outs {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            if let Some(b) = &mut conv.bias {
                out.push((format!("{prefix}.{name}.bias"), b));
            }
        }
    }

    /// Trainable parameters (running stats excluded).
    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        let mut all = Vec::new();
        self.collect_state_mut(prefix, &mut all);
        for (name, t) in all {
            if !name.contains("running_") {
                out.push((name, t));
            }
        }
    }

    pub fn collect_grads(&self, prefix: &str, grads: &HeadGrads, out: &mut Vec<(String, Tensor)>) {
        let mut blocks = vec![("trunk".to_string(), &grads.trunk)];
        for (i, g) in grads.cls_tower.iter().enumerate() {
            blocks.push((format!("cls_tower{}", i + 1), g));
        }
        for (i, g) in grads.reg_tower.iter().enumerate() {
            blocks.push((format!("reg_tower{}", i + 1), g));
        }
        for (name, g) in blocks {
            out.push((format!("{prefix}.{name}.conv.weight"), g.conv.weight.clone()));
            out.push((format!("{prefix}.{name}.bn.gamma"), g.bn.gamma.clone()));
            out.push((format!("{prefix}.{name}.bn.beta"), g.bn.beta.clone()));
        }
        let mut outs = vec![("cls_out", &grads.cls_out)];
        if let Some(g) = &grads.cen_out {
            outs.push(("cen_out", g));
        }
        outs.push(("reg_out", &grads.reg_out));
        for (name, g) in outs {
            out.push((format!("{prefix}.{name}.weight"), g.weight.clone()));
            if let Some(b) = &g.bias {
                out.push((format!("{prefix}.{name}.bias"), b.clone()));
            }
        }
    }
}

/// Per-cell training targets on a feature grid.
#[derive(Debug, Clone)]
pub struct LabelMap {
    /// `[rows, cols]`, 1.0 on positive cells.
    pub cls: Tensor,
    /// `[rows, cols]`, centerness in [0,1]; meaningful on positives only.
    pub cen: Tensor,
    /// `[rows, cols, 4]` distances (l, t, r, b); meaningful on positives only.
    pub reg: Tensor,
    pub positive_count: usize,
}

impl LabelMap {
    pub fn is_positive(&self, row: usize, col: usize) -> bool {
        self.cls.at2(row, col) == 1.0
    }
}

/// Marks cells whose anchor point falls strictly inside the box and encodes
/// the four side distances there. A box that covers no anchors yields an
/// all-negative map (positive_count = 0).
pub fn assign_labels(gt: &BoundingBox, grid: &GridSpec) -> LabelMap {
    let (x0, y0, x1, y1) = (gt.x0(), gt.y0(), gt.x1(), gt.y1());
    let mut cls = Tensor::zeros(&[grid.rows, grid.cols]);
    let mut cen = Tensor::zeros(&[grid.rows, grid.cols]);
    let mut reg = Tensor::zeros(&[grid.rows, grid.cols, 4]);
    let mut positives = 0;
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (px, py) = grid.anchor(row, col);
            let (l, t, r, b) = (px - x0, py - y0, x1 - px, y1 - py);
            if l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0 {
                cls.set2(row, col, 1.0);
                let c = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();
                cen.set2(row, col, c);
                reg.set3(row, col, 0, l);
                reg.set3(row, col, 1, t);
                reg.set3(row, col, 2, r);
                reg.set3(row, col, 3, b);
                positives += 1;
            }
        }
    }
    LabelMap {
        cls,
        cen,
        reg,
        positive_count: positives,
    }
}

/// Turns one cell's four distances back into a patch-space box. The result
/// may be degenerate (zero size) when all distances are zero; such a box is
/// invalid for IoU and scores 0 against everything.
pub fn decode_box(cell: (usize, usize), reg: [f64; 4], grid: &GridSpec) -> BoundingBox {
    let (px, py) = grid.anchor(cell.0, cell.1);
    let [l, t, r, b] = reg;
    BoundingBox {
        cx: px + (r - l) / 2.0,
        cy: py + (b - t) / 2.0,
        w: l + r,
        h: t + b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss {
    pub total: f64,
    pub cls: f64,
    pub cen: f64,
    pub reg: f64,
}

/// Gradients of the total loss with respect to the head outputs.
#[derive(Debug, Clone)]
pub struct HeadLossGrads {
    pub cls: Tensor,
    pub cen: Option<Tensor>,
    pub reg: Tensor,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// IoU of two boxes sharing an anchor point, in (l, t, r, b) coordinates,
/// with the partial derivatives of IoU w.r.t. the predicted distances.
fn anchored_iou(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    let ap = (p[0] + p[2]) * (p[1] + p[3]);
    let ag = (g[0] + g[2]) * (g[1] + g[3]);
    let union = ap + ag - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    let mut grads = [0.0; 4];
    for k in 0..4 {
        let horizontal = k == 0 || k == 2;
        let d_inter = if p[k] < g[k] {
            if horizontal {
                ih
            } else {
                iw
            }
        } else {
            0.0
        };
        let d_ap = if horizontal { p[1] + p[3] } else { p[0] + p[2] };
        grads[k] = (d_inter * (ap + ag) - inter * d_ap) / (union * union);
    }
    (iou, grads)
}

/// Classification, centerness and regression losses with gradients of the
/// weighted total. Cells count into cen/reg only when positive; with no
/// positives those terms are zero.
pub fn head_loss(
    out: &HeadOutput,
    labels: &LabelMap,
    weights: LossWeights,
) -> Result<(HeadLoss, HeadLossGrads)> {
    let (rows, cols) = (labels.cls.shape()[0], labels.cls.shape()[1]);
    if out.cls.shape() != [rows, cols, 2] || out.reg.shape() != [rows, cols, 4] {
        return Err(Error::ShapeMismatch(format!(
            "labels are {rows}x{cols} but cls is {:?} and reg is {:?}",
            out.cls.shape(),
            out.reg.shape()
        )));
    }
    let n_cells = (rows * cols) as f64;
    let n_pos = labels.positive_count as f64;

    let mut cls_loss = 0.0;
    let mut d_cls = Tensor::zeros(&[rows, cols, 2]);
    for row in 0..rows {
        for col in 0..cols {
            let z0 = out.cls.at3(row, col, 0);
            let z1 = out.cls.at3(row, col, 1);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let y = labels.cls.at2(row, col) as usize;
            cls_loss += lse - if y == 1 { z1 } else { z0 };
            let p0 = (z0 - lse).exp();
            let p1 = (z1 - lse).exp();
            d_cls.set3(row, col, 0, (p0 - if y == 0 { 1.0 } else { 0.0 }) / n_cells);
            d_cls.set3(row, col, 1, (p1 - if y == 1 { 1.0 } else { 0.0 }) / n_cells);
        }
    }
    cls_loss /= n_cells;

    let mut cen_loss = 0.0;
    let mut d_cen = out
        .cen
        .as_ref()
        .map(|c| {
            if c.shape() != [rows, cols, 1] {
                return Err(Error::ShapeMismatch(format!(
                    "centerness is {:?}, expected [{rows}, {cols}, 1]",
                    c.shape()
                )));
            }
            Ok(Tensor::zeros(&[rows, cols, 1]))
        })
        .transpose()?;
    if let (Some(cen), Some(d_cen)) = (&out.cen, &mut d_cen) {
        if labels.positive_count > 0 {
            for row in 0..rows {
                for col in 0..cols {
                    if !labels.is_positive(row, col) {
                        continue;
                    }
                    let z = cen.at3(row, col, 0);
                    let y = labels.cen.at2(row, col);
                    cen_loss += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
                    d_cen.set3(row, col, 0, weights.cen * (sigmoid(z) - y) / n_pos);
                }
            }
            cen_loss /= n_pos;
        }
    }

    let mut reg_loss = 0.0;
    let mut d_reg = Tensor::zeros(&[rows, cols, 4]);
    if labels.positive_count > 0 {
        for row in 0..rows {
            for col in 0..cols {
                if !labels.is_positive(row, col) {
                    continue;
                }
                let p = [
                    out.reg.at3(row, col, 0),
                    out.reg.at3(row, col, 1),
                    out.reg.at3(row, col, 2),
                    out.reg.at3(row, col, 3),
                ];
                let g = [
                    labels.reg.at3(row, col, 0),
                    labels.reg.at3(row, col, 1),
                    labels.reg.at3(row, col, 2),
                    labels.reg.at3(row, col, 3),
                ];
                let (iou, d_iou) = anchored_iou(p, g);
                reg_loss += 1.0 - iou;
                for k in 0..4 {
                    d_reg.set3(row, col, k, -weights.reg * d_iou[k] / n_pos);
                }
            }
        }
        reg_loss /= n_pos;
    }

    let total = cls_loss + weights.cen * cen_loss + weights.reg * reg_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss total={total} cls={cls_loss} cen={cen_loss} reg={reg_loss}"
        )));
    }
    Ok((
        HeadLoss {
            total,
            cls: cls_loss,
            cen: cen_loss,
            reg: reg_loss,
        },
        HeadLossGrads {
            cls: d_cls,
            cen: d_cen,
            reg: d_reg,
        },
    ))
}

/// head_forward + head_loss as one gradient-checkable op over the response
/// tensor, emitting the scalar total.
#[derive(Debug, Clone)]
pub struct HeadLossOp {
    pub head: Head,
    pub labels: LabelMap,
    pub weights: LossWeights,
    pub mode: Mode,
}

impl crate::numerics::DiffOp for HeadLossOp {
    fn name(&self) -> &str {
        "head_forward+head_loss"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let resp = ResponseMap {
            values: inputs[0].clone(),
        };
        let (out, _) = self.head.forward(&resp, self.mode)?;
        let (loss, _) = head_loss(&out, &self.labels, self.weights)?;
        Ok(vec![Tensor::scalar(loss.total)])
    }

    fn forward_backward(
        &self,
        inputs: &[Tensor],
        grad_outputs: &[Tensor],
    ) -> Result<crate::numerics::BackwardResult> {
        let resp = ResponseMap {
            values: inputs[0].clone(),
        };
        let (out, cache) = self.head.forward(&resp, self.mode)?;
        let (loss, mut lg) = head_loss(&out, &self.labels, self.weights)?;
        let scale = grad_outputs[0].data()[0];
        lg.cls.scale_assign(scale);
        if let Some(c) = &mut lg.cen {
            c.scale_assign(scale);
        }
        lg.reg.scale_assign(scale);
        let (dresp, grads) = self
            .head
            .backward(&cache, &lg.cls, lg.cen.as_ref(), &lg.reg)?;
        let mut param_grads = Vec::new();
        self.head.collect_grads("head", &grads, &mut param_grads);
        Ok(crate::numerics::BackwardResult {
            outputs: vec![Tensor::scalar(loss.total)],
            input_grads: vec![dresp],
            param_grads,
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.head.collect_state("head", &mut out);
        out.into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut entries = Vec::new();
        self.head.collect_state_mut("head", &mut entries);
        for (n, t) in entries {
            if n == name {
                *t = value;
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("unknown param {name}")))
    }
}
