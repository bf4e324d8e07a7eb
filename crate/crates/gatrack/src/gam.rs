//! Graph-attention embedding of template information into search features.
//!
//! Template and search feature grids are treated as two node sets of a
//! complete bipartite graph. Every search cell scores every template cell by
//! an inner product of linearly transformed features, the scores are
//! softmax-normalized per search cell, and the attention weights mix
//! value-transformed template features into an aggregate that is concatenated
//! with the cell's own value-transformed feature and rectified. A plain
//! depth-wise cross-correlation is included as the ablation baseline.
//!
//! Node flattening order is row-major over (row, col) everywhere.

use crate::error::{Error, Result};
use crate::geometry::TemplateROI;
use crate::numerics::{
    masked_softmax, masked_softmax_backward, relu, relu_backward, BatchNorm, BnCache, BnGrads,
    Conv1x1, Conv1x1Cache, Conv1x1Grads, Mode, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How template nodes are selected from the template feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Keep only the ROI sub-grid; node count shrinks to the ROI cell count.
    Crop,
    /// Keep the full grid but zero features outside the ROI, preserving the
    /// grid scale that downstream batch statistics see.
    ZeroMask,
}

/// What the softmax support covers when selection leaves zeroed nodes around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingPolicy {
    /// Out-of-ROI nodes are removed from the softmax support (default).
    /// Zeroed nodes would otherwise each add exp(0) = 1 to the denominator
    /// and dilute attention in proportion to background area.
    Exclude,
    /// Literal zero-node softmax over the full grid, kept for comparison
    /// experiments.
    IncludeZeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GamConfig {
    pub selection: SelectionMode,
    pub masking: MaskingPolicy,
}

impl Default for GamConfig {
    fn default() -> Self {
        GamConfig {
            selection: SelectionMode::ZeroMask,
            masking: MaskingPolicy::Exclude,
        }
    }
}

/// Which of the three 1x1 maps carry a bias term. The score maps default to
/// bias-free so that zeroed template nodes map to zero scores; the value map
/// keeps its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasFlags {
    pub ws: bool,
    pub wt: bool,
    pub wv: bool,
}

impl Default for BiasFlags {
    fn default() -> Self {
        BiasFlags {
            ws: false,
            wt: false,
            wv: true,
        }
    }
}

/// The three 1x1 transforms and their batch norms.
///
/// `ws`/`wt` produce the score space (their output widths must match for the
/// inner product); `wv` produces the value space and is shared between
/// template and search features. Each map is followed by its own batch norm
/// when `use_bn` is set.
#[derive(Debug, Clone)]
pub struct GamParams {
    pub ws: Conv1x1,
    pub wt: Conv1x1,
    pub wv: Conv1x1,
    pub bn_s: BatchNorm,
    pub bn_t: BatchNorm,
    pub bn_v: BatchNorm,
    pub use_bn: bool,
}

impl GamParams {
    pub fn new<R: Rng>(c: usize, c_embed: usize, bias: BiasFlags, rng: &mut R) -> Self {
        // The attention logits are inner products over c_embed normalized
        // channels, so they start with variance near c_embed and the row
        // softmax saturates before any learning happens. Starting the two
        // score-path gains at c_embed^-1/4 puts the initial logits near unit
        // variance; the gains stay learnable.
        let mut bn_s = BatchNorm::new(c_embed);
        let mut bn_t = BatchNorm::new(c_embed);
        let g = (c_embed as f64).powf(-0.25);
        bn_s.gamma.fill(g);
        bn_t.gamma.fill(g);
        GamParams {
            ws: Conv1x1::new(c, c_embed, bias.ws, rng),
            wt: Conv1x1::new(c, c_embed, bias.wt, rng),
            wv: Conv1x1::new(c, c_embed, bias.wv, rng),
            bn_s,
            bn_t,
            bn_v: BatchNorm::new(c_embed),
            use_bn: true,
        }
    }

    /// Identity maps, no bias, batch norm off. Makes the module a pure
    /// attention mixer, which the worked-example tests rely on.
    pub fn identity(c: usize) -> Self {
        GamParams {
            ws: Conv1x1::identity(c),
            wt: Conv1x1::identity(c),
            wv: Conv1x1::identity(c),
            bn_s: BatchNorm::new(c),
            bn_t: BatchNorm::new(c),
            bn_v: BatchNorm::new(c),
            use_bn: false,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.ws.c_in()
    }

    /// Width of the transformed feature space.
    pub fn embed_channels(&self) -> usize {
        self.wv.c_out()
    }

    /// Channel count of the fused response map.
    pub fn response_channels(&self) -> usize {
        2 * self.embed_channels()
    }

    pub fn collect_state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, conv) in [("ws", &self.ws), ("wt", &self.wt), ("wv", &self.wv)] {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            if let Some(b) = &conv.bias {
                out.push((format!("{prefix}.{name}.bias"), b));
            }
        }
        for (name, bn) in [("bn_s", &self.bn_s), ("bn_t", &self.bn_t), ("bn_v", &self.bn_v)] {
            out.push((format!("{prefix}.{name}.gamma"), &bn.gamma));
            out.push((format!("{prefix}.{name}.beta"), &bn.beta));
            out.push((format!("{prefix}.{name}.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.{name}.running_var"), &bn.running_var));
        }
    }

    pub fn collect_state_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (name, conv) in [
            ("ws", &mut self.ws),
            ("wt", &mut self.wt),
            ("wv", &mut self.wv),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            if let Some(b) = &mut conv.bias {
                out.push((format!("{prefix}.{name}.bias"), b));
            }
        }
        for (name, bn) in [
            ("bn_s", &mut self.bn_s),
            ("bn_t", &mut self.bn_t),
            ("bn_v", &mut self.bn_v),
        ] {
            out.push((format!("{prefix}.{name}.gamma"), &mut bn.gamma));
            out.push((format!("{prefix}.{name}.beta"), &mut bn.beta));
            out.push((format!("{prefix}.{name}.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.{name}.running_var"), &mut bn.running_var));
        }
    }

    /// Trainable parameters; batch-norm affine terms only when `use_bn`.
    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        let use_bn = self.use_bn;
        for (name, conv) in [
            ("ws", &mut self.ws),
            ("wt", &mut self.wt),
            ("wv", &mut self.wv),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            if let Some(b) = &mut conv.bias {
                out.push((format!("{prefix}.{name}.bias"), b));
            }
        }
        if use_bn {
            for (name, bn) in [
                ("bn_s", &mut self.bn_s),
                ("bn_t", &mut self.bn_t),
                ("bn_v", &mut self.bn_v),
            ] {
                out.push((format!("{prefix}.{name}.gamma"), &mut bn.gamma));
                out.push((format!("{prefix}.{name}.beta"), &mut bn.beta));
            }
        }
    }

    pub fn collect_grads(&self, prefix: &str, grads: &GamGrads, out: &mut Vec<(String, Tensor)>) {
        for (name, g) in [("ws", &grads.ws), ("wt", &grads.wt), ("wv", &grads.wv)] {
            out.push((format!("{prefix}.{name}.weight"), g.weight.clone()));
            if let Some(b) = &g.bias {
                out.push((format!("{prefix}.{name}.bias"), b.clone()));
            }
        }
        if self.use_bn {
            for (name, g) in [
                ("bn_s", &grads.bn_s),
                ("bn_t", &grads.bn_t),
                ("bn_v", &grads.bn_v),
            ] {
                if let Some(g) = g {
                    out.push((format!("{prefix}.{name}.gamma"), g.gamma.clone()));
                    out.push((format!("{prefix}.{name}.beta"), g.beta.clone()));
                }
            }
        }
    }
}

/// Raw correlation scores, one row per search cell, one column per template
/// node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `[Ns, Nt]`
    pub values: Tensor,
}

/// Row-stochastic attention over template nodes. Masked columns are exactly
/// zero; every row sums to one over the support.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    /// `[Ns, Nt]`
    pub values: Tensor,
    pub template_mask: Vec<bool>,
}

/// Fused output of the embedding: per search cell, the rectified
/// concatenation of the attention aggregate and the cell's own
/// value-transformed feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    /// `[Hs, Ws, 2·c_embed]`
    pub values: Tensor,
}

impl ResponseMap {
    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}

/// `[H, W, c]` grid to `[H·W, c]` node list, row-major.
pub fn flatten_cells(grid: &Tensor) -> Result<Tensor> {
    match grid.shape() {
        [h, w, c] => grid.clone().reshape(&[h * w, *c]),
        other => Err(Error::ShapeMismatch(format!(
            "expected a [h, w, c] grid, got {other:?}"
        ))),
    }
}

/// Picks template nodes per the selection mode. Returns the selected feature
/// tensor and the in-ROI bit mask over its cells (row-major): crop mode keeps
/// only ROI cells, so its mask is all-true; zero-mask mode keeps the full
/// grid with out-of-ROI features zeroed and flags the in-ROI cells. Both
/// modes select the same set of template nodes.
pub fn select_template_nodes(
    ft: &Tensor,
    roi: &TemplateROI,
    mode: SelectionMode,
) -> Result<(Tensor, Vec<bool>)> {
    let (h, w, c) = match ft.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "template features must be [h, w, c], got {other:?}"
            )))
        }
    };
    if roi.grid_rows != h || roi.grid_cols != w {
        return Err(Error::ShapeMismatch(format!(
            "ROI is for a {}x{} grid but features are {h}x{w}",
            roi.grid_rows, roi.grid_cols
        )));
    }
    match mode {
        SelectionMode::Crop => {
            let (rows, cols) = (roi.rows(), roi.cols());
            let mut out = Tensor::zeros(&[rows, cols, c]);
            for r in 0..rows {
                for col in 0..cols {
                    for ch in 0..c {
                        out.set3(r, col, ch, ft.at3(roi.row0 + r, roi.col0 + col, ch));
                    }
                }
            }
            Ok((out, vec![true; rows * cols]))
        }
        SelectionMode::ZeroMask => {
            let mut out = ft.clone();
            for r in 0..h {
                for col in 0..w {
                    if !roi.mask[r * w + col] {
                        for ch in 0..c {
                            out.set3(r, col, ch, 0.0);
                        }
                    }
                }
            }
            Ok((out, roi.mask.clone()))
        }
    }
}

fn transform(
    cells: &Tensor,
    conv: &Conv1x1,
    bn: &BatchNorm,
    use_bn: bool,
    mode: Mode,
) -> Result<(Tensor, Conv1x1Cache, Option<BnCache>)> {
    let (lin, conv_cache) = conv.forward(cells)?;
    if !use_bn {
        return Ok((lin, conv_cache, None));
    }
    let (out, bn_cache) = bn.forward(&lin, mode)?;
    Ok((out, conv_cache, Some(bn_cache)))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        let or = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = b.row(kk);
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a · bᵀ for row-major [m,k] and [n,k].
fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_bt {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut acc = 0.0;
            for kk in 0..k {
                acc += ar[kk] * br[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// aᵀ · b for row-major [k,m] and [k,n].
fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_at {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let ar = a.row(kk);
        let br = b.row(kk);
        for i in 0..m {
            let av = ar[i];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Correlation scores between every search cell and every template node:
/// the inner product of score-transformed features.
pub fn attention_scores(
    fs: &Tensor,
    ft_hat: &Tensor,
    params: &GamParams,
    mode: Mode,
) -> Result<ScoreMatrix> {
    let s_cells = flatten_cells(fs)?;
    let t_cells = flatten_cells(ft_hat)?;
    if s_cells.last_dim() != params.in_channels() || t_cells.last_dim() != params.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "score transform expects {} channels, got search {} / template {}",
            params.in_channels(),
            s_cells.last_dim(),
            t_cells.last_dim()
        )));
    }
    let (ps, _, _) = transform(&s_cells, &params.ws, &params.bn_s, params.use_bn, mode)?;
    let (pt, _, _) = transform(&t_cells, &params.wt, &params.bn_t, params.use_bn, mode)?;
    let values = matmul_bt(&ps, &pt)?;
    if !values.all_finite() {
        return Err(Error::NonFinite("attention scores".into()));
    }
    Ok(ScoreMatrix { values })
}

/// Per-row masked softmax of the scores over the template-node support.
pub fn attention_normalize(
    scores: &ScoreMatrix,
    template_mask: &[bool],
) -> Result<AttentionMatrix> {
    let (ns, nt) = (scores.values.shape()[0], scores.values.shape()[1]);
    if template_mask.len() != nt {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} nodes but scores have {nt} columns",
            template_mask.len()
        )));
    }
    let mut values = Tensor::zeros(&[ns, nt]);
    for i in 0..ns {
        let row = masked_softmax(scores.values.row(i), template_mask)?;
        values.row_mut(i).copy_from_slice(&row);
    }
    Ok(AttentionMatrix {
        values,
        template_mask: template_mask.to_vec(),
    })
}

/// Value transform of a node list: bn_v(wv(cells)), or just wv when batch
/// norm is off.
pub fn value_transform(cells: &Tensor, params: &GamParams, mode: Mode) -> Result<Tensor> {
    let (out, _, _) = transform(cells, &params.wv, &params.bn_v, params.use_bn, mode)?;
    Ok(out)
}

/// Attention-weighted mixture of value rows: out[i,:] = Σ_j att[i,j]·values[j,:].
pub fn attention_aggregate(att: &AttentionMatrix, values: &Tensor) -> Result<Tensor> {
    matmul(&att.values, values)
}

/// Aggregates value-transformed template nodes per search cell and fuses with
/// the cell's own value-transformed feature: ReLU(aggregate ‖ own).
///
/// The value transform runs on template nodes first, search cells second;
/// in train mode each call normalizes over its own batch of cells.
pub fn aggregate_and_fuse(
    att: &AttentionMatrix,
    ft_hat: &Tensor,
    fs: &Tensor,
    params: &GamParams,
    mode: Mode,
) -> Result<ResponseMap> {
    let t_cells = flatten_cells(ft_hat)?;
    let s_cells = flatten_cells(fs)?;
    let (ns, nt) = (att.values.shape()[0], att.values.shape()[1]);
    if t_cells.shape()[0] != nt || s_cells.shape()[0] != ns {
        return Err(Error::ShapeMismatch(format!(
            "attention is [{ns}, {nt}] but search has {} cells and template {}",
            s_cells.shape()[0],
            t_cells.shape()[0]
        )));
    }
    let tv = value_transform(&t_cells, params, mode)?;
    let sv = value_transform(&s_cells, params, mode)?;
    let v = attention_aggregate(att, &tv)?;
    let cp = params.embed_channels();
    let (hs, ws) = (fs.shape()[0], fs.shape()[1]);
    let mut fused = Tensor::zeros(&[ns, 2 * cp]);
    for i in 0..ns {
        let out = fused.row_mut(i);
        out[..cp].copy_from_slice(v.row(i));
        out[cp..].copy_from_slice(sv.row(i));
    }
    Ok(ResponseMap {
        values: relu(&fused).reshape(&[hs, ws, 2 * cp])?,
    })
}

/// Everything the backward pass needs from one embedding forward.
#[derive(Debug, Clone)]
pub struct GamCache {
    selection: SelectionMode,
    roi: TemplateROI,
    support: Vec<bool>,
    ws_cache: Conv1x1Cache,
    wt_cache: Conv1x1Cache,
    wv_t_cache: Conv1x1Cache,
    wv_s_cache: Conv1x1Cache,
    bn_s_cache: Option<BnCache>,
    bn_t_cache: Option<BnCache>,
    bn_v_t_cache: Option<BnCache>,
    bn_v_s_cache: Option<BnCache>,
    ps: Tensor,
    pt: Tensor,
    att: Tensor,
    tv: Tensor,
    pre_relu: Tensor,
    ft_shape: [usize; 3],
    fs_shape: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct GamGrads {
    pub ws: Conv1x1Grads,
    pub wt: Conv1x1Grads,
    pub wv: Conv1x1Grads,
    pub bn_s: Option<BnGrads>,
    pub bn_t: Option<BnGrads>,
    pub bn_v: Option<BnGrads>,
}

/// Full embedding pass: select template nodes, score, normalize, aggregate,
/// fuse. Returns the response map plus the cache for [`gam_backward`].
pub fn gam_forward_cached(
    ft: &Tensor,
    fs: &Tensor,
    roi: &TemplateROI,
    params: &GamParams,
    cfg: GamConfig,
    mode: Mode,
) -> Result<(ResponseMap, GamCache)> {
    let (ft_hat, sel_mask) = select_template_nodes(ft, roi, cfg.selection)?;
    let support = match cfg.masking {
        MaskingPolicy::Exclude => sel_mask,
        MaskingPolicy::IncludeZeros => vec![true; sel_mask.len()],
    };
    let t_cells = flatten_cells(&ft_hat)?;
    let s_cells = flatten_cells(fs)?;
    if t_cells.last_dim() != params.in_channels() || s_cells.last_dim() != params.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "embedding expects {} channels, got search {} / template {}",
            params.in_channels(),
            s_cells.last_dim(),
            t_cells.last_dim()
        )));
    }
    let (ps, ws_cache, bn_s_cache) =
        transform(&s_cells, &params.ws, &params.bn_s, params.use_bn, mode)?;
    let (pt, wt_cache, bn_t_cache) =
        transform(&t_cells, &params.wt, &params.bn_t, params.use_bn, mode)?;
    let scores = matmul_bt(&ps, &pt)?;
    if !scores.all_finite() {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let ns = scores.shape()[0];
    let nt = scores.shape()[1];
    let mut att = Tensor::zeros(&[ns, nt]);
    for i in 0..ns {
        let row = masked_softmax(scores.row(i), &support)?;
        att.row_mut(i).copy_from_slice(&row);
    }
    let (tv, wv_t_cache, bn_v_t_cache) =
        transform(&t_cells, &params.wv, &params.bn_v, params.use_bn, mode)?;
    let (sv, wv_s_cache, bn_v_s_cache) =
        transform(&s_cells, &params.wv, &params.bn_v, params.use_bn, mode)?;
    let v = matmul(&att, &tv)?;
    let cp = params.embed_channels();
    let mut pre_relu = Tensor::zeros(&[ns, 2 * cp]);
    for i in 0..ns {
        let out = pre_relu.row_mut(i);
        out[..cp].copy_from_slice(v.row(i));
        out[cp..].copy_from_slice(sv.row(i));
    }
    let (hs, wss) = (fs.shape()[0], fs.shape()[1]);
    let values = relu(&pre_relu).reshape(&[hs, wss, 2 * cp])?;
    Ok((
        ResponseMap { values },
        GamCache {
            selection: cfg.selection,
            roi: roi.clone(),
            support,
            ws_cache,
            wt_cache,
            wv_t_cache,
            wv_s_cache,
            bn_s_cache,
            bn_t_cache,
            bn_v_t_cache,
            bn_v_s_cache,
            ps,
            pt,
            att,
            tv,
            pre_relu,
            ft_shape: [ft.shape()[0], ft.shape()[1], ft.shape()[2]],
            fs_shape: [fs.shape()[0], fs.shape()[1], fs.shape()[2]],
        },
    ))
}

/// Forward only.
pub fn gam_forward(
    ft: &Tensor,
    fs: &Tensor,
    roi: &TemplateROI,
    params: &GamParams,
    cfg: GamConfig,
    mode: Mode,
) -> Result<ResponseMap> {
    Ok(gam_forward_cached(ft, fs, roi, params, cfg, mode)?.0)
}

/// Attention weights of one forward pass, for inspection and invariants.
pub fn gam_attention(cache: &GamCache) -> AttentionMatrix {
    AttentionMatrix {
        values: cache.att.clone(),
        template_mask: cache.support.clone(),
    }
}

fn backward_through_bn(
    bn: &BatchNorm,
    cache: &Option<BnCache>,
    dy: &Tensor,
) -> Result<(Tensor, Option<BnGrads>)> {
    match cache {
        Some(c) => {
            let (dx, g) = bn.backward(c, dy)?;
            Ok((dx, Some(g)))
        }
        None => Ok((dy.clone(), None)),
    }
}

fn add_bn_grads(a: Option<BnGrads>, b: Option<BnGrads>) -> Result<Option<BnGrads>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.gamma.add_scaled_assign(&b.gamma, 1.0)?;
            a.beta.add_scaled_assign(&b.beta, 1.0)?;
            Ok(Some(a))
        }
        (x, None) | (None, x) => Ok(x),
    }
}

fn add_conv_grads(mut a: Conv1x1Grads, b: &Conv1x1Grads) -> Result<Conv1x1Grads> {
    a.weight.add_scaled_assign(&b.weight, 1.0)?;
    if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
        ab.add_scaled_assign(bb, 1.0)?;
    }
    Ok(a)
}

/// Backward through the whole embedding. Returns parameter gradients plus
/// gradients for the original template and search feature grids.
pub fn gam_backward(
    params: &GamParams,
    cache: &GamCache,
    dresp: &Tensor,
) -> Result<(GamGrads, Tensor, Tensor)> {
    let ns = cache.pre_relu.shape()[0];
    let cp = params.embed_channels();
    let dy = dresp.clone().reshape(&[ns, 2 * cp])?;
    let dz = relu_backward(&cache.pre_relu, &dy)?;
    let mut dv = Tensor::zeros(&[ns, cp]);
    let mut dsv = Tensor::zeros(&[ns, cp]);
    for i in 0..ns {
        let row = dz.row(i);
        dv.row_mut(i).copy_from_slice(&row[..cp]);
        dsv.row_mut(i).copy_from_slice(&row[cp..]);
    }

    // v = att · tv
    let datt = matmul_bt(&dv, &cache.tv)?;
    let dtv = matmul_at(&cache.att, &dv)?;

    // softmax rows
    let nt = cache.att.shape()[1];
    let mut dscores = Tensor::zeros(&[ns, nt]);
    for i in 0..ns {
        let row = masked_softmax_backward(cache.att.row(i), datt.row(i), &cache.support);
        dscores.row_mut(i).copy_from_slice(&row);
    }

    // scores = ps · ptᵀ
    let dps = matmul(&dscores, &cache.pt)?;
    let dpt = matmul_at(&dscores, &cache.ps)?;

    // value branch, template then search (matching forward order)
    let (dtv_lin, bn_v_t) = backward_through_bn(&params.bn_v, &cache.bn_v_t_cache, &dtv)?;
    let (mut dt_cells, wv_t_grads) = params.wv.backward(&cache.wv_t_cache, &dtv_lin)?;
    let (dsv_lin, bn_v_s) = backward_through_bn(&params.bn_v, &cache.bn_v_s_cache, &dsv)?;
    let (mut ds_cells, wv_s_grads) = params.wv.backward(&cache.wv_s_cache, &dsv_lin)?;

    // score branch
    let (dps_lin, bn_s) = backward_through_bn(&params.bn_s, &cache.bn_s_cache, &dps)?;
    let (ds_score, ws_grads) = params.ws.backward(&cache.ws_cache, &dps_lin)?;
    let (dpt_lin, bn_t) = backward_through_bn(&params.bn_t, &cache.bn_t_cache, &dpt)?;
    let (dt_score, wt_grads) = params.wt.backward(&cache.wt_cache, &dpt_lin)?;
    ds_cells.add_scaled_assign(&ds_score, 1.0)?;
    dt_cells.add_scaled_assign(&dt_score, 1.0)?;

    // un-select template nodes back onto the original grid
    let [th, tw, tc] = cache.ft_shape;
    let mut dft = Tensor::zeros(&[th, tw, tc]);
    match cache.selection {
        SelectionMode::Crop => {
            let cols = cache.roi.cols();
            for r in 0..cache.roi.rows() {
                for col in 0..cols {
                    let src = dt_cells.row(r * cols + col);
                    for ch in 0..tc {
                        dft.set3(cache.roi.row0 + r, cache.roi.col0 + col, ch, src[ch]);
                    }
                }
            }
        }
        SelectionMode::ZeroMask => {
            for r in 0..th {
                for col in 0..tw {
                    if cache.roi.mask[r * tw + col] {
                        let src = dt_cells.row(r * tw + col);
                        for ch in 0..tc {
                            dft.set3(r, col, ch, src[ch]);
                        }
                    }
                }
            }
        }
    }
    let dfs = ds_cells.reshape(&cache.fs_shape)?;

    Ok((
        GamGrads {
            ws: ws_grads,
            wt: wt_grads,
            wv: add_conv_grads(wv_t_grads, &wv_s_grads)?,
            bn_s,
            bn_t,
            bn_v: add_bn_grads(bn_v_t, bn_v_s)?,
        },
        dft,
        dfs,
    ))
}

/// Folds the batch statistics of one training forward into the running
/// stats: bn_s, bn_t, then bn_v (template batch before search batch).
pub fn gam_absorb(params: &mut GamParams, cache: &GamCache) {
    if let Some(c) = &cache.bn_s_cache {
        params.bn_s.absorb(c);
    }
    if let Some(c) = &cache.bn_t_cache {
        params.bn_t.absorb(c);
    }
    if let Some(c) = &cache.bn_v_t_cache {
        params.bn_v.absorb(c);
    }
    if let Some(c) = &cache.bn_v_s_cache {
        params.bn_v.absorb(c);
    }
}

/// Depth-wise valid cross-correlation: each channel of the template slides
/// over the same channel of the search map.
pub fn dw_xcorr(ft_crop: &Tensor, fs: &Tensor) -> Result<Tensor> {
    let (ht, wt, c) = match ft_crop.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "template must be [h, w, c], got {other:?}"
            )))
        }
    };
    let (hs, ws, cs) = match fs.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "search must be [h, w, c], got {other:?}"
            )))
        }
    };
    if c != cs {
        return Err(Error::ShapeMismatch(format!(
            "channel mismatch: template {c}, search {cs}"
        )));
    }
    if ht > hs || wt > ws {
        return Err(Error::InvalidArgument(format!(
            "template {ht}x{wt} larger than search {hs}x{ws}"
        )));
    }
    let (oh, ow) = (hs - ht + 1, ws - wt + 1);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for i in 0..oh {
        for j in 0..ow {
            for u in 0..ht {
                for v in 0..wt {
                    let trow = ft_crop.row(u * wt + v);
                    let srow = fs.row((i + u) * ws + (j + v));
                    let orow = out.row_mut(i * ow + j);
                    for ch in 0..c {
                        orow[ch] += trow[ch] * srow[ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`dw_xcorr`] with respect to both inputs.
pub fn dw_xcorr_backward(
    ft_crop: &Tensor,
    fs: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (ht, wt, c) = (ft_crop.shape()[0], ft_crop.shape()[1], ft_crop.shape()[2]);
    let (hs, ws) = (fs.shape()[0], fs.shape()[1]);
    let (oh, ow) = (hs - ht + 1, ws - wt + 1);
    if dy.shape() != [oh, ow, c] {
        return Err(Error::ShapeMismatch(format!(
            "dw_xcorr backward expects dy [{oh}, {ow}, {c}], got {:?}",
            dy.shape()
        )));
    }
    let mut dft = Tensor::zeros(ft_crop.shape());
    let mut dfs = Tensor::zeros(fs.shape());
    for i in 0..oh {
        for j in 0..ow {
            let grow = dy.row(i * ow + j);
            for u in 0..ht {
                for v in 0..wt {
                    let trow = ft_crop.row(u * wt + v);
                    let srow = fs.row((i + u) * ws + (j + v));
                    let dtrow = dft.row_mut(u * wt + v);
                    for ch in 0..c {
                        dtrow[ch] += grow[ch] * srow[ch];
                    }
                    let dsrow = dfs.row_mut((i + u) * ws + (j + v));
                    for ch in 0..c {
                        dsrow[ch] += grow[ch] * trow[ch];
                    }
                }
            }
        }
    }
    Ok((dft, dfs))
}

/// The whole embedding as a gradient-checkable op over [ft, fs].
#[derive(Debug, Clone)]
pub struct GamOp {
    pub params: GamParams,
    pub roi: TemplateROI,
    pub cfg: GamConfig,
    pub mode: Mode,
}

impl crate::numerics::DiffOp for GamOp {
    fn name(&self) -> &str {
        "gam_forward"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let resp = gam_forward(
            &inputs[0],
            &inputs[1],
            &self.roi,
            &self.params,
            self.cfg,
            self.mode,
        )?;
        Ok(vec![resp.values])
    }

    fn forward_backward(
        &self,
        inputs: &[Tensor],
        grad_outputs: &[Tensor],
    ) -> Result<crate::numerics::BackwardResult> {
        let (resp, cache) = gam_forward_cached(
            &inputs[0],
            &inputs[1],
            &self.roi,
            &self.params,
            self.cfg,
            self.mode,
        )?;
        let (grads, dft, dfs) = gam_backward(&self.params, &cache, &grad_outputs[0])?;
        let mut param_grads = Vec::new();
        self.params.collect_grads("gam", &grads, &mut param_grads);
        Ok(crate::numerics::BackwardResult {
            outputs: vec![resp.values],
            input_grads: vec![dft, dfs],
            param_grads,
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.collect_state("gam", &mut out);
        out.retain(|(n, _)| {
            !n.contains("running_") && (self.params.use_bn || !n.contains(".bn_"))
        });
        out.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut entries = Vec::new();
        self.params.collect_state_mut("gam", &mut entries);
        for (n, t) in entries {
            if n == name {
                *t = value;
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("unknown param {name}")))
    }
}

/// The correlation baseline as a gradient-checkable op over [ft_crop, fs].
#[derive(Debug, Clone)]
pub struct DwXcorrOp;

impl crate::numerics::DiffOp for DwXcorrOp {
    fn name(&self) -> &str {
        "dw_xcorr"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![dw_xcorr(&inputs[0], &inputs[1])?])
    }

    fn forward_backward(
        &self,
        inputs: &[Tensor],
        grad_outputs: &[Tensor],
    ) -> Result<crate::numerics::BackwardResult> {
        let y = dw_xcorr(&inputs[0], &inputs[1])?;
        let (dft, dfs) = dw_xcorr_backward(&inputs[0], &inputs[1], &grad_outputs[0])?;
        Ok(crate::numerics::BackwardResult {
            outputs: vec![y],
            input_grads: vec![dft, dfs],
            param_grads: Vec::new(),
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn set_param(&mut self, name: &str, _value: Tensor) -> Result<()> {
        Err(Error::InvalidArgument(format!("unknown param {name}")))
    }
}
