//! Frame-by-frame inference. The template is cropped once from the first
//! frame and stays fixed; every later frame is searched locally around the
//! previous box, and the response map is post-processed (scale/ratio
//! penalty, cosine window) before the best cell is decoded back into image
//! coordinates.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{crop_patch, crop_square, BoundingBox, CropSpec, GridSpec, TemplateROI};
use crate::head::{decode_box, HeadOutput};
use crate::model::Model;
use crate::numerics::{Mode, Tensor};

/// Post-processing constants. All three are blend/penalty knobs with no
/// effect on the network itself.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Weight of the cosine window against the penalized score map.
    pub window_weight: f64,
    /// Sharpness of the scale/ratio change penalty; 0 disables it.
    pub penalty_k: f64,
    /// Per-frame smoothing rate for the box size; 0 freezes the size.
    pub size_lr: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            window_weight: 0.3,
            penalty_k: 0.04,
            size_lr: 0.3,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_weight.is_finite() && (0.0..=1.0).contains(&self.window_weight)) {
            return Err(Error::Config(format!(
                "window_weight must lie in [0, 1], got {}",
                self.window_weight
            )));
        }
        if !(self.penalty_k.is_finite() && self.penalty_k >= 0.0) {
            return Err(Error::Config(format!(
                "penalty_k must be >= 0, got {}",
                self.penalty_k
            )));
        }
        if !(self.size_lr.is_finite() && (0.0..=1.0).contains(&self.size_lr)) {
            return Err(Error::Config(format!(
                "size_lr must lie in [0, 1], got {}",
                self.size_lr
            )));
        }
        Ok(())
    }
}

/// Separable Hanning window over a response grid, peak 1 at the center.
pub fn hann_window(rows: usize, cols: usize) -> Tensor {
    let axis = |n: usize| -> Vec<f64> {
        if n <= 1 {
            return vec![1.0; n];
        }
        (0..n)
            .map(|i| {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos())
            })
            .collect()
    };
    let wr = axis(rows);
    let wc = axis(cols);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            out.set2(r, c, wr[r] * wc[c]);
        }
    }
    out
}

fn change(x: f64) -> f64 {
    x.max(1.0 / x)
}

/// Context-padded equivalent side used by the size-change penalty.
fn padded_side(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Penalty for a candidate box whose size or aspect ratio departs from the
/// previous one: exp(-(r_c * s_c - 1) * k), where r_c and s_c measure the
/// ratio and scale change (both >= 1). k = 0 makes the factor exactly 1.
/// Both boxes must be expressed in the same coordinate scale.
pub fn scale_ratio_penalty(pred_w: f64, pred_h: f64, prev_w: f64, prev_h: f64, k: f64) -> f64 {
    let s_c = change(padded_side(pred_w, pred_h) / padded_side(prev_w, prev_h));
    let r_c = change((prev_w / prev_h) / (pred_w / pred_h));
    (-(r_c * s_c - 1.0) * k).exp()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-cell quality map: foreground probability times centerness (when the
/// head produces one), times the scale/ratio penalty against `prev`, which
/// must be in search-patch coordinates.
pub fn penalized_scores(out: &HeadOutput, prev: &BoundingBox, k: f64) -> Result<Tensor> {
    let shape = out.cls.shape();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "classifier map must be [rows, cols, 2], got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut scores = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let fg = sigmoid(out.cls.at3(r, c, 1) - out.cls.at3(r, c, 0));
            let cen = match &out.cen {
                Some(m) => sigmoid(m.at3(r, c, 0)),
                None => 1.0,
            };
            let w = out.reg.at3(r, c, 0) + out.reg.at3(r, c, 2);
            let h = out.reg.at3(r, c, 1) + out.reg.at3(r, c, 3);
            let pen = scale_ratio_penalty(w, h, prev.w, prev.h, k);
            scores.set2(r, c, fg * cen * pen);
        }
    }
    Ok(scores)
}

/// score' = (1 - weight) * score + weight * window. weight = 1 discards the
/// scores entirely.
pub fn blend_with_window(scores: &Tensor, window: &Tensor, weight: f64) -> Result<Tensor> {
    if scores.shape() != window.shape() {
        return Err(Error::ShapeMismatch(format!(
            "score map {:?} vs window {:?}",
            scores.shape(),
            window.shape()
        )));
    }
    let mut out = scores.clone();
    for (o, w) in out.data_mut().iter_mut().zip(window.data()) {
        *o = (1.0 - weight) * *o + weight * w;
    }
    Ok(out)
}

/// Row-major argmax over a [rows, cols] map; ties keep the earliest cell.
pub fn argmax_cell(map: &Tensor) -> (usize, usize) {
    let cols = map.shape()[1];
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in map.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = (i / cols, i % cols);
        }
    }
    best
}

/// All per-sequence tracking state. The template features and ROI are
/// extracted once by `init` and never touched again; only `current_box`
/// evolves.
#[derive(Debug, Clone)]
pub struct TrackerState {
    template_features: Tensor,
    roi: TemplateROI,
    window: Tensor,
    grid: GridSpec,
    pub current_box: BoundingBox,
    cfg: TrackConfig,
    crop: CropSpec,
}

impl TrackerState {
    /// Crops the template patch around `init_box`, extracts its features,
    /// and projects the box onto the template grid. The box must have
    /// positive finite size.
    pub fn init(
        model: &Model,
        frame: &Frame,
        init_box: &BoundingBox,
        crop: CropSpec,
        cfg: TrackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        crop.validate()?;
        if !init_box.is_valid() {
            return Err(Error::InvalidArgument(
                "tracking needs an initial box with positive finite size".into(),
            ));
        }
        let patch = crop_patch(frame, init_box, crop.context_amount, crop.template_size)?;
        let (ft, _) = model.backbone.forward(&patch.pixels, Mode::Infer)?;
        let gt_in_patch = patch.box_to_patch(init_box);
        let roi = model.template_roi(&gt_in_patch, crop.template_size)?;
        let grid = model.response_grid(crop.search_size, &roi)?;
        let window = hann_window(grid.rows, grid.cols);
        Ok(TrackerState {
            template_features: ft,
            roi,
            window,
            grid,
            current_box: *init_box,
            cfg,
            crop,
        })
    }

    pub fn roi(&self) -> &TemplateROI {
        &self.roi
    }

    pub fn template_features(&self) -> &Tensor {
        &self.template_features
    }

    pub fn response_grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn window(&self) -> &Tensor {
        &self.window
    }

    /// Order-insensitive only in naming: a stable FNV-1a fold over the raw
    /// f64 bits, used to assert the template never changes.
    pub fn template_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in self.template_features.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// One tracking step: crop the search region around the current box,
    /// run the model, pick the best penalized cell, decode it back into
    /// frame coordinates, and smooth the size. Returns the updated box.
    pub fn update(&mut self, model: &Model, frame: &Frame) -> Result<BoundingBox> {
        let side = self.crop.search_side(&self.current_box);
        let patch = crop_square(
            frame,
            (self.current_box.cx, self.current_box.cy),
            side,
            self.crop.search_size,
        )?;
        let (fs, _) = model.backbone.forward(&patch.pixels, Mode::Infer)?;
        let (resp, _) = model.embed(&self.template_features, &fs, &self.roi, Mode::Infer)?;
        let (out, _) = model.head.forward(&resp, Mode::Infer)?;
        if out.cls.shape()[0] != self.grid.rows || out.cls.shape()[1] != self.grid.cols {
            return Err(Error::ShapeMismatch(format!(
                "response map {:?} does not match the {}x{} tracking grid",
                out.cls.shape(),
                self.grid.rows,
                self.grid.cols
            )));
        }

        let prev_in_patch = patch.box_to_patch(&self.current_box);
        let scores = penalized_scores(&out, &prev_in_patch, self.cfg.penalty_k)?;
        let blended = blend_with_window(&scores, &self.window, self.cfg.window_weight)?;
        let (br, bc) = argmax_cell(&blended);

        let reg = [
            out.reg.at3(br, bc, 0),
            out.reg.at3(br, bc, 1),
            out.reg.at3(br, bc, 2),
            out.reg.at3(br, bc, 3),
        ];
        let pred = patch.box_to_frame(&decode_box((br, bc), reg, &self.grid));

        let lr = self.cfg.size_lr;
        let max_w = (frame.w as f64).max(1.0);
        let max_h = (frame.h as f64).max(1.0);
        let next = BoundingBox {
            cx: pred.cx.clamp(0.0, frame.w as f64),
            cy: pred.cy.clamp(0.0, frame.h as f64),
            w: ((1.0 - lr) * self.current_box.w + lr * pred.w).clamp(1.0, max_w),
            h: ((1.0 - lr) * self.current_box.h + lr * pred.h).clamp(1.0, max_h),
        };
        self.current_box = next;
        Ok(next)
    }
}
