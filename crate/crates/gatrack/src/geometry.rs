//! Boxes, overlap, patch cropping and the mapping between patch pixels and
//! feature-grid cells.
//!
//! Coordinate convention: pixel (row i, col j) occupies the unit square with
//! center (j + 0.5, i + 0.5), so an h x w image spans [0, w) x [0, h) and a
//! box given as "x, y, w, h" covers the half-open region [x, x+w) x [y, y+h).

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::numerics::Tensor;

/// Axis-aligned box in center form. `new` enforces positive sizes; boxes
/// produced by decoding may be degenerate and are flagged by [`BoundingBox::is_valid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "box must have positive finite size, got w={w} h={h}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument("box center must be finite".into()));
        }
        Ok(b)
    }

    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BoundingBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_tlwh(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Intersection over union. Degenerate boxes (zero or negative area) overlap
/// nothing and score 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    // Areas must come from the same corner arithmetic as the intersection,
    // otherwise identical boxes can score 1 plus an ulp.
    let area_a = (a.x1() - a.x0()) * (a.y1() - a.y0());
    let area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// How template and search patches are cut out of a frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub template_size: usize,
    pub search_size: usize,
    pub context_amount: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            template_size: 127,
            search_size: 287,
            context_amount: 0.5,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.template_size == 0 || self.search_size == 0 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if !(self.context_amount.is_finite() && self.context_amount >= 0.0) {
            return Err(Error::Config("context_amount must be >= 0".into()));
        }
        Ok(())
    }

    /// Square side of the template crop region around `b`:
    /// s = sqrt((w + p)(h + p)) with p = context_amount * (w + h).
    pub fn template_side(&self, b: &BoundingBox) -> f64 {
        let p = self.context_amount * (b.w + b.h);
        ((b.w + p) * (b.h + p)).sqrt()
    }

    /// Search crop side: the template side scaled by search_size/template_size
    /// so that the target occupies the same fraction of both patches.
    pub fn search_side(&self, b: &BoundingBox) -> f64 {
        self.template_side(b) * self.search_size as f64 / self.template_size as f64
    }
}

/// A square crop resampled to `out_size`, with the scale factor
/// (out_size / source side) needed to map coordinates both ways.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Tensor,
    pub scale: f64,
    /// Center of the crop in frame coordinates.
    pub center: (f64, f64),
    pub out_size: usize,
}

impl Patch {
    /// Maps a frame-coordinate box into patch coordinates.
    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let half = self.out_size as f64 / 2.0;
        BoundingBox {
            cx: (b.cx - self.center.0) * self.scale + half,
            cy: (b.cy - self.center.1) * self.scale + half,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    /// Maps a patch-coordinate box back into frame coordinates.
    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let half = self.out_size as f64 / 2.0;
        BoundingBox {
            cx: (b.cx - half) / self.scale + self.center.0,
            cy: (b.cy - half) / self.scale + self.center.1,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

fn bilinear_sample(frame: &Frame, x: f64, y: f64, mean: &[f64; 3], out: &mut [f64; 3]) {
    // Sample at continuous position (x, y); pixel centers sit at +0.5.
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let px = x0 as i64 + dx;
            let py = y0 as i64 + dy;
            let w = wx * wy;
            if px >= 0 && py >= 0 && (px as usize) < frame.w && (py as usize) < frame.h {
                for c in 0..3 {
                    acc[c] += w * frame.get(py as usize, px as usize, c) as f64;
                }
            } else {
                for c in 0..3 {
                    acc[c] += w * mean[c];
                }
            }
        }
    }
    *out = acc;
}

/// Cuts a square region of side `side` centered at `center` out of `frame`,
/// bilinearly resampled to `out_size` x `out_size`, areas outside the frame
/// filled with the per-channel frame mean. Pixel values come back in [0, 1].
pub fn crop_square(frame: &Frame, center: (f64, f64), side: f64, out_size: usize) -> Result<Patch> {
    if !(side.is_finite() && side > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crop side must be positive, got {side}"
        )));
    }
    if out_size == 0 {
        return Err(Error::InvalidArgument("crop out_size must be positive".into()));
    }
    let scale = out_size as f64 / side;
    let x_lo = center.0 - side / 2.0;
    let y_lo = center.1 - side / 2.0;
    let mean = frame.mean_rgb();
    let mut pixels = Tensor::zeros(&[out_size, out_size, 3]);
    let mut sample = [0.0f64; 3];
    for v in 0..out_size {
        let sy = y_lo + (v as f64 + 0.5) / scale;
        for u in 0..out_size {
            let sx = x_lo + (u as f64 + 0.5) / scale;
            bilinear_sample(frame, sx, sy, &mean, &mut sample);
            for c in 0..3 {
                pixels.set3(v, u, c, sample[c] / 255.0);
            }
        }
    }
    Ok(Patch {
        pixels,
        scale,
        center,
        out_size,
    })
}

/// Context-padded square crop around a box, the template-side convention:
/// side s = sqrt((w+p)(h+p)), p = context_amount * (w+h).
pub fn crop_patch(
    frame: &Frame,
    b: &BoundingBox,
    context_amount: f64,
    out_size: usize,
) -> Result<Patch> {
    if !b.is_valid() {
        return Err(Error::InvalidArgument("crop_patch needs a valid box".into()));
    }
    let p = context_amount * (b.w + b.h);
    let side = ((b.w + p) * (b.h + p)).sqrt();
    crop_square(frame, (b.cx, b.cy), side, out_size)
}

/// Placement of a feature grid inside its source patch: cell (row r, col c)
/// has its receptive-field center (anchor point) at
/// (offset_x + stride * c, offset_y + stride * r) in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl GridSpec {
    /// Centered grid: offset = (patch_size - (feat_size - 1) * stride) / 2,
    /// shared by template projection, label assignment and box decoding.
    pub fn centered(patch_size: usize, feat_size: usize, stride: usize) -> Self {
        let offset = grid_offset(patch_size, feat_size, stride);
        GridSpec {
            rows: feat_size,
            cols: feat_size,
            stride,
            offset_x: offset,
            offset_y: offset,
        }
    }

    pub fn anchor(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.offset_x + (self.stride * col) as f64,
            self.offset_y + (self.stride * row) as f64,
        )
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// The one offset constant shared by every patch-to-grid mapping.
pub fn grid_offset(patch_size: usize, feat_size: usize, stride: usize) -> f64 {
    (patch_size as f64 - ((feat_size - 1) * stride) as f64) / 2.0
}

/// Rectangle of template feature cells covering a box, with its bitmask over
/// the full template grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateROI {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over the full grid; set iff the cell lies inside the rect.
    pub mask: Vec<bool>,
}

impl TemplateROI {
    pub fn new(
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Self> {
        if row1 < row0 || col1 < col0 || row1 >= grid_rows || col1 >= grid_cols {
            return Err(Error::InvalidArgument(format!(
                "invalid ROI rows {row0}..={row1} cols {col0}..={col1} on {grid_rows}x{grid_cols} grid"
            )));
        }
        let mut mask = vec![false; grid_rows * grid_cols];
        for r in row0..=row1 {
            for c in col0..=col1 {
                mask[r * grid_cols + c] = true;
            }
        }
        Ok(TemplateROI {
            row0,
            col0,
            row1,
            col1,
            grid_rows,
            grid_cols,
            mask,
        })
    }

    /// Centered m x m rectangle (clamped to the grid), the pre-fixed
    /// alternative to target-aware projection.
    pub fn centered(m: usize, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("crop size must be >= 1".into()));
        }
        let m_r = m.min(grid_rows);
        let m_c = m.min(grid_cols);
        let row0 = (grid_rows - m_r) / 2;
        let col0 = (grid_cols - m_c) / 2;
        TemplateROI::new(row0, col0, row0 + m_r - 1, col0 + m_c - 1, grid_rows, grid_cols)
    }

    pub fn rows(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn cols(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn cell_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn covers_full_grid(&self) -> bool {
        self.row0 == 0
            && self.col0 == 0
            && self.row1 == self.grid_rows - 1
            && self.col1 == self.grid_cols - 1
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Projects a patch-coordinate box onto the feature grid. Corners map by
/// (x - offset) / stride and round half-up to the nearest index, the
/// exclusive right/bottom edge converting to an inclusive index by -1; an
/// empty span collapses to its rounded left/top cell, and everything clamps
/// to the grid so the result is always at least 1 x 1.
pub fn project_box(b: &BoundingBox, grid: &GridSpec) -> Result<TemplateROI> {
    if !b.is_valid() {
        return Err(Error::InvalidArgument("project_box needs a valid box".into()));
    }
    let s = grid.stride as f64;
    let u0 = (b.x0() - grid.offset_x) / s;
    let u1 = (b.x1() - grid.offset_x) / s;
    let v0 = (b.y0() - grid.offset_y) / s;
    let v1 = (b.y1() - grid.offset_y) / s;
    let clamp = |x: f64, hi: usize| -> usize {
        let hi = (hi - 1) as f64;
        x.max(0.0).min(hi) as usize
    };
    let c0 = round_half_up(u0);
    let c1 = (round_half_up(u1) - 1.0).max(c0);
    let r0 = round_half_up(v0);
    let r1 = (round_half_up(v1) - 1.0).max(r0);
    // Clamping preserves order because both ends clamp into the same range.
    let col0 = clamp(c0, grid.cols);
    let col1 = clamp(c1, grid.cols);
    let row0 = clamp(r0, grid.rows);
    let row1 = clamp(r1, grid.rows);
    TemplateROI::new(row0, col0, row1, col1, grid.rows, grid.cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Frame;
    use proptest::prelude::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BoundingBox::new(10.0, 20.0, 4.0, 6.0).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = BoundingBox::new(5.0, 5.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(50.0, 5.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_of_half_overlapping_strips_is_one_third() {
        // Corner form (0,0)-(2,1) and (1,0)-(3,1): intersection 1, union 3.
        let a = BoundingBox::from_tlwh(0.0, 0.0, 2.0, 1.0).unwrap();
        let b = BoundingBox::from_tlwh(1.0, 0.0, 2.0, 1.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_scores_zero_iou() {
        let a = BoundingBox::new(5.0, 5.0, 2.0, 2.0).unwrap();
        let z = BoundingBox {
            cx: 5.0,
            cy: 5.0,
            w: 0.0,
            h: 0.0,
        };
        assert!(!z.is_valid());
        assert_eq!(iou(&a, &z), 0.0);
    }

    #[test]
    fn template_side_matches_closed_form() {
        // 40x40 box, context 0.5: p = 40, s = sqrt(80*80) = 80.
        let b = BoundingBox::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let spec = CropSpec::default();
        assert!((spec.template_side(&b) - 80.0).abs() < 1e-12);
    }

    fn gradient_frame(h: usize, w: usize) -> Frame {
        let mut f = Frame::new(h, w);
        for r in 0..h {
            for c in 0..w {
                f.set(r, c, 0, (r % 256) as u8);
                f.set(r, c, 1, (c % 256) as u8);
                f.set(r, c, 2, ((r * 7 + c * 13) % 256) as u8);
            }
        }
        f
    }

    #[test]
    fn interior_crop_at_native_scale_is_the_exact_subimage() {
        let frame = gradient_frame(120, 120);
        // w = h = 64, context 0 gives side exactly 64; center chosen so the
        // window is pixel aligned.
        let b = BoundingBox::new(42.0, 50.0, 64.0, 64.0).unwrap();
        let patch = crop_patch(&frame, &b, 0.0, 64).unwrap();
        assert_eq!(patch.scale, 1.0);
        for v in 0..64 {
            for u in 0..64 {
                for c in 0..3 {
                    let want = frame.get(18 + v, 10 + u, c) as f64 / 255.0;
                    assert!(
                        (patch.pixels.at3(v, u, c) - want).abs() < 1e-12,
                        "pixel {v},{u},{c}"
                    );
                }
            }
        }
    }

    #[test]
    fn out_of_frame_region_fills_with_channel_mean() {
        let frame = gradient_frame(60, 60);
        let mean = frame.mean_rgb();
        let b = BoundingBox::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let patch = crop_patch(&frame, &b, 0.5, 80).unwrap();
        // side 80 centered at origin: the top-left quadrant is fully outside.
        for c in 0..3 {
            assert!((patch.pixels.at3(0, 0, c) - mean[c] / 255.0).abs() < 1e-12);
            assert!((patch.pixels.at3(10, 5, c) - mean[c] / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_scale_is_out_size_over_side() {
        let frame = gradient_frame(200, 200);
        let b = BoundingBox::new(100.0, 100.0, 40.0, 40.0).unwrap();
        let patch = crop_patch(&frame, &b, 0.5, 127).unwrap();
        assert!((patch.scale - 127.0 / 80.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_crop_side_is_an_error() {
        let frame = gradient_frame(10, 10);
        let bad = BoundingBox {
            cx: 5.0,
            cy: 5.0,
            w: 0.0,
            h: 0.0,
        };
        assert!(crop_patch(&frame, &bad, 0.5, 32).is_err());
    }

    #[test]
    fn grid_offset_for_127_8_13_is_15_5() {
        assert_eq!(grid_offset(127, 13, 8), 15.5);
        assert_eq!(grid_offset(287, 33, 8), 15.5);
    }

    fn grid13() -> GridSpec {
        GridSpec::centered(127, 13, 8)
    }

    #[test]
    fn whole_patch_box_covers_the_whole_grid() {
        let b = BoundingBox::new(63.5, 63.5, 127.0, 127.0).unwrap();
        let roi = project_box(&b, &grid13()).unwrap();
        assert!(roi.covers_full_grid());
    }

    #[test]
    fn tiny_centered_box_maps_to_the_center_cell() {
        let b = BoundingBox::new(63.5, 63.5, 1.0, 1.0).unwrap();
        let roi = project_box(&b, &grid13()).unwrap();
        assert_eq!((roi.row0, roi.col0, roi.row1, roi.col1), (6, 6, 6, 6));
    }

    #[test]
    fn centered_64x32_box_spans_8_cols_by_4_rows() {
        let b = BoundingBox::new(63.5, 63.5, 64.0, 32.0).unwrap();
        let roi = project_box(&b, &grid13()).unwrap();
        assert_eq!(roi.cols(), 8);
        assert_eq!(roi.rows(), 4);
        // Centered: symmetric cell span around the grid center column 6.
        assert_eq!((roi.col0, roi.col1), (2, 9));
        assert_eq!((roi.row0, roi.row1), (4, 7));
    }

    #[test]
    fn off_grid_box_clamps_to_the_border_cell() {
        let b = BoundingBox::new(-40.0, 63.5, 10.0, 10.0).unwrap();
        let roi = project_box(&b, &grid13()).unwrap();
        assert_eq!((roi.col0, roi.col1), (0, 0));
        assert!(roi.cell_count() >= 1);
    }

    #[test]
    fn roi_mask_matches_rect_membership() {
        let roi = TemplateROI::new(1, 2, 3, 4, 6, 7).unwrap();
        for r in 0..6 {
            for c in 0..7 {
                let inside = (1..=3).contains(&r) && (2..=4).contains(&c);
                assert_eq!(roi.mask[r * 7 + c], inside);
            }
        }
        assert_eq!(roi.cell_count(), 9);
    }

    #[test]
    fn prefixed_centered_roi_clamps_to_grid() {
        let roi = TemplateROI::centered(7, 13, 13).unwrap();
        assert_eq!((roi.row0, roi.col0, roi.row1, roi.col1), (3, 3, 9, 9));
        let all = TemplateROI::centered(99, 13, 13).unwrap();
        assert!(all.covers_full_grid());
    }

    #[test]
    fn patch_box_round_trip_recovers_the_center() {
        let frame = gradient_frame(200, 160);
        let b = BoundingBox::new(81.3, 97.2, 30.0, 44.0).unwrap();
        let patch = crop_patch(&frame, &b, 0.5, 127).unwrap();
        let in_patch = patch.box_to_patch(&b);
        assert!((in_patch.cx - 63.5).abs() < 1e-9);
        assert!((in_patch.cy - 63.5).abs() < 1e-9);
        let back = patch.box_to_frame(&in_patch);
        assert!(back.center_distance(&b) < 0.5);
        assert!((back.w - b.w).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in -50.0f64..50.0, ay in -50.0f64..50.0,
            aw in 0.1f64..60.0, ah in 0.1f64..60.0,
            bx in -50.0f64..50.0, by in -50.0f64..50.0,
            bw in 0.1f64..60.0, bh in 0.1f64..60.0,
        ) {
            let a = BoundingBox::new(ax, ay, aw, ah).unwrap();
            let b = BoundingBox::new(bx, by, bw, bh).unwrap();
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn projected_roi_is_nonempty_and_grows_with_the_box(
            cx in 0.0f64..127.0, cy in 0.0f64..127.0,
            w in 0.5f64..120.0, h in 0.5f64..120.0,
            grow in 1.0f64..3.0,
        ) {
            let grid = GridSpec::centered(127, 13, 8);
            let small = BoundingBox::new(cx, cy, w, h).unwrap();
            let big = BoundingBox::new(cx, cy, w * grow, h * grow).unwrap();
            let rs = project_box(&small, &grid).unwrap();
            let rb = project_box(&big, &grid).unwrap();
            prop_assert!(rs.cell_count() >= 1);
            prop_assert!(rb.cols() >= rs.cols());
            prop_assert!(rb.rows() >= rs.rows());
        }
    }
}
