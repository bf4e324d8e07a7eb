//! Pair sampling, the learning-rate and freezing schedule, and the SGD
//! loop. Everything is deterministic under a fixed seed and single-threaded
//! data order; two runs with the same config produce byte-identical
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, save_model};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{crop_patch, crop_square, BoundingBox, CropSpec};
use crate::head::{assign_labels, head_loss, HeadLoss, LossWeights};
use crate::model::Model;
use crate::numerics::Tensor;

/// Schedule and optimizer settings. The learning rate climbs linearly from
/// `lr_start` to `lr_peak` over the warmup epochs, then decays
/// exponentially to `lr_end` by the final epoch. The whole backbone stays
/// frozen for the first `freeze_epochs` epochs; afterwards only
/// `late_frozen_stages` stays fixed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_epochs: usize,
    pub late_frozen_stages: String,
    /// Largest frame index gap between the two frames of a pair.
    pub max_gap: usize,
    /// Search-crop center jitter in frame pixels (uniform in +-shift).
    pub shift_jitter: f64,
    /// Search-crop scale jitter: side multiplied by exp(U(-s, s)).
    pub scale_jitter: f64,
    /// Seed for the data-sampling stream (independent of model init).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            steps_per_epoch: 50,
            warmup_epochs: 5,
            lr_start: 0.005,
            lr_peak: 0.01,
            lr_end: 0.0005,
            momentum: 0.9,
            weight_decay: 1e-4,
            freeze_epochs: 10,
            late_frozen_stages: "stage1..2".into(),
            max_gap: 30,
            shift_jitter: 32.0,
            scale_jitter: 0.18,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "epochs, batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs) so a decay segment remains",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_end", self.lr_end),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.shift_jitter.is_finite() && self.shift_jitter >= 0.0)
            || !(self.scale_jitter.is_finite() && self.scale_jitter >= 0.0)
        {
            return Err(Error::Config("jitter amounts must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate at a fractional epoch position t in [0, epochs]:
    /// linear on the warmup segment, exponential on the decay segment. The
    /// three schedule anchors (start, peak, end) are returned exactly.
    pub fn lr_at(&self, t: f64) -> Result<f64> {
        let total = self.epochs as f64;
        if !(t.is_finite() && (0.0..=total).contains(&t)) {
            return Err(Error::InvalidArgument(format!(
                "schedule position {t} outside [0, {total}]"
            )));
        }
        let warm = self.warmup_epochs as f64;
        if t <= warm && self.warmup_epochs > 0 {
            return Ok(self.lr_start + (self.lr_peak - self.lr_start) * (t / warm));
        }
        let u = (t - warm) / (total - warm);
        Ok(if u <= 0.0 {
            self.lr_peak
        } else if u >= 1.0 {
            self.lr_end
        } else {
            (self.lr_peak.ln() * (1.0 - u) + self.lr_end.ln() * u).exp()
        })
    }
}

/// SGD with classic momentum and decoupled-from-nothing L2 weight decay:
/// v = momentum * v + g + weight_decay * theta; theta -= lr * v.
/// Velocity buffers are keyed by parameter path and created on first use,
/// so parameters that join late (unfrozen stages) start from v = 0.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Missing
    /// gradients (frozen parameters) are skipped; a gradient without a
    /// matching parameter is an error.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        let mut used = 0usize;
        for (name, theta) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            used += 1;
            if g.shape() != theta.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..v.numel() {
                let vd = self.momentum * v.data()[i]
                    + g.data()[i]
                    + self.weight_decay * theta.data()[i];
                v.data_mut()[i] = vd;
                theta.data_mut()[i] -= lr * vd;
            }
        }
        if used < grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradient entries have no matching parameter",
                grads.len() - used
            )));
        }
        Ok(())
    }
}

/// Anything that can hand out frames with ground-truth boxes.
pub trait PairSource {
    fn num_frames(&self) -> usize;
    fn frame(&self, idx: usize) -> &Frame;
    fn gt(&self, idx: usize) -> &BoundingBox;
}

/// In-memory sequence, the simplest source.
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
}

impl MemorySource {
    pub fn new(frames: Vec<Frame>, boxes: Vec<BoundingBox>) -> Result<Self> {
        if frames.len() != boxes.len() {
            return Err(Error::CountMismatch {
                left: frames.len(),
                left_name: "frames".into(),
                right: boxes.len(),
                right_name: "boxes".into(),
            });
        }
        Ok(MemorySource { frames, boxes })
    }
}

impl PairSource for MemorySource {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }
    fn frame(&self, idx: usize) -> &Frame {
        &self.frames[idx]
    }
    fn gt(&self, idx: usize) -> &BoundingBox {
        &self.boxes[idx]
    }
}

/// One training example: both patches plus the ground truth expressed in
/// each patch's coordinates.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub template: Tensor,
    pub search: Tensor,
    pub gt_in_template: BoundingBox,
    pub gt_in_search: BoundingBox,
}

/// Deterministic core of pair construction: template crop about the
/// template-frame box, search crop about the search-frame box displaced by
/// (dx, dy) frame pixels and scaled by `ds`. Separated from the sampling so
/// the displacement arithmetic can be checked with chosen offsets.
pub fn build_pair(
    template_frame: &Frame,
    template_gt: &BoundingBox,
    search_frame: &Frame,
    search_gt: &BoundingBox,
    crop: &CropSpec,
    dx: f64,
    dy: f64,
    ds: f64,
) -> Result<TrainingPair> {
    let tpatch = crop_patch(
        template_frame,
        template_gt,
        crop.context_amount,
        crop.template_size,
    )?;
    let side = crop.search_side(search_gt) * ds;
    let spatch = crop_square(
        search_frame,
        (search_gt.cx + dx, search_gt.cy + dy),
        side,
        crop.search_size,
    )?;
    Ok(TrainingPair {
        gt_in_template: tpatch.box_to_patch(template_gt),
        gt_in_search: spatch.box_to_patch(search_gt),
        template: tpatch.pixels,
        search: spatch.pixels,
    })
}

/// Draws one pair from `source`: a template frame, a second frame at most
/// `max_gap` indices away, and jittered search-crop offsets. RNG draw order
/// is fixed (frame, gap, dx, dy, ds), so streams are reproducible.
pub fn sample_pair(
    source: &dyn PairSource,
    crop: &CropSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    let n = source.num_frames();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "pair sampling needs at least one frame".into(),
        ));
    }
    let i = rng.gen_range(0..n);
    let lo = i.saturating_sub(cfg.max_gap);
    let hi = (i + cfg.max_gap).min(n - 1);
    let j = rng.gen_range(lo..=hi);
    let dx = if cfg.shift_jitter > 0.0 {
        rng.gen_range(-cfg.shift_jitter..=cfg.shift_jitter)
    } else {
        0.0
    };
    let dy = if cfg.shift_jitter > 0.0 {
        rng.gen_range(-cfg.shift_jitter..=cfg.shift_jitter)
    } else {
        0.0
    };
    let ds = if cfg.scale_jitter > 0.0 {
        rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter).exp()
    } else {
        1.0
    };
    build_pair(
        source.frame(i),
        source.gt(i),
        source.frame(j),
        source.gt(j),
        crop,
        dx,
        dy,
        ds,
    )
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn apply_freeze_policy(model: &mut Model, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    model.backbone.unfreeze("all")?;
    if epoch < cfg.freeze_epochs {
        model.backbone.freeze("all")?;
    } else if !cfg.late_frozen_stages.is_empty() && cfg.late_frozen_stages != "none" {
        model.backbone.freeze(&cfg.late_frozen_stages)?;
    }
    Ok(())
}

/// Forward/backward on one pair; returns the per-pair loss and gradients.
fn pair_gradients(
    model: &mut Model,
    pair: &TrainingPair,
    crop: &CropSpec,
    weights: &LossWeights,
) -> Result<(HeadLoss, BTreeMap<String, Tensor>)> {
    let roi = model.template_roi(&pair.gt_in_template, crop.template_size)?;
    let grid = model.response_grid(crop.search_size, &roi)?;
    let labels = assign_labels(&pair.gt_in_search, &grid);
    let (out, cache) = model.forward_updating(&pair.template, &pair.search, &roi)?;
    let (loss, loss_grads) = head_loss(&out, &labels, *weights)?;
    let grads = model.backward(&cache, &loss_grads)?;
    Ok((loss, grads))
}

/// Writes the offending batch next to the checkpoints so a blown-up run can
/// be replayed, then reports which step died.
fn dump_bad_batch(
    out_dir: &Path,
    batch: &[TrainingPair],
    epoch: usize,
    step: usize,
    lr: f64,
    detail: &str,
) -> Result<PathBuf> {
    let dump = out_dir.join("abort_batch.ckpt");
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (k, p) in batch.iter().enumerate() {
        let gt_t = Tensor::from_vec(
            &[4],
            vec![
                p.gt_in_search.cx,
                p.gt_in_search.cy,
                p.gt_in_search.w,
                p.gt_in_search.h,
            ],
        )
        .expect("4-vector");
        entries.push((format!("pair{k}.template"), p.template.clone()));
        entries.push((format!("pair{k}.search"), p.search.clone()));
        entries.push((format!("pair{k}.gt_in_search"), gt_t));
    }
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_checkpoint(&dump, &refs)?;
    let mut note = fs::File::create(out_dir.join("abort_note.txt"))?;
    writeln!(
        note,
        "non-finite loss at epoch {} step {} (lr {lr}): {detail}\nbatch dumped to {}",
        epoch + 1,
        step + 1,
        dump.display()
    )?;
    Ok(dump)
}

/// Runs the full schedule: freeze policy per epoch, lr per step, gradients
/// averaged over the batch, one checkpoint per epoch plus `final.ckpt`, and
/// a `metrics.csv` with one "epoch,step,lr,total,cls,cen,reg" line per step
/// (epoch and step are 1-based in the log).
pub fn train(
    model: &mut Model,
    sources: &[&dyn PairSource],
    crop: &CropSpec,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    crop.validate()?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sequence".into()));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;

    // The data stream gets its own seed expansion so it never collides with
    // model initialization, which consumed a plain seed_from_u64 already.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let weights = LossWeights::default();

    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        apply_freeze_policy(model, cfg, epoch)?;
        for step in 0..cfg.steps_per_epoch {
            let t = epoch as f64 + step as f64 / cfg.steps_per_epoch as f64;
            let lr = cfg.lr_at(t)?;

            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let s = sources[rng.gen_range(0..sources.len())];
                batch.push(sample_pair(s, crop, cfg, &mut rng)?);
            }

            let mut sum_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut sum = HeadLoss {
                total: 0.0,
                cls: 0.0,
                cen: 0.0,
                reg: 0.0,
            };
            let mut failure: Option<String> = None;
            for pair in &batch {
                match pair_gradients(model, pair, crop, &weights) {
                    Ok((loss, grads)) => {
                        if !loss.total.is_finite() {
                            failure = Some(format!("loss components {loss:?}"));
                            break;
                        }
                        sum.total += loss.total;
                        sum.cls += loss.cls;
                        sum.cen += loss.cen;
                        sum.reg += loss.reg;
                        for (name, g) in grads {
                            match sum_grads.get_mut(&name) {
                                Some(acc) => acc.add_scaled_assign(&g, 1.0)?,
                                None => {
                                    sum_grads.insert(name, g);
                                }
                            }
                        }
                    }
                    Err(Error::NonFinite(msg)) => {
                        failure = Some(msg);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(detail) = failure {
                let dump = dump_bad_batch(out_dir, &batch, epoch, step, lr, &detail)?;
                return Err(Error::NonFinite(format!(
                    "training aborted at epoch {} step {}: {detail} (batch in {})",
                    epoch + 1,
                    step + 1,
                    dump.display()
                )));
            }

            let inv = 1.0 / cfg.batch_size as f64;
            for g in sum_grads.values_mut() {
                g.scale_assign(inv);
            }
            let mean = HeadLoss {
                total: sum.total * inv,
                cls: sum.cls * inv,
                cen: sum.cen * inv,
                reg: sum.reg * inv,
            };
            if first_loss.is_nan() {
                first_loss = mean.total;
            }
            last_loss = mean.total;

            let mut params = model.collect_params_mut();
            sgd.step(&mut params, &sum_grads, lr)?;

            writeln!(
                metrics,
                "{},{},{},{},{},{},{}",
                epoch + 1,
                step + 1,
                lr,
                mean.total,
                mean.cls,
                mean.cen,
                mean.reg
            )?;
        }
        let path = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save_model(&path, model)?;
        checkpoints.push(path);
    }

    let final_path = out_dir.join("final.ckpt");
    save_model(&final_path, model)?;
    Ok(TrainReport {
        checkpoints,
        final_checkpoint: final_path,
        metrics_path,
        first_loss,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn noise_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Frame::new(h, w);
        for v in f.rgb.iter_mut() {
            *v = rng.gen();
        }
        f
    }

    fn tiny_source(n: usize, seed: u64) -> MemorySource {
        let mut frames = Vec::new();
        let mut boxes = Vec::new();
        for k in 0..n {
            let mut f = noise_frame(160, 200, seed + k as u64);
            let b = BoundingBox::new(100.0 + k as f64, 80.0, 40.0, 28.0).unwrap();
            // Paint a gradient block: interior pixels encode their position
            // inside the target, so cells near an edge look different from
            // central ones and regression has something to key on.
            let (r0, r1) = (b.y0().max(0.0) as usize, (b.y1() as usize).min(160));
            let (c0, c1) = (b.x0().max(0.0) as usize, (b.x1() as usize).min(200));
            for r in r0..r1 {
                let fr = (r - r0) as f64 / (r1 - r0).max(1) as f64;
                for c in c0..c1 {
                    let fc = (c - c0) as f64 / (c1 - c0).max(1) as f64;
                    f.set(r, c, 0, (60.0 + 180.0 * fr) as u8);
                    f.set(r, c, 1, (220.0 - 160.0 * fc) as u8);
                    f.set(r, c, 2, (40.0 + 200.0 * fr * fc) as u8);
                }
            }
            frames.push(f);
            boxes.push(b);
        }
        MemorySource::new(frames, boxes).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            channels: 4,
            embed_channels: 4,
            head_hidden: 4,
            ..ModelConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn lr_anchors_are_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0.0).unwrap(), 0.005);
        assert_eq!(cfg.lr_at(5.0).unwrap(), 0.01);
        assert_eq!(cfg.lr_at(20.0).unwrap(), 0.0005);
        assert!(cfg.lr_at(-0.1).is_err());
        assert!(cfg.lr_at(20.1).is_err());
        assert!(cfg.lr_at(f64::NAN).is_err());
    }

    #[test]
    fn lr_segments_are_continuous_and_monotone() {
        let cfg = TrainConfig::default();
        // Joint continuity.
        approx(cfg.lr_at(5.0 - 1e-9).unwrap(), 0.01, 1e-10);
        approx(cfg.lr_at(5.0 + 1e-9).unwrap(), 0.01, 1e-10);
        // Monotone up then down.
        let mut prev = 0.0;
        for k in 0..=50 {
            let v = cfg.lr_at(5.0 * k as f64 / 50.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        for k in 0..=50 {
            let v = cfg.lr_at(5.0 + 15.0 * k as f64 / 50.0).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        // Closed form halfway down the decay.
        let expect = 0.01 * (0.0005f64 / 0.01).powf(0.5);
        approx(cfg.lr_at(12.5).unwrap(), expect, 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let good = TrainConfig::default();
        good.validate().unwrap();
        assert!(TrainConfig { warmup_epochs: 20, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { lr_peak: 0.0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..good }.validate().is_err());
    }

    #[test]
    fn unjittered_same_frame_pair_is_centered() {
        let src = tiny_source(1, 3);
        let crop = CropSpec::default();
        let pair = build_pair(
            src.frame(0), src.gt(0), src.frame(0), src.gt(0), &crop, 0.0, 0.0, 1.0,
        )
        .unwrap();
        approx(pair.gt_in_search.cx, 287.0 / 2.0, 1e-9);
        approx(pair.gt_in_search.cy, 287.0 / 2.0, 1e-9);
        approx(pair.gt_in_template.cx, 127.0 / 2.0, 1e-9);
        approx(pair.gt_in_template.cy, 127.0 / 2.0, 1e-9);
        assert_eq!(pair.template.shape(), &[127, 127, 3]);
        assert_eq!(pair.search.shape(), &[287, 287, 3]);
    }

    #[test]
    fn shift_jitter_displaces_gt_by_scaled_offset() {
        let src = tiny_source(1, 4);
        let crop = CropSpec::default();
        let centered = build_pair(
            src.frame(0), src.gt(0), src.frame(0), src.gt(0), &crop, 0.0, 0.0, 1.0,
        )
        .unwrap();
        let shifted = build_pair(
            src.frame(0), src.gt(0), src.frame(0), src.gt(0), &crop, 10.0, 0.0, 1.0,
        )
        .unwrap();
        // Crop center moved +10 px in the frame, so the target appears
        // 10 * scale patch pixels to the left of center.
        let scale = 287.0 / crop.search_side(src.gt(0));
        approx(
            centered.gt_in_search.cx - shifted.gt_in_search.cx,
            10.0 * scale,
            1e-9,
        );
        approx(shifted.gt_in_search.cy, centered.gt_in_search.cy, 1e-12);
        // Scale jitter grows the crop, shrinking the target in patch pixels.
        let zoomed = build_pair(
            src.frame(0), src.gt(0), src.frame(0), src.gt(0), &crop, 0.0, 0.0, 1.25,
        )
        .unwrap();
        approx(zoomed.gt_in_search.w, centered.gt_in_search.w / 1.25, 1e-9);
    }

    #[test]
    fn fixed_seed_reproduces_the_pair_stream() {
        let src = tiny_source(6, 9);
        let crop = CropSpec::default();
        let cfg = TrainConfig { max_gap: 3, ..TrainConfig::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let a = sample_pair(&src, &crop, &cfg, &mut r1).unwrap();
            let b = sample_pair(&src, &crop, &cfg, &mut r2).unwrap();
            assert_eq!(a.template.data(), b.template.data());
            assert_eq!(a.search.data(), b.search.data());
            assert_eq!(a.gt_in_search, b.gt_in_search);
        }
        assert!(sample_pair(
            &MemorySource::new(vec![], vec![]).unwrap(),
            &crop,
            &cfg,
            &mut r1
        )
        .is_err());
    }

    #[test]
    fn sgd_matches_hand_computed_updates() {
        // No momentum, no decay: plain theta -= lr * g.
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut theta = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap());
        {
            let mut params = vec![("w".to_string(), &mut theta)];
            sgd.step(&mut params, &grads, 0.1).unwrap();
        }
        approx(theta.data()[0], 1.0 - 0.05, 1e-15);
        approx(theta.data()[1], -2.0 - 0.1, 1e-15);

        // Momentum accumulates: v1 = g, v2 = mu*g + g.
        let mut sgd = Sgd::new(0.5, 0.0);
        let mut theta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        for _ in 0..2 {
            let mut params = vec![("w".to_string(), &mut theta)];
            sgd.step(&mut params, &grads, 1.0).unwrap();
        }
        // Steps: -1.0 then -(0.5 + 1.0).
        approx(theta.data()[0], -2.5, 1e-15);

        // Weight decay folds into the velocity before the step.
        let mut sgd = Sgd::new(0.0, 0.1);
        let mut theta = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::from_vec(&[1], vec![0.0]).unwrap())].into();
        let mut params = vec![("w".to_string(), &mut theta)];
        sgd.step(&mut params, &grads, 1.0).unwrap();
        approx(theta.data()[0], 2.0 - 0.2, 1e-15);

        // Unknown gradient name is an error.
        let mut grads = BTreeMap::new();
        grads.insert("ghost".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut params = vec![("w".to_string(), &mut theta)];
        assert!(sgd.step(&mut params, &grads, 1.0).is_err());
    }

    #[test]
    fn repeated_pair_overfits() {
        let mut model = Model::new(
            ModelConfig {
                channels: 8,
                embed_channels: 8,
                head_hidden: 16,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let src = tiny_source(1, 7);
        let crop = CropSpec::default();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 1,
            steps_per_epoch: 30,
            max_gap: 0,
            shift_jitter: 0.0,
            scale_jitter: 0.0,
            freeze_epochs: 0,
            late_frozen_stages: "none".into(),
            lr_start: 0.05,
            lr_peak: 0.1,
            lr_end: 0.09,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&mut model, &[&src], &crop, &cfg, dir.path()).unwrap();
        assert!(
            report.last_loss <= 0.5 * report.first_loss,
            "loss {} -> {}",
            report.first_loss,
            report.last_loss
        );
        assert!(report.final_checkpoint.exists());
        assert_eq!(report.checkpoints.len(), 2);
    }

    #[test]
    fn frozen_phase_leaves_backbone_untouched() {
        let mut model = tiny_model(2);
        let before: Vec<(String, Tensor)> = model
            .collect_state()
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let src = tiny_source(2, 5);
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 1,
            steps_per_epoch: 3,
            freeze_epochs: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &[&src], &CropSpec::default(), &cfg, dir.path()).unwrap();

        let after = model.collect_state();
        let mut head_changed = false;
        for (name, t) in &after {
            if let Some((_, b)) = before.iter().find(|(n, _)| n == name) {
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same, "{name} moved during the frozen phase");
            } else if name.starts_with("head.") {
                head_changed = true;
            }
        }
        assert!(head_changed, "expected non-backbone parameters in the state");
    }

    #[test]
    fn same_seed_runs_produce_identical_checkpoints() {
        let crop = CropSpec::default();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            steps_per_epoch: 3,
            freeze_epochs: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let mut model = tiny_model(3);
            let src = tiny_source(3, 8);
            let dir = tempfile::tempdir().unwrap();
            let report = train(&mut model, &[&src], &crop, &cfg, dir.path()).unwrap();
            bytes.push(fs::read(&report.final_checkpoint).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn small_lr_steps_rarely_increase_the_loss() {
        let mut model = tiny_model(4);
        let src = tiny_source(1, 2);
        let crop = CropSpec::default();
        let pair = build_pair(
            src.frame(0), src.gt(0), src.frame(0), src.gt(0), &crop, 4.0, -3.0, 1.1,
        )
        .unwrap();
        let weights = LossWeights::default();
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut prev = f64::INFINITY;
        let mut violations = 0;
        for _ in 0..20 {
            let (loss, grads) = pair_gradients(&mut model, &pair, &crop, &weights).unwrap();
            if loss.total > prev + 1e-12 {
                violations += 1;
            }
            prev = loss.total;
            let mut params = model.collect_params_mut();
            sgd.step(&mut params, &grads, 1e-4).unwrap();
        }
        assert!(violations <= 2, "{violations} increases over 20 steps");
    }

    #[test]
    fn metric_log_lines_match_the_schedule() {
        let mut model = tiny_model(5);
        let src = tiny_source(2, 6);
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 1,
            steps_per_epoch: 4,
            freeze_epochs: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&mut model, &[&src], &CropSpec::default(), &cfg, dir.path()).unwrap();
        let text = fs::read_to_string(&report.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        for (k, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f.len(), 7, "line {line}");
            let epoch: usize = f[0].parse().unwrap();
            let step: usize = f[1].parse().unwrap();
            assert_eq!(epoch, k / 4 + 1);
            assert_eq!(step, k % 4 + 1);
            let lr: f64 = f[2].parse().unwrap();
            let t = (epoch - 1) as f64 + (step - 1) as f64 / 4.0;
            assert_eq!(lr, cfg.lr_at(t).unwrap());
            for v in &f[3..] {
                assert!(v.parse::<f64>().unwrap().is_finite());
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_a_dump() {
        let mut model = tiny_model(6);
        // Poison one classifier weight so the loss blows up immediately.
        for (name, t) in model.collect_state_mut() {
            if name == "head.cls_out.weight" {
                t.data_mut()[0] = f64::NAN;
            }
        }
        let src = tiny_source(1, 1);
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 1,
            steps_per_epoch: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut model, &[&src], &CropSpec::default(), &cfg, dir.path());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(dir.path().join("abort_batch.ckpt").exists());
        assert!(dir.path().join("abort_note.txt").exists());
    }
}
