//! The full network: feature extractor, template-to-search embedding, head.
//!
//! The embedding is switchable between graph attention and the depth-wise
//! cross-correlation baseline, and the template area is either derived from
//! the first-frame box (target-aware) or a pre-fixed centered crop. Those
//! two switches, plus the softmax masking policy, cover the ablation matrix.

use std::collections::BTreeMap;

use crate::backbone::{FeatureExtractor, Toybone, ToyboneCache};
use crate::error::{Error, Result};
use crate::gam::{
    dw_xcorr, dw_xcorr_backward, gam_absorb, gam_backward, gam_forward_cached,
    select_template_nodes, BiasFlags, GamCache, GamConfig, GamParams, MaskingPolicy, ResponseMap,
    SelectionMode,
};
use crate::geometry::{grid_offset, BoundingBox, GridSpec, TemplateROI};
use crate::head::{Head, HeadCache, HeadConfig, HeadLossGrads, HeadOutput};
use crate::numerics::{Mode, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Gam,
    DwXcorr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSelection {
    /// Template area from the first-frame box via grid projection.
    TargetAware,
    /// Fixed centered crop of `prefixed_crop_size` cells regardless of the
    /// object's shape.
    PrefixedCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone output channels.
    pub channels: usize,
    /// Transformed (score/value) channel width of the attention embedding.
    pub embed_channels: usize,
    pub embedding: EmbeddingKind,
    pub selection: TemplateSelection,
    pub prefixed_crop_size: usize,
    /// Node handling of the attention embedding: crop to the ROI or keep the
    /// grid and zero the outside.
    pub template_nodes: SelectionMode,
    pub masking: MaskingPolicy,
    /// Batch norms after the embedding's 1x1 maps.
    pub batchnorm: bool,
    pub head_hidden: usize,
    pub head_tower_depth: usize,
    pub head_centerness: bool,
    pub ws_bias: bool,
    pub wt_bias: bool,
    pub wv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            embed_channels: 32,
            embedding: EmbeddingKind::Gam,
            selection: TemplateSelection::TargetAware,
            prefixed_crop_size: 7,
            template_nodes: SelectionMode::ZeroMask,
            masking: MaskingPolicy::Exclude,
            batchnorm: true,
            head_hidden: 32,
            head_tower_depth: 1,
            head_centerness: true,
            ws_bias: false,
            wt_bias: false,
            wv_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::Config(format!(
                "model.channels must be >= 4, got {}",
                self.channels
            )));
        }
        if self.embed_channels == 0 {
            return Err(Error::Config("model.embed_channels must be >= 1".into()));
        }
        if self.prefixed_crop_size == 0 {
            return Err(Error::Config(
                "model.prefixed_crop_size must be >= 1".into(),
            ));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("model.head_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn gam_config(&self) -> GamConfig {
        GamConfig {
            selection: self.template_nodes,
            masking: self.masking,
        }
    }

    /// Channel count the head sees.
    pub fn response_channels(&self) -> usize {
        match self.embedding {
            EmbeddingKind::Gam => 2 * self.embed_channels,
            EmbeddingKind::DwXcorr => self.channels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Toybone,
    pub gam: Option<GamParams>,
    pub head: Head,
    pub cfg: ModelConfig,
}

#[derive(Debug, Clone)]
pub enum EmbedCache {
    Gam(GamCache),
    Dwx {
        ft: Tensor,
        fs: Tensor,
        ft_crop: Tensor,
        roi: TemplateROI,
    },
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    pub template: ToyboneCache,
    pub search: ToyboneCache,
    pub embed: EmbedCache,
    pub head: HeadCache,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Toybone::new(cfg.channels, &mut rng)?;
        let gam = match cfg.embedding {
            EmbeddingKind::Gam => {
                let mut p = GamParams::new(
                    cfg.channels,
                    cfg.embed_channels,
                    BiasFlags {
                        ws: cfg.ws_bias,
                        wt: cfg.wt_bias,
                        wv: cfg.wv_bias,
                    },
                    &mut rng,
                );
                p.use_bn = cfg.batchnorm;
                Some(p)
            }
            EmbeddingKind::DwXcorr => None,
        };
        let head = Head::new(
            cfg.response_channels(),
            &HeadConfig {
                hidden: cfg.head_hidden,
                tower_depth: cfg.head_tower_depth,
                centerness: cfg.head_centerness,
            },
            &mut rng,
        )?;
        Ok(Model {
            backbone,
            gam,
            head,
            cfg,
        })
    }

    pub fn feat_size(&self, patch_size: usize) -> Result<usize> {
        self.backbone.feat_size(patch_size)
    }

    /// Centered grid of a backbone feature map for a given patch size.
    pub fn patch_grid(&self, patch_size: usize) -> Result<GridSpec> {
        let contract = self.backbone.contract();
        Ok(GridSpec::centered(
            patch_size,
            contract.feat_size(patch_size)?,
            contract.stride,
        ))
    }

    /// Template ROI on the template feature grid, per the selection switch.
    pub fn template_roi(
        &self,
        gt_in_patch: &BoundingBox,
        template_size: usize,
    ) -> Result<TemplateROI> {
        let grid = self.patch_grid(template_size)?;
        match self.cfg.selection {
            TemplateSelection::TargetAware => crate::geometry::project_box(gt_in_patch, &grid),
            TemplateSelection::PrefixedCrop => {
                TemplateROI::centered(self.cfg.prefixed_crop_size, grid.rows, grid.cols)
            }
        }
    }

    /// Grid the head's outputs live on, in search-patch coordinates. The
    /// correlation baseline shrinks the map by the kernel size and shifts
    /// the anchor to the kernel window's center.
    pub fn response_grid(&self, search_size: usize, roi: &TemplateROI) -> Result<GridSpec> {
        let contract = self.backbone.contract();
        let feat = contract.feat_size(search_size)?;
        let s = contract.stride;
        let base = grid_offset(search_size, feat, s);
        match self.cfg.embedding {
            EmbeddingKind::Gam => Ok(GridSpec {
                rows: feat,
                cols: feat,
                stride: s,
                offset_x: base,
                offset_y: base,
            }),
            EmbeddingKind::DwXcorr => {
                let (kh, kw) = (roi.rows(), roi.cols());
                if kh > feat || kw > feat {
                    return Err(Error::InvalidArgument(format!(
                        "correlation kernel {kh}x{kw} exceeds the {feat}x{feat} search grid"
                    )));
                }
                Ok(GridSpec {
                    rows: feat - kh + 1,
                    cols: feat - kw + 1,
                    stride: s,
                    offset_x: base + s as f64 * (kw as f64 - 1.0) / 2.0,
                    offset_y: base + s as f64 * (kh as f64 - 1.0) / 2.0,
                })
            }
        }
    }

    /// Embeds template features into search features.
    pub fn embed(
        &self,
        ft: &Tensor,
        fs: &Tensor,
        roi: &TemplateROI,
        mode: Mode,
    ) -> Result<(ResponseMap, EmbedCache)> {
        match (&self.cfg.embedding, &self.gam) {
            (EmbeddingKind::Gam, Some(params)) => {
                let (resp, cache) =
                    gam_forward_cached(ft, fs, roi, params, self.cfg.gam_config(), mode)?;
                Ok((resp, EmbedCache::Gam(cache)))
            }
            (EmbeddingKind::DwXcorr, _) => {
                let (ft_crop, _) = select_template_nodes(ft, roi, SelectionMode::Crop)?;
                let values = dw_xcorr(&ft_crop, fs)?;
                Ok((
                    ResponseMap { values },
                    EmbedCache::Dwx {
                        ft: ft.clone(),
                        fs: fs.clone(),
                        ft_crop,
                        roi: roi.clone(),
                    },
                ))
            }
            (EmbeddingKind::Gam, None) => Err(Error::Config(
                "model configured for attention embedding but has no embedding parameters".into(),
            )),
        }
    }

    /// Full forward on one template/search pair.
    pub fn forward(
        &self,
        template_patch: &Tensor,
        search_patch: &Tensor,
        roi: &TemplateROI,
        mode: Mode,
    ) -> Result<(HeadOutput, ModelCache)> {
        let (ft, template_cache) = self.backbone.forward(template_patch, mode)?;
        let (fs, search_cache) = self.backbone.forward(search_patch, mode)?;
        let (resp, embed_cache) = self.embed(&ft, &fs, roi, mode)?;
        let (out, head_cache) = self.head.forward(&resp, mode)?;
        Ok((
            out,
            ModelCache {
                template: template_cache,
                search: search_cache,
                embed: embed_cache,
                head: head_cache,
            },
        ))
    }

    /// Train-mode forward that folds batch statistics into running stats
    /// everywhere (frozen backbone stages excepted).
    pub fn forward_updating(
        &mut self,
        template_patch: &Tensor,
        search_patch: &Tensor,
        roi: &TemplateROI,
    ) -> Result<(HeadOutput, ModelCache)> {
        let (out, cache) = self.forward(template_patch, search_patch, roi, Mode::Train)?;
        self.backbone.absorb_into_running(&cache.template);
        self.backbone.absorb_into_running(&cache.search);
        if let (Some(gam), EmbedCache::Gam(c)) = (&mut self.gam, &cache.embed) {
            gam_absorb(gam, c);
        }
        self.head.absorb(&cache.head);
        Ok((out, cache))
    }

    /// Backward through head, embedding and both backbone passes, summing
    /// gradients by parameter name.
    pub fn backward(
        &self,
        cache: &ModelCache,
        loss_grads: &HeadLossGrads,
    ) -> Result<BTreeMap<String, Tensor>> {
        let (dresp, head_grads) = self.head.backward(
            &cache.head,
            &loss_grads.cls,
            loss_grads.cen.as_ref(),
            &loss_grads.reg,
        )?;
        let mut named: Vec<(String, Tensor)> = Vec::new();
        self.head.collect_grads("head", &head_grads, &mut named);

        let (dft, dfs) = match &cache.embed {
            EmbedCache::Gam(c) => {
                let params = self.gam.as_ref().ok_or_else(|| {
                    Error::Config("attention cache without embedding parameters".into())
                })?;
                let (gam_grads, dft, dfs) = gam_backward(params, c, &dresp)?;
                params.collect_grads("gam", &gam_grads, &mut named);
                (dft, dfs)
            }
            EmbedCache::Dwx {
                ft, fs, ft_crop, roi, ..
            } => {
                let (d_crop, dfs) = dw_xcorr_backward(ft_crop, fs, &dresp)?;
                let mut dft = Tensor::zeros(ft.shape());
                let c = ft.shape()[2];
                let cols = roi.cols();
                for r in 0..roi.rows() {
                    for col in 0..cols {
                        for ch in 0..c {
                            dft.set3(
                                roi.row0 + r,
                                roi.col0 + col,
                                ch,
                                d_crop.at3(r, col, ch),
                            );
                        }
                    }
                }
                (dft, dfs)
            }
        };

        let bt = self.backbone.backward(&cache.template, &dft)?;
        let bs = self.backbone.backward(&cache.search, &dfs)?;
        Toybone::collect_grads("backbone", &bt, &mut named);
        Toybone::collect_grads("backbone", &bs, &mut named);

        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, g) in named {
            match map.get_mut(&name) {
                Some(acc) => acc.add_scaled_assign(&g, 1.0)?,
                None => {
                    map.insert(name, g);
                }
            }
        }
        Ok(map)
    }

    /// Every tensor of the model, including running statistics, in a stable
    /// naming scheme ("backbone.stage1.conv.weight", "gam.ws.weight", ...).
    pub fn collect_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.backbone.collect_state("backbone", &mut out);
        if let Some(gam) = &self.gam {
            gam.collect_state("gam", &mut out);
        }
        self.head.collect_state("head", &mut out);
        out
    }

    pub fn collect_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.backbone.collect_state_mut("backbone", &mut out);
        if let Some(gam) = &mut self.gam {
            gam.collect_state_mut("gam", &mut out);
        }
        self.head.collect_state_mut("head", &mut out);
        out
    }

    /// Trainable parameters under the current freeze state.
    pub fn collect_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.backbone.collect_params_mut("backbone", &mut out);
        if let Some(gam) = &mut self.gam {
            gam.collect_params_mut("gam", &mut out);
        }
        self.head.collect_params_mut("head", &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_box;

    fn patch(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[size, size, 3], 0.0, 1.0, &mut rng)
    }

    fn small_cfg(embedding: EmbeddingKind) -> ModelConfig {
        ModelConfig {
            channels: 8,
            embed_channels: 8,
            embedding,
            head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn attention_model_shapes_line_up() {
        let model = Model::new(small_cfg(EmbeddingKind::Gam), 1).unwrap();
        let t = patch(127, 2);
        let s = patch(287, 3);
        let gt = BoundingBox::new(63.5, 63.5, 64.0, 32.0).unwrap();
        let roi = model.template_roi(&gt, 127).unwrap();
        let (out, _) = model.forward(&t, &s, &roi, Mode::Infer).unwrap();
        assert_eq!(out.cls.shape(), &[33, 33, 2]);
        assert_eq!(out.reg.shape(), &[33, 33, 4]);
        assert!(out.cen.is_some());
        let grid = model.response_grid(287, &roi).unwrap();
        assert_eq!((grid.rows, grid.cols), (33, 33));
        assert_eq!(grid.offset_x, 15.5);
    }

    #[test]
    fn correlation_model_shrinks_the_response_grid() {
        let mut cfg = small_cfg(EmbeddingKind::DwXcorr);
        cfg.selection = TemplateSelection::PrefixedCrop;
        cfg.prefixed_crop_size = 7;
        let model = Model::new(cfg, 4).unwrap();
        let t = patch(127, 5);
        let s = patch(287, 6);
        let gt = BoundingBox::new(63.5, 63.5, 60.0, 60.0).unwrap();
        let roi = model.template_roi(&gt, 127).unwrap();
        assert_eq!((roi.rows(), roi.cols()), (7, 7));
        let (out, _) = model.forward(&t, &s, &roi, Mode::Infer).unwrap();
        assert_eq!(out.cls.shape(), &[27, 27, 2]);
        let grid = model.response_grid(287, &roi).unwrap();
        assert_eq!((grid.rows, grid.cols), (27, 27));
        // 15.5 + 8 * 3 = anchor shift of half the 7-cell kernel
        assert_eq!(grid.offset_x, 39.5);
        // the shrunk grid stays centered in the patch
        let (right, _) = grid.anchor(0, grid.cols - 1);
        assert_eq!(right, 287.0 - 39.5);
    }

    #[test]
    fn target_aware_roi_follows_the_box_while_prefixed_stays_put() {
        let model = Model::new(small_cfg(EmbeddingKind::Gam), 7).unwrap();
        let grid = model.patch_grid(127).unwrap();
        let wide = BoundingBox::new(63.5, 63.5, 64.0, 32.0).unwrap();
        let roi = model.template_roi(&wide, 127).unwrap();
        assert_eq!(roi, project_box(&wide, &grid).unwrap());
        assert!(roi.cols() > roi.rows());

        let mut cfg = small_cfg(EmbeddingKind::Gam);
        cfg.selection = TemplateSelection::PrefixedCrop;
        cfg.prefixed_crop_size = 5;
        let fixed = Model::new(cfg, 8).unwrap();
        let roi_wide = fixed.template_roi(&wide, 127).unwrap();
        let tall = BoundingBox::new(63.5, 63.5, 20.0, 90.0).unwrap();
        let roi_tall = fixed.template_roi(&tall, 127).unwrap();
        assert_eq!(roi_wide, roi_tall);
        assert_eq!((roi_wide.rows(), roi_wide.cols()), (5, 5));
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg(EmbeddingKind::Gam);
        let a = Model::new(cfg.clone(), 11).unwrap();
        let b = Model::new(cfg.clone(), 11).unwrap();
        let c = Model::new(cfg, 12).unwrap();
        let t = patch(39, 13);
        let s = patch(63, 14);
        let gt = BoundingBox::new(19.5, 19.5, 20.0, 20.0).unwrap();
        let roi = a.template_roi(&gt, 39).unwrap();
        let ya = a.forward(&t, &s, &roi, Mode::Infer).unwrap().0;
        let yb = b.forward(&t, &s, &roi, Mode::Infer).unwrap().0;
        let yc = c.forward(&t, &s, &roi, Mode::Infer).unwrap().0;
        assert_eq!(ya.cls, yb.cls);
        assert_ne!(ya.cls, yc.cls);
    }

    #[test]
    fn state_names_are_unique_and_cover_params() {
        let mut model = Model::new(small_cfg(EmbeddingKind::Gam), 15).unwrap();
        let state = model.collect_state();
        let names: std::collections::BTreeSet<&str> =
            state.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), state.len(), "duplicate state names");
        let state_names: Vec<String> = state.iter().map(|(n, _)| n.clone()).collect();
        drop(state);
        for (name, _) in model.collect_params_mut() {
            assert!(state_names.contains(&name), "param {name} missing from state");
        }
    }

    #[test]
    fn backward_produces_gradients_for_every_trainable_param() {
        use crate::head::{assign_labels, head_loss, LossWeights};
        let mut model = Model::new(small_cfg(EmbeddingKind::Gam), 16).unwrap();
        let t = patch(39, 17);
        let s = patch(63, 18);
        let gt_t = BoundingBox::new(19.5, 19.5, 20.0, 20.0).unwrap();
        let roi = model.template_roi(&gt_t, 39).unwrap();
        let (out, cache) = model.forward(&t, &s, &roi, Mode::Train).unwrap();
        let grid = model.response_grid(63, &roi).unwrap();
        let gt_s = BoundingBox::new(31.5, 31.5, 24.0, 24.0).unwrap();
        let labels = assign_labels(&gt_s, &grid);
        assert!(labels.positive_count > 0);
        let (_, lg) = head_loss(&out, &labels, LossWeights::default()).unwrap();
        let grads = model.backward(&cache, &lg).unwrap();
        for (name, _) in model.collect_params_mut() {
            assert!(grads.contains_key(&name), "no gradient for {name}");
        }
    }

    #[test]
    fn correlation_backward_covers_its_params_too() {
        use crate::head::{assign_labels, head_loss, LossWeights};
        let mut cfg = small_cfg(EmbeddingKind::DwXcorr);
        cfg.selection = TemplateSelection::PrefixedCrop;
        cfg.prefixed_crop_size = 3;
        let mut model = Model::new(cfg, 19).unwrap();
        let t = patch(39, 20);
        let s = patch(63, 21);
        let gt_t = BoundingBox::new(19.5, 19.5, 20.0, 20.0).unwrap();
        let roi = model.template_roi(&gt_t, 39).unwrap();
        let (out, cache) = model.forward(&t, &s, &roi, Mode::Train).unwrap();
        let grid = model.response_grid(63, &roi).unwrap();
        let gt_s = BoundingBox::new(31.5, 31.5, 24.0, 24.0).unwrap();
        let labels = assign_labels(&gt_s, &grid);
        let (_, lg) = head_loss(&out, &labels, LossWeights::default()).unwrap();
        let grads = model.backward(&cache, &lg).unwrap();
        for (name, _) in model.collect_params_mut() {
            assert!(grads.contains_key(&name), "no gradient for {name}");
        }
        assert!(grads.keys().all(|k| !k.starts_with("gam.")));
    }
}
