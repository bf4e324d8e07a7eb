//! Reference implementations kept deliberately naive: plain nested loops
//! over flat indices, no shared code with the library's compute paths, so
//! the two can only agree by computing the same math.

#![allow(dead_code)]

use gatrack::gam::{GamConfig, GamParams, MaskingPolicy, SelectionMode};
use gatrack::geometry::TemplateROI;
use gatrack::numerics::{BatchNorm, Conv1x1, Mode, Tensor};

fn ref_linear(x: &[Vec<f64>], conv: &Conv1x1) -> Vec<Vec<f64>> {
    let (c_out, c_in) = (conv.weight.shape()[0], conv.weight.shape()[1]);
    let w = conv.weight.data();
    x.iter()
        .map(|row| {
            (0..c_out)
                .map(|k| {
                    let mut acc = match &conv.bias {
                        Some(b) => b.data()[k],
                        None => 0.0,
                    };
                    for j in 0..c_in {
                        acc += w[k * c_in + j] * row[j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn ref_batchnorm(x: &[Vec<f64>], bn: &BatchNorm, mode: Mode) -> Vec<Vec<f64>> {
    let c = bn.gamma.numel();
    let n = x.len() as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            for row in x {
                for k in 0..c {
                    mean[k] += row[k] / n;
                }
            }
            let mut var = vec![0.0; c];
            for row in x {
                for k in 0..c {
                    var[k] += (row[k] - mean[k]).powi(2) / n;
                }
            }
            (mean, var)
        }
        Mode::Infer => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
    };
    x.iter()
        .map(|row| {
            (0..c)
                .map(|k| {
                    bn.gamma.data()[k] * (row[k] - mean[k]) / (var[k] + bn.eps).sqrt()
                        + bn.beta.data()[k]
                })
                .collect()
        })
        .collect()
}

fn ref_transform(
    x: &[Vec<f64>],
    conv: &Conv1x1,
    bn: &BatchNorm,
    use_bn: bool,
    mode: Mode,
) -> Vec<Vec<f64>> {
    let lin = ref_linear(x, conv);
    if use_bn {
        ref_batchnorm(&lin, bn, mode)
    } else {
        lin
    }
}

fn ref_softmax_row(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = scores
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; scores.len()];
    let mut denom = 0.0;
    for i in 0..scores.len() {
        if mask[i] {
            out[i] = (scores[i] - m).exp();
            denom += out[i];
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    out
}

/// Whole-embedding reference: select, transform, score, normalize,
/// aggregate, fuse. Returns the flat `[hs * ws * 2 c_embed]` response.
pub fn ref_gam_forward(
    ft: &Tensor,
    fs: &Tensor,
    roi: &TemplateROI,
    params: &GamParams,
    cfg: GamConfig,
    mode: Mode,
) -> Vec<f64> {
    let (th, tw, c) = (ft.shape()[0], ft.shape()[1], ft.shape()[2]);
    let ftd = ft.data();

    let mut t_nodes: Vec<Vec<f64>> = Vec::new();
    let mut support: Vec<bool> = Vec::new();
    match cfg.selection {
        SelectionMode::Crop => {
            for r in roi.row0..=roi.row1 {
                for col in roi.col0..=roi.col1 {
                    t_nodes.push(ftd[(r * tw + col) * c..(r * tw + col + 1) * c].to_vec());
                    support.push(true);
                }
            }
        }
        SelectionMode::ZeroMask => {
            for r in 0..th {
                for col in 0..tw {
                    let inside = roi.mask[r * tw + col];
                    t_nodes.push(if inside {
                        ftd[(r * tw + col) * c..(r * tw + col + 1) * c].to_vec()
                    } else {
                        vec![0.0; c]
                    });
                    support.push(inside);
                }
            }
        }
    }
    if cfg.masking == MaskingPolicy::IncludeZeros {
        support = vec![true; support.len()];
    }

    let s_nodes: Vec<Vec<f64>> = fs.data().chunks(c).map(|x| x.to_vec()).collect();

    let ps = ref_transform(&s_nodes, &params.ws, &params.bn_s, params.use_bn, mode);
    let pt = ref_transform(&t_nodes, &params.wt, &params.bn_t, params.use_bn, mode);
    let tv = ref_transform(&t_nodes, &params.wv, &params.bn_v, params.use_bn, mode);
    let sv = ref_transform(&s_nodes, &params.wv, &params.bn_v, params.use_bn, mode);

    let cp = params.embed_channels();
    let mut out = Vec::with_capacity(s_nodes.len() * 2 * cp);
    for i in 0..s_nodes.len() {
        let scores: Vec<f64> = pt
            .iter()
            .map(|t| t.iter().zip(&ps[i]).map(|(a, b)| a * b).sum())
            .collect();
        let att = ref_softmax_row(&scores, &support);
        for k in 0..cp {
            let mut v = 0.0;
            for (j, a) in att.iter().enumerate() {
                v += a * tv[j][k];
            }
            out.push(v.max(0.0));
        }
        for k in 0..cp {
            out.push(sv[i][k].max(0.0));
        }
    }
    out
}

/// Valid cross-correlation per channel, channels outermost, flat indexing.
pub fn ref_dw_xcorr(ft: &Tensor, fs: &Tensor) -> Vec<f64> {
    let (th, tw, c) = (ft.shape()[0], ft.shape()[1], ft.shape()[2]);
    let (sh, sw) = (fs.shape()[0], fs.shape()[1]);
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let (t, s) = (ft.data(), fs.data());
    let mut out = vec![0.0; oh * ow * c];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for u in 0..th {
                    for v in 0..tw {
                        acc += t[(u * tw + v) * c + ch] * s[((i + u) * sw + j + v) * c + ch];
                    }
                }
                out[(i * ow + j) * c + ch] = acc;
            }
        }
    }
    out
}

/// Mean of the 21-point success curve, one threshold at a time.
pub fn ref_success_auc(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..21 {
        let t = k as f64 * 0.05;
        let hits = ious.iter().filter(|&&v| v >= t).count();
        total += hits as f64 / ious.len() as f64;
    }
    total / 21.0
}

pub fn ref_precision_at(errors: &[f64], px: f64) -> f64 {
    errors.iter().filter(|&&e| e <= px).count() as f64 / errors.len() as f64
}

/// (mean IoU, fraction strictly above 0.5, fraction strictly above 0.75).
pub fn ref_ao_sr(ious: &[f64]) -> (f64, f64, f64) {
    let n = ious.len() as f64;
    let ao = ious.iter().sum::<f64>() / n;
    let sr50 = ious.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    let sr75 = ious.iter().filter(|&&v| v > 0.75).count() as f64 / n;
    (ao, sr50, sr75)
}
