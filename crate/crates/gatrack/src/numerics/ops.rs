//! Per-cell linear maps, ReLU and masked softmax with their backward passes.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::Rng;

/// Applies a `[c_out, c_in]` weight (plus optional `[c_out]` bias) to every
/// cell of `x`, where a cell is one slice along the last axis. Equivalent to
/// a 1x1 convolution over any spatial arrangement of cells.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "conv1x1 weight must be [c_out, c_in], got {:?}",
            weight.shape()
        )));
    }
    let (c_out, c_in) = (weight.shape()[0], weight.shape()[1]);
    if x.last_dim() != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv1x1 input channels {} do not match weight c_in {}",
            x.last_dim(),
            c_in
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv1x1 bias must be [{}], got {:?}",
                c_out,
                b.shape()
            )));
        }
    }
    let rows = x.lead_size();
    let mut out_shape = x.shape().to_vec();
    if out_shape.is_empty() {
        out_shape.push(c_out);
    } else {
        *out_shape.last_mut().unwrap() = c_out;
    }
    let mut out = vec![0.0; rows * c_out];
    let w = weight.data();
    for r in 0..rows {
        let xin = x.row(r);
        let yrow = &mut out[r * c_out..(r + 1) * c_out];
        for o in 0..c_out {
            let wrow = &w[o * c_in..(o + 1) * c_in];
            let mut acc = 0.0;
            for k in 0..c_in {
                acc += wrow[k] * xin[k];
            }
            yrow[o] = acc;
        }
        if let Some(b) = bias {
            for o in 0..c_out {
                yrow[o] += b.data()[o];
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Gradients of [`conv1x1`] given the forward input and the output gradient.
/// Returns (input gradient, weight gradient, optional bias gradient).
pub fn conv1x1_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (c_out, c_in) = (weight.shape()[0], weight.shape()[1]);
    if dy.last_dim() != c_out || dy.lead_size() != x.lead_size() {
        return Err(Error::ShapeMismatch(format!(
            "conv1x1 backward: dy {:?} does not match x {:?} with weight {:?}",
            dy.shape(),
            x.shape(),
            weight.shape()
        )));
    }
    let rows = x.lead_size();
    let w = weight.data();
    let mut dx = vec![0.0; rows * c_in];
    let mut dw = vec![0.0; c_out * c_in];
    let mut db = vec![0.0; c_out];
    for r in 0..rows {
        let xin = x.row(r);
        let g = dy.row(r);
        let dxr = &mut dx[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let go = g[o];
            let wrow = &w[o * c_in..(o + 1) * c_in];
            let dwrow = &mut dw[o * c_in..(o + 1) * c_in];
            for k in 0..c_in {
                dxr[k] += go * wrow[k];
                dwrow[k] += go * xin[k];
            }
            db[o] += go;
        }
    }
    let dx = Tensor::from_vec(x.shape(), dx)?;
    let dw = Tensor::from_vec(&[c_out, c_in], dw)?;
    let db = if has_bias {
        Some(Tensor::from_vec(&[c_out], db)?)
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// A 1x1 convolution layer owning its parameters.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Conv1x1Cache {
    pub x: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conv1x1Grads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1x1 {
    /// Fan-in scaled normal init, zero bias.
    pub fn new<R: Rng>(c_in: usize, c_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / c_in as f64).sqrt();
        Conv1x1 {
            weight: Tensor::randn(&[c_out, c_in], std, rng),
            bias: if bias {
                Some(Tensor::zeros(&[c_out]))
            } else {
                None
            },
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.set2(i, i, 1.0);
        }
        Conv1x1 {
            weight: w,
            bias: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv1x1Cache)> {
        let y = conv1x1(x, &self.weight, self.bias.as_ref())?;
        Ok((y, Conv1x1Cache { x: x.clone() }))
    }

    pub fn backward(&self, cache: &Conv1x1Cache, dy: &Tensor) -> Result<(Tensor, Conv1x1Grads)> {
        let (dx, dw, db) = conv1x1_backward(&cache.x, &self.weight, self.bias.is_some(), dy)?;
        Ok((
            dx,
            Conv1x1Grads {
                weight: dw,
                bias: db,
            },
        ))
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// dx = dy where the forward input was strictly positive, 0 elsewhere.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu backward {:?} vs {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Softmax over the entries of `v` whose mask bit is set. Masked-out entries
/// come back as exact zeros; the max of the unmasked entries is subtracted
/// before exponentiation so large scores cannot overflow.
pub fn masked_softmax(v: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if v.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "masked_softmax values {} vs mask {}",
            v.len(),
            mask.len()
        )));
    }
    let mut m = f64::NEG_INFINITY;
    for (x, &keep) in v.iter().zip(mask) {
        if keep && *x > m {
            m = *x;
        }
    }
    if m == f64::NEG_INFINITY {
        return Err(Error::EmptyTemplateNodeSet);
    }
    let mut out = vec![0.0; v.len()];
    let mut denom = 0.0;
    for i in 0..v.len() {
        if mask[i] {
            let e = (v[i] - m).exp();
            out[i] = e;
            denom += e;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

/// Backward pass of [`masked_softmax`] given its output `a` and the output
/// gradient `da`. Masked-out positions receive zero input gradient.
pub fn masked_softmax_backward(a: &[f64], da: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut dot = 0.0;
    for i in 0..a.len() {
        if mask[i] {
            dot += a[i] * da[i];
        }
    }
    let mut dv = vec![0.0; a.len()];
    for i in 0..a.len() {
        if mask[i] {
            dv[i] = a[i] * (da[i] - dot);
        }
    }
    dv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn conv1x1_identity_weight_passes_input_through() {
        let x = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let id = Conv1x1::identity(3);
        let y = conv1x1(&x, &id.weight, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1x1_zero_weight_with_bias_is_constant() {
        let x = Tensor::from_vec(&[5, 2], vec![3.0; 10]).unwrap();
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv1x1(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        for r in 0..5 {
            assert_eq!(y.row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn conv1x1_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[6], 1.0, &mut rng);
        let y = conv1x1(&x, &w, Some(&b)).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for o in 0..6 {
                    let mut want = b.data()[o];
                    for k in 0..5 {
                        want += w.at2(o, k) * x.at3(i, j, k);
                    }
                    assert_close(y.at3(i, j, o), want, 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 5]);
        assert!(conv1x1(&x, &w, None).is_err());
    }

    #[test]
    fn masked_softmax_uniform_over_equal_unmasked_entries() {
        let v = [0.3, 0.3, 0.3, 9.9];
        let mask = [true, true, true, false];
        let a = masked_softmax(&v, &mask).unwrap();
        for i in 0..3 {
            assert_close(a[i], 1.0 / 3.0, 1e-12);
        }
        assert_eq!(a[3], 0.0);
    }

    #[test]
    fn masked_softmax_single_survivor_gets_probability_one() {
        let v = [5.0, -2.0, 0.0];
        let mask = [false, true, false];
        let a = masked_softmax(&v, &mask).unwrap();
        assert_eq!(a, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_log_scores_give_proportional_weights() {
        let v = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let mask = [true; 3];
        let a = masked_softmax(&v, &mask).unwrap();
        assert_close(a[0], 1.0 / 6.0, 1e-12);
        assert_close(a[1], 2.0 / 6.0, 1e-12);
        assert_close(a[2], 3.0 / 6.0, 1e-12);
    }

    #[test]
    fn masked_softmax_all_masked_is_an_error() {
        let err = masked_softmax(&[1.0, 2.0], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("empty template node set"));
    }

    #[test]
    fn masked_softmax_survives_huge_scores() {
        let a = masked_softmax(&[1e9, 1e9 - 1.0], &[true, true]).unwrap();
        assert!(a.iter().all(|p| p.is_finite()));
        assert_close(a[0] + a[1], 1.0, 1e-12);
    }

    proptest! {
        #[test]
        fn masked_softmax_sums_to_one_and_ignores_shift(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = (0..vals.len()).map(|_| rng.gen_bool(0.7)).collect();
            if !mask.iter().any(|&b| b) {
                mask[0] = true;
            }
            let a = masked_softmax(&vals, &mask).unwrap();
            let sum: f64 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let b = masked_softmax(&shifted, &mask).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for (i, &keep) in mask.iter().enumerate() {
                if !keep {
                    prop_assert_eq!(a[i], 0.0);
                }
            }
        }

        #[test]
        fn conv1x1_is_linear_in_its_input(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let y = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
            let mut xs = x.clone();
            xs.add_scaled_assign(&y, alpha).unwrap();
            let lhs = conv1x1(&xs, &w, None).unwrap();
            let mut rhs = conv1x1(&x, &w, None).unwrap();
            rhs.add_scaled_assign(&conv1x1(&y, &w, None).unwrap(), alpha).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
