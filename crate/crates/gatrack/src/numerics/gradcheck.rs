//! Finite-difference gradient checking.
//!
//! Every differentiable op exposes a pure forward and a combined
//! forward/backward through [`DiffOp`]. The checker reduces the op outputs to
//! a scalar with a fixed random projection, then compares analytic gradients
//! against central differences coordinate by coordinate, over the inputs and
//! over every named parameter.

use crate::error::{Error, Result};
use crate::numerics::{conv1x1, masked_softmax, masked_softmax_backward, BatchNorm, Conv1x1, Mode, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub trait DiffOp {
    fn name(&self) -> &str;

    /// Pure forward pass, no state updates.
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;

    /// Forward plus backward for the given output gradients. Returns the
    /// outputs, one gradient per input, and gradients for every parameter.
    fn forward_backward(&self, inputs: &[Tensor], grad_outputs: &[Tensor]) -> Result<BackwardResult>;

    /// Current parameter tensors, keyed by stable names.
    fn param_values(&self) -> Vec<(String, Tensor)>;

    /// Replaces one parameter, used by the checker to form finite differences.
    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub outputs: Vec<Tensor>,
    pub input_grads: Vec<Tensor>,
    pub param_grads: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        err
    } else {
        err / denom
    }
}

fn projected_scalar<O: DiffOp>(op: &O, inputs: &[Tensor], proj: &[Tensor]) -> Result<f64> {
    let outs = op.forward(inputs)?;
    let mut s = 0.0;
    for (o, r) in outs.iter().zip(proj) {
        for (a, b) in o.data().iter().zip(r.data()) {
            s += a * b;
        }
    }
    Ok(s)
}

/// Checks analytic gradients of `op` at `inputs` against central differences
/// with step `eps`. Passes iff the worst relative error stays within `tol`.
pub fn grad_check<O: DiffOp + Clone>(
    op: &O,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let outs = op.forward(inputs)?;
    for (i, o) in outs.iter().enumerate() {
        if !o.all_finite() {
            return Err(Error::NonFinite(format!("{} output {}", op.name(), i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<Tensor> = outs
        .iter()
        .map(|o| Tensor::rand_uniform(o.shape(), -1.0, 1.0, &mut rng))
        .collect();

    let analytic = op.forward_backward(inputs, &proj)?;
    if analytic.input_grads.len() != inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: backward returned {} input grads for {} inputs",
            op.name(),
            analytic.input_grads.len(),
            inputs.len()
        )));
    }

    let mut max_err = 0.0f64;
    let mut coords = 0usize;

    let mut work: Vec<Tensor> = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = projected_scalar(op, &work, &proj)?;
            work[t].data_mut()[i] = orig - eps;
            let down = projected_scalar(op, &work, &proj)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.input_grads[t].data()[i];
            max_err = max_err.max(rel_err(a, numeric));
            coords += 1;
        }
    }

    for (name, value) in op.param_values() {
        let grad = analytic
            .param_grads
            .iter()
            .find(|(n, _)| n == &name)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| {
                Error::ShapeMismatch(format!("{}: no gradient reported for {}", op.name(), name))
            })?;
        let mut perturbed = value.clone();
        for i in 0..value.numel() {
            let orig = perturbed.data()[i];
            perturbed.data_mut()[i] = orig + eps;
            let mut op_up = op.clone();
            op_up.set_param(&name, perturbed.clone())?;
            let up = projected_scalar(&op_up, inputs, &proj)?;
            perturbed.data_mut()[i] = orig - eps;
            let mut op_down = op.clone();
            op_down.set_param(&name, perturbed.clone())?;
            let down = projected_scalar(&op_down, inputs, &proj)?;
            perturbed.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            max_err = max_err.max(rel_err(grad.data()[i], numeric));
            coords += 1;
        }
    }

    Ok(GradCheckReport {
        op: op.name().to_string(),
        max_rel_err: max_err,
        tol,
        coords_checked: coords,
        pass: max_err <= tol,
    })
}

/// [`Conv1x1`] as a checkable op over one input tensor.
#[derive(Debug, Clone)]
pub struct Conv1x1Op(pub Conv1x1);

impl DiffOp for Conv1x1Op {
    fn name(&self) -> &str {
        "conv1x1"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![conv1x1(&inputs[0], &self.0.weight, self.0.bias.as_ref())?])
    }

    fn forward_backward(&self, inputs: &[Tensor], grad_outputs: &[Tensor]) -> Result<BackwardResult> {
        let (y, cache) = self.0.forward(&inputs[0])?;
        let (dx, grads) = self.0.backward(&cache, &grad_outputs[0])?;
        let mut params = vec![("weight".to_string(), grads.weight)];
        if let Some(db) = grads.bias {
            params.push(("bias".to_string(), db));
        }
        Ok(BackwardResult {
            outputs: vec![y],
            input_grads: vec![dx],
            param_grads: params,
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![("weight".to_string(), self.0.weight.clone())];
        if let Some(b) = &self.0.bias {
            v.push(("bias".to_string(), b.clone()));
        }
        v
    }

    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match name {
            "weight" => self.0.weight = value,
            "bias" => self.0.bias = Some(value),
            _ => return Err(Error::InvalidArgument(format!("unknown param {name}"))),
        }
        Ok(())
    }
}

/// [`BatchNorm`] as a checkable op. The mode is part of the op so both the
/// batch-statistics path and the running-statistics path can be verified.
#[derive(Debug, Clone)]
pub struct BatchNormOp {
    pub bn: BatchNorm,
    pub mode: Mode,
}

impl DiffOp for BatchNormOp {
    fn name(&self) -> &str {
        "batchnorm"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![self.bn.forward(&inputs[0], self.mode)?.0])
    }

    fn forward_backward(&self, inputs: &[Tensor], grad_outputs: &[Tensor]) -> Result<BackwardResult> {
        let (y, cache) = self.bn.forward(&inputs[0], self.mode)?;
        let (dx, grads) = self.bn.backward(&cache, &grad_outputs[0])?;
        Ok(BackwardResult {
            outputs: vec![y],
            input_grads: vec![dx],
            param_grads: vec![
                ("gamma".to_string(), grads.gamma),
                ("beta".to_string(), grads.beta),
            ],
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gamma".to_string(), self.bn.gamma.clone()),
            ("beta".to_string(), self.bn.beta.clone()),
        ]
    }

    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match name {
            "gamma" => self.bn.gamma = value,
            "beta" => self.bn.beta = value,
            _ => return Err(Error::InvalidArgument(format!("unknown param {name}"))),
        }
        Ok(())
    }
}

/// Row-wise masked softmax over a `[rows, cols]` score tensor.
#[derive(Debug, Clone)]
pub struct MaskedSoftmaxOp {
    pub mask: Vec<bool>,
}

impl DiffOp for MaskedSoftmaxOp {
    fn name(&self) -> &str {
        "masked_softmax"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let x = &inputs[0];
        let cols = x.last_dim();
        if cols != self.mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs row width {}",
                self.mask.len(),
                cols
            )));
        }
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.lead_size() {
            let a = masked_softmax(x.row(r), &self.mask)?;
            out.row_mut(r).copy_from_slice(&a);
        }
        Ok(vec![out])
    }

    fn forward_backward(&self, inputs: &[Tensor], grad_outputs: &[Tensor]) -> Result<BackwardResult> {
        let outs = self.forward(inputs)?;
        let a = &outs[0];
        let mut dx = Tensor::zeros(a.shape());
        for r in 0..a.lead_size() {
            let dv = masked_softmax_backward(a.row(r), grad_outputs[0].row(r), &self.mask);
            dx.row_mut(r).copy_from_slice(&dv);
        }
        Ok(BackwardResult {
            outputs: outs,
            input_grads: vec![dx],
            param_grads: vec![],
        })
    }

    fn param_values(&self) -> Vec<(String, Tensor)> {
        vec![]
    }

    fn set_param(&mut self, name: &str, _value: Tensor) -> Result<()> {
        Err(Error::InvalidArgument(format!("unknown param {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x -> sum(x^2), whose gradient 2x is known in closed form.
    #[derive(Clone)]
    struct SumSquares {
        scale: f64,
    }

    impl DiffOp for SumSquares {
        fn name(&self) -> &str {
            "sum_squares"
        }

        fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            let s: f64 = inputs[0].data().iter().map(|v| v * v).sum();
            Ok(vec![Tensor::scalar(s)])
        }

        fn forward_backward(
            &self,
            inputs: &[Tensor],
            grad_outputs: &[Tensor],
        ) -> Result<BackwardResult> {
            let outs = self.forward(inputs)?;
            let g = grad_outputs[0].data()[0];
            let dx = inputs[0].map(|v| self.scale * 2.0 * v * g);
            Ok(BackwardResult {
                outputs: outs,
                input_grads: vec![dx],
                param_grads: vec![],
            })
        }

        fn param_values(&self) -> Vec<(String, Tensor)> {
            vec![]
        }

        fn set_param(&mut self, name: &str, _value: Tensor) -> Result<()> {
            Err(Error::InvalidArgument(name.into()))
        }
    }

    #[test]
    fn sum_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = grad_check(&SumSquares { scale: 1.0 }, &[x], 1e-5, 1e-4, 0).unwrap();
        assert!(report.pass, "max_rel_err {}", report.max_rel_err);
    }

    #[test]
    fn one_percent_backward_corruption_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = grad_check(&SumSquares { scale: 1.01 }, &[x], 1e-5, 1e-4, 0).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn conv1x1_layer_passes_with_and_without_bias() {
        for (seed, bias) in [(10u64, true), (11, false)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = Conv1x1::new(3, 5, bias, &mut rng);
            let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let report = grad_check(&Conv1x1Op(layer), &[x], 1e-5, 1e-4, seed).unwrap();
            assert!(report.pass, "bias={bias} max_rel_err {}", report.max_rel_err);
        }
    }

    #[test]
    fn batchnorm_passes_in_both_modes() {
        for mode in [Mode::Train, Mode::Infer] {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let mut bn = BatchNorm::new(3);
            bn.gamma = Tensor::randn(&[3], 1.0, &mut rng);
            bn.beta = Tensor::randn(&[3], 0.5, &mut rng);
            bn.running_mean = Tensor::randn(&[3], 0.5, &mut rng);
            bn.running_var = Tensor::rand_uniform(&[3], 0.5, 2.0, &mut rng);
            let x = Tensor::randn(&[7, 3], 1.0, &mut rng);
            let report = grad_check(&BatchNormOp { bn, mode }, &[x], 1e-5, 1e-4, 21).unwrap();
            assert!(report.pass, "{mode:?} max_rel_err {}", report.max_rel_err);
        }
    }

    #[test]
    fn masked_softmax_rows_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = Tensor::randn(&[4, 6], 1.5, &mut rng);
        let op = MaskedSoftmaxOp {
            mask: vec![true, false, true, true, false, true],
        };
        let report = grad_check(&op, &[x], 1e-5, 1e-4, 31).unwrap();
        assert!(report.pass, "max_rel_err {}", report.max_rel_err);
    }
}
