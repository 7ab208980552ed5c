//! Training harness: Adam with decoupled weight decay, the linear
//! warmup/decay schedule, gradient clipping, the pretrain and finetune
//! loops, loss/perplexity reporting, and bit-exact checkpoints.

mod checkpoint;
mod loops;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use loops::{
    finetune, mlm_eval_loss, predict_contact_scores, predict_seq_classes, predict_token_classes,
    predict_values, pretrain, TrainOptions,
};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to
/// zero at `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 || self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "schedule needs 1 <= warmup ({}) <= total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak.is_finite() && self.peak >= 0.0) {
            return Err(Error::Config(format!("peak learning rate {} invalid", self.peak)));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0 <= step <= total): a ramp 0 -> peak over
/// the warmup segment, then a straight line peak -> 0 at total.
pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    let (w, t) = (schedule.warmup_steps, schedule.total_steps);
    if step <= w {
        schedule.peak * step as f64 / w as f64
    } else if step >= t {
        0.0
    } else {
        schedule.peak * (t - step) as f64 / (t - w) as f64
    }
}

/// Perplexity of a mean cross-entropy loss.
pub fn ppl(loss: f64) -> f64 {
    loss.exp()
}

/// Adam hyperparameters. Decay is decoupled (applied directly to the
/// parameter, not through the moments).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment per parameter plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T: Scalar = f32> {
    pub t: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

/// Weight decay applies to weight matrices and embeddings only; biases
/// and layer-norm parameters are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.starts_with("embed.")
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in g {
            sq += x.to_f64() * x.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for x in g {
                *x = *x * s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam step over `names`. Each named parameter must
/// have a gradient; moments are created lazily and updated even when
/// the learning rate is zero (parameters are then untouched exactly).
pub fn adam_step<T: Scalar>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
    names: &[String],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for name in names {
        let grad = grads.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no gradient for parameter '{name}'"))
        })?;
        let param = params.get_mut(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no parameter named '{name}'"))
        })?;
        if grad.len() != param.numel() {
            return Err(Error::Shape {
                op: "adam_step",
                details: format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    grad.len(),
                    param.numel()
                ),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
        let wd = if decays(name) { hyper.weight_decay } else { 0.0 };
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i].to_f64();
            let mi = hyper.beta1 * m[i].to_f64() + (1.0 - hyper.beta1) * g;
            let vi = hyper.beta2 * v[i].to_f64() + (1.0 - hyper.beta2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            if lr != 0.0 {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps) + wd * data[i].to_f64();
                data[i] = T::from_f64(data[i].to_f64() - lr * update);
            }
        }
    }
    Ok(())
}

/// One periodic evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ppl: f64,
    pub seconds: f64,
}

/// Evaluation history of a run. Rows always satisfy ppl = exp(loss)
/// exactly as computed by [`ppl`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    pub fn push(&mut self, step: usize, lr: f64, loss: f64, seconds: f64) {
        self.rows.push(ReportRow { step, lr, loss, ppl: ppl(loss), seconds });
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Header plus one `step,lr,loss,ppl,seconds` line per row. Float
    /// columns use shortest-roundtrip formatting, so parsing the text
    /// back recovers the exact values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,ppl,seconds\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.loss, r.ppl, r.seconds));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, value: f32) -> IndexMap<String, Tensor<f32>> {
        let mut params = IndexMap::new();
        params.insert(name.to_string(), Tensor::new(vec![1], vec![value]).unwrap());
        params
    }

    fn scalar_grad(name: &str, g: f32) -> IndexMap<String, Vec<f32>> {
        let mut grads = IndexMap::new();
        grads.insert(name.to_string(), vec![g]);
        grads
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        // With m-hat = g and v-hat = g*g, the first update is
        // -lr * g / (|g| + eps), essentially -lr * sign(g).
        let mut params = scalar_param("x.b", 0.0);
        let grads = scalar_grad("x.b", 4.0);
        let mut state = OptimizerState::default();
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        adam_step(&mut params, &grads, &mut state, &["x.b".into()], 0.1, &hyper).unwrap();
        let w = params["x.b"].data()[0];
        assert!((w - (-0.1)).abs() < 1e-6, "got {w}");
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters_unchanged() {
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut params = scalar_param("x.b", 0.7);
        let mut state = OptimizerState::default();
        adam_step(&mut params, &scalar_grad("x.b", 0.0), &mut state, &["x.b".into()], 0.1, &hyper)
            .unwrap();
        assert_eq!(params["x.b"].data()[0], 0.7);

        let mut params = scalar_param("x.w", 0.7);
        let mut state = OptimizerState::default();
        adam_step(&mut params, &scalar_grad("x.w", 3.0), &mut state, &["x.w".into()], 0.0, &AdamHyper::default())
            .unwrap();
        assert_eq!(params["x.w"].data()[0], 0.7, "lr 0 must be an exact no-op");
        assert!(state.m["x.w"][0] != 0.0, "moments still accumulate");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // d(w^2)/dw = 2w; |w| should shrink well below 0.1 from 1.0.
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut params = scalar_param("x.b", 1.0);
        let mut state = OptimizerState::default();
        for _ in 0..500 {
            let w = params["x.b"].data()[0];
            let grads = scalar_grad("x.b", 2.0 * w);
            adam_step(&mut params, &grads, &mut state, &["x.b".into()], 0.01, &hyper).unwrap();
        }
        let w = params["x.b"].data()[0];
        assert!(w.abs() < 0.1, "w = {w}");
    }

    #[test]
    fn missing_gradient_names_the_tensor() {
        let mut params = scalar_param("embed.token", 1.0);
        let grads: IndexMap<String, Vec<f32>> = IndexMap::new();
        let mut state = OptimizerState::default();
        let err = adam_step(
            &mut params,
            &grads,
            &mut state,
            &["embed.token".into()],
            0.1,
            &AdamHyper::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("embed.token"), "{err}");
    }

    #[test]
    fn decay_applies_to_weights_but_not_norms_or_biases() {
        assert!(decays("layer0.attn.q.w"));
        assert!(decays("embed.token"));
        assert!(!decays("layer0.attn.q.b"));
        assert!(!decays("layer0.attn.ln.gamma"));
        assert!(!decays("final_ln.beta"));
        assert!(!decays("mlm.bias"));

        // With zero gradient, any movement comes from decay alone.
        let hyper = AdamHyper::default();
        let mut params = scalar_param("x.w", 1.0);
        let mut state = OptimizerState::default();
        adam_step(&mut params, &scalar_grad("x.w", 0.0), &mut state, &["x.w".into()], 0.1, &hyper)
            .unwrap();
        let w = params["x.w"].data()[0];
        assert!((w - (1.0 - 0.1 * 0.01)).abs() < 1e-7, "decayed to {w}");
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = Schedule { peak: 2.0, warmup_steps: 100, total_steps: 1100 };
        s.validate().unwrap();
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(100, &s), 2.0);
        assert_eq!(lr_at(50, &s), 1.0);
        // Midpoint of (warmup + total) / 2 sits halfway down the decay.
        assert!((lr_at(600, &s) - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(1100, &s), 0.0);
        assert!(Schedule { peak: 1.0, warmup_steps: 0, total_steps: 5 }.validate().is_err());
        assert!(Schedule { peak: 1.0, warmup_steps: 10, total_steps: 5 }.validate().is_err());
    }

    #[test]
    fn perplexity_anchors() {
        assert!((ppl(1.318) - 3.736).abs() < 1e-3);
        assert_eq!(ppl(0.0), 1.0);
        assert!((ppl(30.0f64.ln()) - 30.0).abs() < 1e-6);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads: IndexMap<String, Vec<f32>> = IndexMap::new();
        grads.insert("a".into(), vec![3.0, 0.0]);
        grads.insert("b".into(), vec![4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert!((grads["a"][0] - 0.6).abs() < 1e-6);
        assert!((grads["b"][0] - 0.8).abs() < 1e-6);

        let mut small: IndexMap<String, Vec<f32>> = IndexMap::new();
        small.insert("a".into(), vec![0.3]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"][0], 0.3, "below-threshold gradients pass through");
    }

    #[test]
    fn report_rows_satisfy_the_exp_relation_and_roundtrip() {
        let mut report = TrainReport::default();
        report.push(0, 0.0, 30.0f64.ln(), 0.5);
        report.push(100, 1e-4, 1.318, 2.0);
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,lr,loss,ppl,seconds"));
        for (line, row) in lines.zip(&report.rows) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), row.step);
            assert_eq!(cols[2].parse::<f64>().unwrap(), row.loss);
            let ppl_col: f64 = cols[3].parse().unwrap();
            assert_eq!(ppl_col, row.loss.exp(), "exact exp relation");
        }
    }
}
