//! Minibatch SGD with exponentially decaying learning rate, a linear momentum
//! ramp, and per-unit max-norm projection.
//!
//! With epoch index `t` (counted from 0):
//!
//! ```text
//! ε(t)  = ε₀ · f^t
//! p(t)  = (1 − t/T) · p_i + (t/T) · p_f   for t < T,   p_f afterwards
//! Δw    ← p(t) · Δw − (1 − p(t)) · ε(t) · ⟨∇w L⟩
//! w     ← w + Δw
//! ```
//!
//! after which every hidden unit whose incoming weight vector has squared
//! length above `l` is rescaled to squared length `l`.

use crate::error::{Error, Result};
use crate::network::{ParamRole, ParamSlot, UnitLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Initial learning rate ε₀.
    pub eps0: f64,
    /// Per-epoch learning-rate multiplier f.
    pub decay_f: f64,
    /// Initial momentum p_i.
    pub p_i: f64,
    /// Final momentum p_f.
    pub p_f: f64,
    /// Momentum ramp length T in epochs.
    pub ramp_epochs: usize,
    /// Maximum squared length `l` of a unit's incoming weights, if constrained.
    pub max_sq_norm: Option<f64>,
    pub batch_size: usize,
    /// Also constrain the output layer's incoming weights.
    pub constrain_output: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eps0: 10.0,
            decay_f: 0.998,
            p_i: 0.5,
            p_f: 0.99,
            ramp_epochs: 500,
            max_sq_norm: Some(15.0),
            batch_size: 100,
            constrain_output: false,
        }
    }
}

impl OptimizerConfig {
    /// Small constant learning rate, no norm constraint; for fine-tuning
    /// networks whose features should not be disturbed much.
    pub fn finetune() -> Self {
        OptimizerConfig {
            eps0: 1.0,
            decay_f: 1.0,
            max_sq_norm: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return bad(format!("eps0 must be positive, got {}", self.eps0));
        }
        if !(self.decay_f > 0.0 && self.decay_f <= 1.0) {
            return bad(format!("decay_f must be in (0, 1], got {}", self.decay_f));
        }
        for p in [self.p_i, self.p_f] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("momentum {p} outside [0, 1)"));
            }
        }
        if self.ramp_epochs < 1 {
            return bad("momentum ramp must last at least one epoch".into());
        }
        if let Some(l) = self.max_sq_norm {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("max squared norm must be positive, got {l}"));
            }
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }

    /// `ε₀ · f^t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        lr_at(self, t)
    }

    pub fn momentum_at(&self, t: usize) -> f64 {
        momentum_at(self, t)
    }
}

pub fn lr_at(config: &OptimizerConfig, t: usize) -> f64 {
    config.eps0 * config.decay_f.powi(t as i32)
}

/// Linear ramp from `p_i` at `t = 0` to `p_f` at `t = T`, constant after.
pub fn momentum_at(config: &OptimizerConfig, t: usize) -> f64 {
    if t >= config.ramp_epochs {
        return config.p_f;
    }
    let frac = t as f64 / config.ramp_epochs as f64;
    (1.0 - frac) * config.p_i + frac * config.p_f
}

/// Velocities (one per parameter tensor) and the epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
}

impl OptimizerState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            epoch: 0,
        }
    }
}

fn check_update_inputs(params: &[ParamSlot<'_>], state: &OptimizerState, grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if !p.value.same_shape(g) || !p.value.same_shape(v) {
            return Err(Error::shape(format!(
                "parameter {i}: shape {:?}, gradient {:?}, velocity {:?}",
                p.value.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("gradient {i} has non-finite entries")));
        }
    }
    Ok(())
}

/// One scheduled momentum step at epoch `t`, followed by max-norm
/// projection when configured.
pub fn sgd_update(
    params: &mut [ParamSlot<'_>],
    state: &mut OptimizerState,
    grads: &[&Tensor],
    config: &OptimizerConfig,
    t: usize,
) -> Result<()> {
    check_update_inputs(params, state, grads)?;
    let p = momentum_at(config, t);
    let step = (1.0 - p) * lr_at(config, t);
    for ((slot, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, dw), gi) in slot
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *dw = p * *dw - step * gi;
            *w += *dw;
        }
    }
    if let Some(l) = config.max_sq_norm {
        apply_max_norm(params, l, config.constrain_output);
    }
    Ok(())
}

/// Fixed-momentum step `v ← momentum·v − lr·⟨∂E/∂w⟩; w ← w + v` (written for
/// minimization, so the gradient enters with a minus sign).
pub fn simple_momentum_update(
    params: &mut [ParamSlot<'_>],
    state: &mut OptimizerState,
    grads: &[&Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_update_inputs(params, state, grads)?;
    for ((slot, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, dw), gi) in slot
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *dw = momentum * *dw - lr * gi;
            *w += *dw;
        }
    }
    Ok(())
}

/// Projects the incoming weights of every constrained unit.
pub fn apply_max_norm(params: &mut [ParamSlot<'_>], l: f64, constrain_output: bool) {
    for slot in params.iter_mut() {
        if let ParamRole::Weights { layout, hidden } = slot.role {
            if hidden || constrain_output {
                project_units(slot.value, layout, l);
            }
        }
    }
}

/// Squared length of every unit's incoming vector.
pub fn unit_sq_norms(w: &Tensor, layout: UnitLayout) -> Vec<f64> {
    match layout {
        UnitLayout::Columns => w.col_sq_norms().map(Tensor::into_data).unwrap_or_default(),
        UnitLayout::Chunks(len) => w
            .data()
            .chunks(len)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect(),
    }
}

fn sq_len(vals: &[f64]) -> f64 {
    vals.iter().map(|v| v * v).sum()
}

/// Rescales `vals` to squared length `l` if it exceeds `l`. The scale is
/// nudged down until the recomputed squared length is `≤ l`, so projecting
/// twice changes nothing.
fn shrink_to_bound(vals: &mut [f64], l: f64) -> bool {
    let sq = sq_len(vals);
    if sq <= l {
        return false;
    }
    let orig = vals.to_vec();
    let mut scale = (l / sq).sqrt();
    loop {
        for (v, o) in vals.iter_mut().zip(&orig) {
            *v = o * scale;
        }
        if sq_len(vals) <= l {
            return true;
        }
        scale = f64::from_bits(scale.to_bits() - 1);
    }
}

fn project_units(w: &mut Tensor, layout: UnitLayout, l: f64) {
    match layout {
        UnitLayout::Chunks(len) => {
            for chunk in w.data_mut().chunks_mut(len) {
                shrink_to_bound(chunk, l);
            }
        }
        UnitLayout::Columns => {
            let (m, n) = w.dims2().expect("column layout needs a matrix");
            let norms = unit_sq_norms(w, layout);
            let mut col = vec![0.0; m];
            for (j, &sq) in norms.iter().enumerate() {
                if sq <= l {
                    continue;
                }
                for i in 0..m {
                    col[i] = w.data()[i * n + j];
                }
                shrink_to_bound(&mut col, l);
                for i in 0..m {
                    w.data_mut()[i * n + j] = col[i];
                }
            }
        }
    }
}

/// Row-oriented max-norm projection: rows with squared norm above `l` are
/// scaled by `sqrt(l / ‖row‖²)`; other rows are returned unchanged.
pub fn maxnorm_project(w: &Tensor, l: f64) -> Result<Tensor> {
    if !(l > 0.0) {
        return Err(Error::arg(format!("max squared norm must be positive, got {l}")));
    }
    let (_, n) = w.dims2()?;
    let mut out = w.clone();
    project_units(&mut out, UnitLayout::Chunks(n.max(1)), l);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn slot(t: &mut Tensor) -> ParamSlot<'_> {
        ParamSlot {
            value: t,
            role: ParamRole::Weights {
                layout: UnitLayout::Columns,
                hidden: true,
            },
        }
    }

    #[test]
    fn paper_schedule_values() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr_at(0), 10.0);
        assert!((c.lr_at(1) - 9.98).abs() <= 1e-15 * 9.98);
        assert_eq!(c.momentum_at(0), 0.5);
        assert!((c.momentum_at(1) - 0.50098).abs() < 1e-15);
        assert!((c.momentum_at(250) - 0.745).abs() < 1e-15);
        for t in [500, 501, 1000, 3000] {
            assert_eq!(c.momentum_at(t), 0.99);
        }
        let flat = OptimizerConfig {
            decay_f: 1.0,
            ..c
        };
        assert!((0..3000).all(|t| flat.lr_at(t) == 10.0));
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = OptimizerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            OptimizerConfig { eps0: 0.0, ..ok.clone() },
            OptimizerConfig { decay_f: 1.5, ..ok.clone() },
            OptimizerConfig { p_f: 1.0, ..ok.clone() },
            OptimizerConfig { ramp_epochs: 0, ..ok.clone() },
            OptimizerConfig { max_sq_norm: Some(-1.0), ..ok.clone() },
            OptimizerConfig { batch_size: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_no_op() {
        let mut w = Tensor::from_rows(&[vec![0.3, -0.2]]);
        let before = w.clone();
        let mut state = OptimizerState::zeros_like(&[&w]);
        let g = Tensor::zeros(&[1, 2]);
        sgd_update(&mut [slot(&mut w)], &mut state, &[&g], &OptimizerConfig::default(), 0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn hand_evaluated_first_step() {
        // p = 0.5, ε = 10: Δw = −(1 − 0.5)·10·1 = −5.
        let mut w = Tensor::zeros(&[1, 1]);
        let mut state = OptimizerState::zeros_like(&[&w]);
        let g = Tensor::filled(&[1, 1], 1.0);
        let cfg = OptimizerConfig {
            max_sq_norm: None,
            ..OptimizerConfig::default()
        };
        sgd_update(&mut [slot(&mut w)], &mut state, &[&g], &cfg, 0).unwrap();
        assert_eq!(state.velocity[0].data(), &[-5.0]);
        assert_eq!(w.data(), &[-5.0]);
    }

    #[test]
    fn two_step_unrolled_recurrence() {
        let cfg = OptimizerConfig {
            p_i: 0.9,
            p_f: 0.9,
            decay_f: 1.0,
            eps0: 2.0,
            max_sq_norm: None,
            ..OptimizerConfig::default()
        };
        let mut w = Tensor::zeros(&[1, 1]);
        let mut state = OptimizerState::zeros_like(&[&w]);
        let g = Tensor::filled(&[1, 1], 0.7);
        sgd_update(&mut [slot(&mut w)], &mut state, &[&g], &cfg, 0).unwrap();
        let v1 = state.velocity[0].data()[0];
        sgd_update(&mut [slot(&mut w)], &mut state, &[&g], &cfg, 1).unwrap();
        let expected = 0.9 * v1 - (1.0 - 0.9) * 2.0 * 0.7;
        assert!((state.velocity[0].data()[0] - expected).abs() < 1e-15);
        assert!((w.data()[0] - (v1 + expected)).abs() < 1e-15);
    }

    #[test]
    fn update_errors() {
        let mut w = Tensor::zeros(&[1, 2]);
        let mut state = OptimizerState::zeros_like(&[&w]);
        let cfg = OptimizerConfig::default();
        let wrong = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            sgd_update(&mut [slot(&mut w)], &mut state, &[&wrong], &cfg, 0),
            Err(Error::Shape(_))
        ));
        let mut nan = Tensor::zeros(&[1, 2]);
        nan.data_mut()[1] = f64::NAN;
        assert!(matches!(
            sgd_update(&mut [slot(&mut w)], &mut state, &[&nan], &cfg, 0),
            Err(Error::Numeric(_))
        ));
        assert_eq!(w, Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn row_projection_cases() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0]]);
        assert_eq!(maxnorm_project(&w, 15.0).unwrap(), w);
        // Squared norm 60 = 4·15, so the row is halved.
        let w = Tensor::from_rows(&[vec![6.0, 2.0, 4.0, 2.0]]);
        let p = maxnorm_project(&w, 15.0).unwrap();
        assert_eq!(p.data(), &[3.0, 1.0, 2.0, 1.0]);
        assert_eq!(p.row_sq_norms().unwrap().data(), &[15.0]);
    }

    #[test]
    fn projection_is_idempotent_bitwise() {
        let mut rng = RandomSource::new(1);
        for _ in 0..200 {
            let w = rng.gauss_sample(0.0, 3.0, &[6, 9]).unwrap();
            let l = rng.uniform_range(0.5, 30.0);
            let once = maxnorm_project(&w, l).unwrap();
            let twice = maxnorm_project(&once, l).unwrap();
            assert_eq!(once, twice);
            for sq in once.row_sq_norms().unwrap().data() {
                assert!(*sq <= l);
            }
        }
    }

    #[test]
    fn column_layout_constrains_incoming_weights() {
        let mut rng = RandomSource::new(2);
        let mut w = rng.gauss_sample(0.0, 5.0, &[10, 4]).unwrap();
        let mut v = w.clone();
        project_units(&mut w, UnitLayout::Columns, 15.0);
        let t = maxnorm_project(&v.transpose().unwrap(), 15.0).unwrap();
        v = t.transpose().unwrap();
        assert_eq!(w, v);
        assert!(unit_sq_norms(&w, UnitLayout::Columns).iter().all(|&s| s <= 15.0));
    }

    #[test]
    fn fixed_momentum_matches_scheduled_rule_with_folded_rate() {
        let mut rng = RandomSource::new(3);
        let lr = 0.01;
        let cfg = OptimizerConfig {
            eps0: lr / (1.0 - 0.9),
            decay_f: 1.0,
            p_i: 0.9,
            p_f: 0.9,
            max_sq_norm: None,
            ..OptimizerConfig::default()
        };
        let mut a = rng.gauss_sample(0.0, 1.0, &[3, 3]).unwrap();
        let mut b = a.clone();
        let mut sa = OptimizerState::zeros_like(&[&a]);
        let mut sb = sa.clone();
        for t in 0..20 {
            let g = rng.gauss_sample(0.0, 1.0, &[3, 3]).unwrap();
            simple_momentum_update(&mut [slot(&mut a)], &mut sa, &[&g], lr, 0.9).unwrap();
            sgd_update(&mut [slot(&mut b)], &mut sb, &[&g], &cfg, t).unwrap();
        }
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn fixed_momentum_descends() {
        let mut w = Tensor::filled(&[1, 1], 1.0);
        let mut state = OptimizerState::zeros_like(&[&w]);
        let g = Tensor::filled(&[1, 1], 2.0);
        simple_momentum_update(&mut [slot(&mut w)], &mut state, &[&g], 0.1, 0.9).unwrap();
        assert!(w.data()[0] < 1.0);
        let mut z = Tensor::zeros(&[1, 1]);
        let mut s = OptimizerState::zeros_like(&[&z]);
        simple_momentum_update(&mut [slot(&mut z)], &mut s, &[&Tensor::zeros(&[1, 1])], 0.1, 0.9).unwrap();
        assert_eq!(z.data(), &[0.0]);
    }
}
