use crate::error::{Error, Result};

use super::head::ClassifierHead;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates carried between AdamW steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: usize) -> Self {
        Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p -= lr * weight_decay * *p;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Exponential moving average of one parameter.
///
/// Written as `old - (1 - alpha) * (old - student)` so that `alpha = 1` and
/// `student == old` both leave the value bitwise unchanged.
#[inline]
pub fn ema_blend(old: f64, student: f64, alpha: f64) -> f64 {
    old - (1.0 - alpha) * (old - student)
}

/// Mean-teacher copy of a student head.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHead {
    pub head: ClassifierHead,
    pub decay: f64,
}

impl TeacherHead {
    pub fn new(head: ClassifierHead, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::OutOfRange {
                what: "EMA decay",
                detail: format!("{decay} not in [0, 1]"),
            });
        }
        Ok(Self { head, decay })
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`, parameter-wise.
    pub fn ema_update(&mut self, student: &ClassifierHead) -> Result<()> {
        if !self.head.same_shape(student) {
            return Err(Error::ShapeMismatch("teacher and student heads differ in shape".into()));
        }
        let alpha = self.decay;
        for (t, &s) in self.head.params_mut().iter_mut().zip(student.params()) {
            *t = ema_blend(*t, s, alpha);
        }
        Ok(())
    }
}

/// Functional form of [`TeacherHead::ema_update`] with an explicit decay.
pub fn ema_update(teacher: &TeacherHead, student: &ClassifierHead, alpha: f64) -> Result<TeacherHead> {
    let mut next = TeacherHead::new(teacher.head.clone(), alpha)?;
    next.ema_update(student)?;
    next.decay = teacher.decay;
    Ok(next)
}
