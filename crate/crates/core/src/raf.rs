//! Recurrent accumulate-and-fire gate.
//!
//! One step: project the input, add it to a leaky memory, compare the memory
//! with a learnable threshold, emit `ReLU(mem/thre − 1)`, and soft-reset the
//! memory by subtracting the threshold wherever it fired.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ledger, matmul_nt, Mat, Tape, Var};

/// Smallest allowed `|thre|`.
pub const MIN_THRESHOLD: f64 = 1e-6;
pub const INIT_LEAK: f64 = 1.0;
pub const INIT_THRESHOLD: f64 = 0.1;
/// Std of the Gaussian perturbation added to the identity projection at init.
pub const INIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RafParams {
    /// `d×d` projection, applied as `X·Wᵀ`.
    pub w: Mat,
    pub leak: f64,
    pub thre: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RafState {
    pub mem: Mat,
}

/// Output of [`raf_step`].
#[derive(Clone, Debug)]
pub struct RafOutput {
    pub out: Mat,
    pub state: RafState,
    /// Entries that fired (`y > 0`).
    pub fired: usize,
    /// `min |y|` over the step; distance from the fire discontinuity.
    pub margin: f64,
}

impl RafParams {
    /// Identity projection plus N(0, 0.01²) noise, leak 1.0, threshold 0.1.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let noise = Mat::randn(d, d, INIT_NOISE, rng);
        RafParams {
            w: Mat::identity(d).add(&noise).expect("same shape"),
            leak: INIT_LEAK,
            thre: INIT_THRESHOLD,
        }
    }

    pub fn identity(d: usize) -> Self {
        RafParams {
            w: Mat::identity(d),
            leak: INIT_LEAK,
            thre: INIT_THRESHOLD,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    /// Learnable scalars: `d²` projection entries plus leak and threshold.
    pub fn param_count(&self) -> usize {
        self.w.len() + 2
    }

    /// Keeps the threshold away from zero while preserving its sign.
    pub fn clamp_threshold(&mut self) {
        self.thre = clamp_threshold(self.thre);
    }
}

pub fn clamp_threshold(thre: f64) -> f64 {
    if thre.abs() >= MIN_THRESHOLD {
        thre
    } else if thre < 0.0 {
        -MIN_THRESHOLD
    } else {
        MIN_THRESHOLD
    }
}

/// Fresh zero memory.
pub fn raf_reset(d: usize) -> RafState {
    RafState {
        mem: Mat::zeros(d, d),
    }
}

/// One gate step on a `d×d` input.
pub fn raf_step(params: &RafParams, state: &RafState, x: &Mat) -> Result<RafOutput> {
    let d = params.dim();
    if x.shape() != (d, d) || state.mem.shape() != (d, d) {
        return Err(Error::shape("raf_step", x.shape(), (d, d)));
    }
    x.ensure_finite("raf_step")?;
    state.mem.ensure_finite("raf_step")?;
    // Same operation order as the tape path so both agree bitwise.
    let xw = ledger::with_tag(crate::attention::tags::RAF, || matmul_nt(x, &params.w))?;
    let mem = state.mem.scale(params.leak).add(&xw)?;
    let y = mem.map(|m| m / params.thre).map(|r| r + -1.0);
    let fire = y.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let reset = fire.scale(params.thre);
    let mem = mem.sub(&reset)?;
    mem.ensure_finite("raf_step")?;
    let fired = fire.data().iter().filter(|&&f| f > 0.0).count();
    let margin = y.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    Ok(RafOutput {
        out: y.map(|v| v.max(0.0)),
        state: RafState { mem },
        fired,
        margin,
    })
}

/// Tape handles for one gate's learnable parameters.
#[derive(Clone, Copy, Debug)]
pub struct RafVars {
    pub w: Var,
    pub leak: Var,
    pub thre: Var,
}

impl RafVars {
    pub fn params(tape: &mut Tape, p: &RafParams) -> Self {
        RafVars {
            w: tape.param(p.w.clone()),
            leak: tape.param(Mat::scalar(p.leak)),
            thre: tape.param(Mat::scalar(p.thre)),
        }
    }

    pub fn constants(tape: &mut Tape, p: &RafParams) -> Self {
        RafVars {
            w: tape.constant(p.w.clone()),
            leak: tape.constant(Mat::scalar(p.leak)),
            thre: tape.constant(Mat::scalar(p.thre)),
        }
    }
}

/// Recorded gate step: `(out, mem', margin)`. The fire indicator enters as a
/// constant mask, so it contributes no gradient of its own.
pub fn raf_step_tape(tape: &mut Tape, raf: &RafVars, mem: Var, x: Var) -> Result<(Var, Var, f64)> {
    let xw = ledger::with_tag(crate::attention::tags::RAF, || tape.matmul_nt(x, raf.w))?;
    let lm = tape.scale_by(mem, raf.leak)?;
    let mem1 = tape.add(lm, xw)?;
    let ratio = tape.div_by(mem1, raf.thre)?;
    let y = tape.add_scalar(ratio, -1.0);
    let yv = tape.value(y);
    let fire = yv.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let margin = yv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let fire = tape.constant(fire);
    let reset = tape.scale_by(fire, raf.thre)?;
    let mem2 = tape.sub(mem1, reset)?;
    tape.value(mem2).ensure_finite("raf_step")?;
    let out = tape.relu(y);
    Ok((out, mem2, margin))
}
