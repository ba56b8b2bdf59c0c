use super::{Tape, Var};

/// A complex number on the tape as a real/imaginary pair.
///
/// Gradients follow the real-pair convention: `(∂f/∂re, ∂f/∂im)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(tape: &mut Tape, re: f64, im: f64) -> Self {
        CVar {
            re: tape.var(re),
            im: tape.var(im),
        }
    }

    pub fn value(self, tape: &Tape) -> num_complex::Complex64 {
        num_complex::Complex64::new(tape.value(self.re), tape.value(self.im))
    }

    pub fn add(self, tape: &mut Tape, other: CVar) -> CVar {
        CVar {
            re: tape.add(self.re, other.re),
            im: tape.add(self.im, other.im),
        }
    }

    pub fn mul(self, tape: &mut Tape, other: CVar) -> CVar {
        let rr = tape.mul(self.re, other.re);
        let ii = tape.mul(self.im, other.im);
        let ri = tape.mul(self.re, other.im);
        let ir = tape.mul(self.im, other.re);
        CVar {
            re: tape.sub(rr, ii),
            im: tape.add(ri, ir),
        }
    }

    /// Multiplication by a real variable.
    pub fn mul_real(self, tape: &mut Tape, r: Var) -> CVar {
        CVar {
            re: tape.mul(self.re, r),
            im: tape.mul(self.im, r),
        }
    }

    pub fn scale(self, tape: &mut Tape, c: f64) -> CVar {
        CVar {
            re: tape.scale(self.re, c),
            im: tape.scale(self.im, c),
        }
    }

    /// `|z|² = re² + im²`.
    pub fn abs2(self, tape: &mut Tape) -> Var {
        let a = tape.square(self.re);
        let b = tape.square(self.im);
        tape.add(a, b)
    }

    /// `amplitude · e^{−j·phase}`.
    pub fn from_polar_neg(tape: &mut Tape, amplitude: Var, phase: Var) -> CVar {
        let c = tape.cos(phase);
        let s = tape.sin(phase);
        let re = tape.mul(amplitude, c);
        let im_pos = tape.mul(amplitude, s);
        CVar {
            re,
            im: tape.neg(im_pos),
        }
    }

    /// `Σ_i a_i b_i` without conjugation.
    pub fn dot(tape: &mut Tape, a: &[CVar], b: &[CVar]) -> CVar {
        assert_eq!(a.len(), b.len(), "complex dot: length mismatch");
        let mut acc: Option<CVar> = None;
        for (&x, &y) in a.iter().zip(b) {
            let p = x.mul(tape, y);
            acc = Some(match acc {
                None => p,
                Some(s) => s.add(tape, p),
            });
        }
        acc.unwrap_or_else(|| CVar::new(tape, 0.0, 0.0))
    }
}
