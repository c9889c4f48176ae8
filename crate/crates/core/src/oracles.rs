//! Exact reference solutions used to measure co-simulation error.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{SystemKind, SystemSpec};
use crate::ode::{integrate, StateVec, StepControl};

// [6/6] Padé numerator coefficients, c_k = (12-k)! 6! / (12! k! (6-k)!).
const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// `e^A` by scaling and squaring with a [6/6] Padé approximant.
pub fn expm_pade(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let mut num = id.clone() * PADE6[0];
    let mut den = id.clone() * PADE6[0];
    let mut power = id;
    for (k, c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &scaled;
        num += &power * *c;
        den += &power * (if k % 2 == 0 { *c } else { -*c });
    }
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is nonsingular for ||A|| <= 1/2");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// `e^{A t}` for a 2x2 matrix in closed form:
/// `e^{μt} (C(t) I + S(t) (A - μ I))` with `μ = tr A / 2`.
pub fn expm_2x2(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert_eq!(a.shape(), (2, 2), "expm_2x2 needs a 2x2 matrix");
    let mu = 0.5 * (a[(0, 0)] + a[(1, 1)]);
    let m = a - DMatrix::<f64>::identity(2, 2) * mu;
    // (A - μI)² = δ² I
    let delta2 = m[(0, 0)] * m[(0, 0)] + m[(0, 1)] * m[(1, 0)];
    let q = delta2 * t * t;
    let (c, s) = if q.abs() < 1e-8 {
        (
            1.0 + q / 2.0 + q * q / 24.0,
            t * (1.0 + q / 6.0 + q * q / 120.0),
        )
    } else if q > 0.0 {
        let r = q.sqrt();
        (r.cosh(), t * r.sinh() / r)
    } else {
        let r = (-q).sqrt();
        (r.cos(), t * r.sin() / r)
    };
    (DMatrix::<f64>::identity(2, 2) * c + m * s) * (mu * t).exp()
}

pub fn expm_solution(b: &DMatrix<f64>, x0: &[f64], t: f64) -> StateVec {
    let e = expm_pade(&(b * t));
    StateVec::from((e * DVector::from_column_slice(x0)).as_slice())
}

pub fn oscillator_solution(c: f64, m: f64, d: f64, x0: &[f64], t: f64) -> Result<StateVec> {
    if !(c > 0.0 && m > 0.0) {
        return Err(Error::Oracle(format!("need c > 0 and m > 0, got c={c}, m={m}")));
    }
    if d != 0.0 {
        return Err(Error::Oracle("closed form covers the undamped oscillator only".into()));
    }
    let w = (c / m).sqrt();
    let (s0, v0) = (x0[0], x0[1]);
    let (sn, cs) = (w * t).sin_cos();
    Ok(StateVec::from(vec![
        s0 * cs + v0 / w * sn,
        -s0 * w * sn + v0 * cs,
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    MatrixExponential,
    ClosedFormOscillator,
    TightToleranceMonolithic { tol: f64 },
}

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub provenance: Provenance,
    sys: SystemSpec,
}

impl ReferenceSolution {
    /// Exact oracle for the system: closed form for the undamped
    /// oscillator, matrix exponential otherwise.
    pub fn exact(sys: &SystemSpec) -> Self {
        let provenance = match sys.kind {
            SystemKind::SpringMass { d, .. } if d == 0.0 => Provenance::ClosedFormOscillator,
            _ => Provenance::MatrixExponential,
        };
        Self {
            provenance,
            sys: sys.clone(),
        }
    }

    pub fn monolithic(sys: &SystemSpec, tol: f64) -> Self {
        Self {
            provenance: Provenance::TightToleranceMonolithic { tol },
            sys: sys.clone(),
        }
    }

    pub fn eval(&self, t: f64) -> Result<StateVec> {
        let t0 = self.sys.t_span.0;
        match self.provenance {
            Provenance::ClosedFormOscillator => match self.sys.kind {
                SystemKind::SpringMass { c, m, d } => oscillator_solution(c, m, d, &self.sys.x0, t - t0),
                _ => unreachable!("oscillator provenance only for spring-mass"),
            },
            Provenance::MatrixExponential => Ok(expm_solution(&self.sys.matrix(), &self.sys.x0, t - t0)),
            Provenance::TightToleranceMonolithic { tol } => {
                if t == t0 {
                    return Ok(self.sys.x0.clone());
                }
                let ctrl = StepControl::adaptive(tol, (t - t0).abs());
                let traj = integrate(&self.sys.monolithic_rhs(), &self.sys.x0, (t0, t), &ctrl)?;
                Ok(traj.end_state().clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn m2(v: [f64; 4]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &v)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pade_coefficients() {
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        for (k, c) in PADE6.iter().enumerate() {
            let k = k as u32;
            let expected = fact(12 - k) * fact(6) / (fact(12) * fact(k) * fact(6 - k));
            assert!((c - expected).abs() <= 1e-16 * expected);
        }
    }

    #[test]
    fn zero_matrix_keeps_state() {
        let x = expm_solution(&DMatrix::zeros(3, 3), &[1.0, -2.0, 0.5], 7.0);
        assert_eq!(&*x, &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn scalar_decay() {
        let x = expm_solution(&DMatrix::from_element(1, 1, -1.0), &[1.0], 1.0);
        assert!((x[0] - 0.3678794412).abs() < 1e-10);
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rotation_quarter_turn() {
        let b = m2([0.0, 1.0, -1.0, 0.0]);
        let x = expm_solution(&b, &[1.0, 0.0], PI / 2.0);
        assert!(close(&x, &[0.0, -1.0], 1e-12), "{x:?}");
    }

    #[test]
    fn oscillator_examples() {
        let x = oscillator_solution(1.0, 1.0, 0.0, &[1.0, 0.0], 2.0 * PI).unwrap();
        assert!(close(&x, &[1.0, 0.0], 1e-12));
        let x = oscillator_solution(1.0, 1.0, 0.0, &[1.0, 0.0], PI).unwrap();
        assert!(close(&x, &[-1.0, 0.0], 1e-12));
        assert!(oscillator_solution(0.0, 1.0, 0.0, &[1.0, 0.0], 1.0).is_err());
        assert!(oscillator_solution(1.0, -1.0, 0.0, &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn monolithic_reference_is_close() {
        let sys = SystemSpec::spring_mass(1.0, 1.0, 0.0, vec![1.0, 0.0], (0.0, 20.0)).unwrap();
        let exact = ReferenceSolution::exact(&sys);
        assert_eq!(exact.provenance, Provenance::ClosedFormOscillator);
        let tight = ReferenceSolution::monolithic(&sys, 1e-12);
        let (a, b) = (exact.eval(5.0).unwrap(), tight.eval(5.0).unwrap());
        assert!(close(&a, &b, 1e-9));
    }

    proptest! {
        #[test]
        fn pade_matches_closed_form_2x2(
            v in prop::array::uniform4(-2.0f64..2.0),
            t in 0.0f64..3.0,
        ) {
            let b = m2(v);
            let pade = expm_pade(&(&b * t));
            let closed = expm_2x2(&b, t);
            let scale = closed.amax().max(1.0);
            prop_assert!((pade - closed).amax() <= 1e-12 * scale);
        }

        #[test]
        fn oscillator_matches_expm(t in 0.0f64..30.0, c in 0.2f64..4.0, m in 0.2f64..4.0, s0 in -2.0f64..2.0, v0 in -2.0f64..2.0) {
            let sys = SystemSpec::spring_mass(c, m, 0.0, vec![s0, v0], (0.0, 1.0)).unwrap();
            let a = oscillator_solution(c, m, 0.0, &[s0, v0], t).unwrap();
            let b = expm_solution(&sys.matrix(), &[s0, v0], t);
            prop_assert!(close(&a, &b, 1e-12 * (1.0 + t)));
        }
    }
}
