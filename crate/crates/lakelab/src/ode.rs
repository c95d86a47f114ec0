//! Embedded Dormand–Prince 5(4) integrator with terminal event location.

use crate::error::{LakeError, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Why an integration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Reached the final time.
    EndTime,
    /// Event `index` crossed zero; the last sample sits on the crossing.
    Event(usize),
    /// The observer asked to stop.
    Observer,
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5 {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 1e-3,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

/// Scalar event function; a sign change between accepted steps stops integration.
pub type Event<'a, const N: usize> = &'a dyn Fn(&[f64; N]) -> f64;

impl Dopri5 {
    pub fn with_tolerance(rtol: f64, atol: f64) -> Self {
        Dopri5 {
            rtol,
            atol,
            ..Default::default()
        }
    }

    fn step<const N: usize, F>(&self, rhs: &F, t: f64, y: &[f64; N], h: f64) -> ([f64; N], f64)
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
    {
        let comb = |ks: &[(&[f64; N], f64)]| -> [f64; N] {
            let mut out = *y;
            for (k, a) in ks {
                for i in 0..N {
                    out[i] += h * a * k[i];
                }
            }
            out
        };
        let k1 = rhs(t, y);
        let k2 = rhs(t + C2 * h, &comb(&[(&k1, A21)]));
        let k3 = rhs(t + C3 * h, &comb(&[(&k1, A31), (&k2, A32)]));
        let k4 = rhs(t + C4 * h, &comb(&[(&k1, A41), (&k2, A42), (&k3, A43)]));
        let k5 = rhs(
            t + C5 * h,
            &comb(&[(&k1, A51), (&k2, A52), (&k3, A53), (&k4, A54)]),
        );
        let k6 = rhs(
            t + h,
            &comb(&[(&k1, A61), (&k2, A62), (&k3, A63), (&k4, A64), (&k5, A65)]),
        );
        let y_new = comb(&[(&k1, B1), (&k3, B3), (&k4, B4), (&k5, B5), (&k6, B6)]);
        let k7 = rhs(t + h, &y_new);
        let mut err = 0.0f64;
        for i in 0..N {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / scale).abs());
        }
        (y_new, err)
    }

    /// Integrates from `(t0, y0)` towards `t_end` (either direction).
    ///
    /// `max_step` caps the step length given the current state. The observer
    /// sees every accepted sample, including the initial one, and returns
    /// `false` to stop.
    pub fn solve<const N: usize, F, M, O>(
        &self,
        rhs: F,
        t0: f64,
        y0: [f64; N],
        t_end: f64,
        max_step: M,
        events: &[Event<'_, N>],
        mut observer: O,
    ) -> Result<Termination>
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
        M: Fn(&[f64; N]) -> f64,
        O: FnMut(f64, &[f64; N]) -> bool,
    {
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let mut t = t0;
        let mut y = y0;
        if !observer(t, &y) {
            return Ok(Termination::Observer);
        }
        let mut h = self.h_init.min(self.h_max).min((t_end - t0).abs());
        let mut g_prev: Vec<f64> = events.iter().map(|e| e(&y)).collect();
        for _ in 0..self.max_steps {
            if (t_end - t) * dir <= 0.0 {
                return Ok(Termination::EndTime);
            }
            h = h.min(self.h_max).min(max_step(&y)).min((t_end - t).abs());
            if !(h > 0.0) || !h.is_finite() {
                return Err(LakeError::Manifold(format!(
                    "step size collapsed at t = {t}"
                )));
            }
            let (y_new, err) = self.step(&rhs, t, &y, dir * h);
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                h *= 0.25;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(LakeError::Manifold(format!(
                        "non-finite state near t = {t}"
                    )));
                }
                continue;
            }
            if err > 1.0 {
                h *= (0.9 * err.powf(-0.2)).max(0.2);
                if h < 1e-15 * t.abs().max(1.0) {
                    return Err(LakeError::Manifold(format!("step underflow at t = {t}")));
                }
                continue;
            }

            // Event detection on the accepted step.
            let mut hit: Option<usize> = None;
            for (idx, ev) in events.iter().enumerate() {
                let g_new = ev(&y_new);
                if g_prev[idx] != 0.0 && (g_new == 0.0 || g_new.signum() != g_prev[idx].signum()) {
                    hit = Some(idx);
                    break;
                }
            }
            if let Some(idx) = hit {
                let (t_hit, y_hit) = self.locate(&rhs, t, &y, dir * h, events[idx], g_prev[idx]);
                observer(t_hit, &y_hit);
                return Ok(Termination::Event(idx));
            }

            t += dir * h;
            y = y_new;
            for (idx, ev) in events.iter().enumerate() {
                g_prev[idx] = ev(&y);
            }
            if !observer(t, &y) {
                return Ok(Termination::Observer);
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h *= factor;
        }
        Err(LakeError::Manifold(format!(
            "exceeded {} steps",
            self.max_steps
        )))
    }

    /// Illinois iteration on the step length for the event crossing.
    fn locate<const N: usize, F>(
        &self,
        rhs: &F,
        t: f64,
        y: &[f64; N],
        h: f64,
        event: Event<'_, N>,
        g0: f64,
    ) -> (f64, [f64; N])
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
    {
        let (mut a, mut ga) = (0.0, g0);
        let (mut yb, _) = self.step(rhs, t, y, h);
        let (mut b, mut gb) = (h, event(&yb));
        let mut side = 0i8;
        for _ in 0..80 {
            if gb == 0.0 || (b - a).abs() <= 1e-15 * t.abs().max(1.0) {
                break;
            }
            let c = (a * gb - b * ga) / (gb - ga);
            let (yc, _) = self.step(rhs, t, y, c);
            let gc = event(&yc);
            if gc.signum() == gb.signum() {
                b = c;
                gb = gc;
                yb = yc;
                if side == 1 {
                    ga *= 0.5;
                }
                side = 1;
            } else {
                a = c;
                ga = gc;
                if side == -1 {
                    gb *= 0.5;
                }
                side = -1;
                // keep the sample on the far side of the crossing
                if gc == 0.0 {
                    yb = yc;
                    b = c;
                    break;
                }
            }
        }
        (t + b, yb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_accurate() {
        let solver = Dopri5::with_tolerance(1e-11, 1e-14);
        let mut last = (0.0, [0.0]);
        let term = solver
            .solve(
                |_t, y: &[f64; 1]| [-0.7 * y[0]],
                0.0,
                [2.0],
                3.0,
                |_| f64::INFINITY,
                &[],
                |t, y| {
                    last = (t, *y);
                    true
                },
            )
            .unwrap();
        assert_eq!(term, Termination::EndTime);
        assert!((last.0 - 3.0).abs() < 1e-14);
        assert!((last.1[0] - 2.0 * (-2.1f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator_backwards_in_time() {
        let solver = Dopri5::with_tolerance(1e-11, 1e-13);
        let mut last = [0.0; 2];
        solver
            .solve(
                |_t, y: &[f64; 2]| [y[1], -y[0]],
                0.0,
                [1.0, 0.0],
                -2.0,
                |_| f64::INFINITY,
                &[],
                |_, y| {
                    last = *y;
                    true
                },
            )
            .unwrap();
        assert!((last[0] - 2f64.cos()).abs() < 1e-9);
        assert!((last[1] - 2f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn event_lands_on_crossing() {
        let solver = Dopri5::default();
        let ev = |y: &[f64; 1]| y[0] - 0.5;
        let mut last = (0.0, [0.0]);
        let term = solver
            .solve(
                |_t, y: &[f64; 1]| [-y[0]],
                0.0,
                [1.0],
                10.0,
                |_| 0.3,
                &[&ev],
                |t, y| {
                    last = (t, *y);
                    true
                },
            )
            .unwrap();
        assert_eq!(term, Termination::Event(0));
        assert!((last.1[0] - 0.5).abs() < 1e-12);
        assert!((last.0 - 2f64.ln()).abs() < 1e-9);
    }
}
