//! Dormand–Prince 5(4) step with the standard fourth-order continuous
//! extension.

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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Right-hand side `dx = f(x)`; autonomous since flows do not depend on
/// time.
pub trait Rhs {
    type Error;
    fn eval(&mut self, x: &[f64], dx: &mut [f64]) -> Result<(), Self::Error>;
}

/// Result of one trial step.
pub struct Trial {
    pub x_new: Vec<f64>,
    /// `f(x_new)`, reused as the first stage of the next step.
    pub k7: Vec<f64>,
    /// Weighted RMS error estimate; the step is acceptable when `<= 1`.
    pub err: f64,
    stages: [Vec<f64>; 7],
}

/// Interpolant over an accepted step.
#[derive(Debug, Clone)]
pub struct Dense {
    pub t0: f64,
    pub h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    pub fn at(&self, t: f64, out: &mut [f64]) {
        let s = if self.h == 0.0 { 0.0 } else { (t - self.t0) / self.h };
        let s1 = 1.0 - s;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.r[0][i]
                + s * (self.r[1][i] + s1 * (self.r[2][i] + s * (self.r[3][i] + s1 * self.r[4][i])));
        }
    }

    pub fn state(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.r[0].len()];
        self.at(t, &mut out);
        out
    }
}

/// Attempts one step of size `h` from `x` with `k1 = f(x)`.
pub fn trial<F: Rhs>(
    f: &mut F,
    x: &[f64],
    k1: &[f64],
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<Trial, F::Error> {
    let n = x.len();
    let mut tmp = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];

    for i in 0..n {
        tmp[i] = x[i] + h * A21 * k1[i];
    }
    f.eval(&tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    f.eval(&tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    f.eval(&tmp, &mut k4)?;
    for i in 0..n {
        tmp[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    f.eval(&tmp, &mut k5)?;
    for i in 0..n {
        tmp[i] =
            x[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    f.eval(&tmp, &mut k6)?;
    let mut x_new = vec![0.0; n];
    for i in 0..n {
        x_new[i] = x[i]
            + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
    }
    f.eval(&x_new, &mut k7)?;

    let mut acc = 0.0;
    for i in 0..n {
        let e = h
            * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sc = atol + rtol * x[i].abs().max(x_new[i].abs());
        acc += (e / sc) * (e / sc);
    }
    let err = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
    let stages = [k1.to_vec(), k2, k3, k4, k5, k6, k7.clone()];
    Ok(Trial {
        x_new,
        k7,
        err,
        stages,
    })
}

impl Trial {
    pub fn dense(&self, x: &[f64], t0: f64, h: f64) -> Dense {
        let n = x.len();
        let [k1, _, k3, k4, k5, k6, k7] = &self.stages;
        let mut r = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let dy = self.x_new[i] - x[i];
            let bspl = h * k1[i] - dy;
            r[0][i] = x[i];
            r[1][i] = dy;
            r[2][i] = bspl;
            r[3][i] = dy - h * k7[i] - bspl;
            r[4][i] = h
                * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        Dense { t0, h, r }
    }
}

/// Initial step guess from the scaled sizes of state and derivative.
pub fn initial_step(x: &[f64], k1: &[f64], rtol: f64, atol: f64, h_max: f64) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (xi, fi) in x.iter().zip(k1) {
        let sc = atol + rtol * xi.abs();
        d0 += (xi / sc).powi(2);
        d1 += (fi / sc).powi(2);
    }
    let n = x.len().max(1) as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(h_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(f64);
    impl Rhs for Linear {
        type Error = ();
        fn eval(&mut self, x: &[f64], dx: &mut [f64]) -> Result<(), ()> {
            dx[0] = self.0 * x[0];
            Ok(())
        }
    }

    #[test]
    fn single_step_accuracy() {
        let mut f = Linear(-1.0);
        let x = [1.0];
        let k1 = [-1.0];
        let h = 0.1;
        let t = trial(&mut f, &x, &k1, h, 1e-6, 1e-8).unwrap();
        assert!((t.x_new[0] - (-h).exp()).abs() < 1e-8);
        let d = t.dense(&x, 0.0, h);
        let mid = d.state(0.05)[0];
        assert!((mid - (-0.05f64).exp()).abs() < 1e-8, "{mid}");
        assert_eq!(d.state(0.0)[0], 1.0);
        assert!((d.state(h)[0] - t.x_new[0]).abs() < 1e-15);
    }
}
