//! Kernel functions, inverse-propensity-weighted Nadaraya–Watson weights and
//! kernel-conditional-mean centering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::quadrature::integrate_with_breaks;

const QUAD_TOL: f64 = 1e-11;

/// A symmetric probability density supported on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Biweight,
}

impl Kernel {
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        if !(-1.0..=1.0).contains(&u) {
            return 0.0;
        }
        let v = 1.0 - u * u;
        match self {
            Kernel::Epanechnikov => 0.75 * v,
            Kernel::Biweight => 0.9375 * v * v,
        }
    }

    /// `K_h(u) = K(u / h) / h`.
    #[inline]
    pub fn scaled(self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }

    /// `K_c^(2)(t) = ∫ K(w) K(t - c w) dw`.
    pub fn convolution(self, c: f64, t: f64) -> f64 {
        let lo = ((t - 1.0) / c).max(-1.0);
        let hi = ((t + 1.0) / c).min(1.0);
        if hi <= lo {
            return 0.0;
        }
        let f = |w: f64| self.eval(w) * self.eval(t - c * w);
        integrate_with_breaks(&f, lo, hi, &[0.0, t / c], QUAD_TOL)
    }

    /// `K^(2)(0) = ∫ K(w)^2 dw`.
    pub fn k2_zero(self) -> f64 {
        self.convolution(1.0, 0.0)
    }

    /// `K_c^(4)(0) = ∫ K_c^(2)(w √c) K_{1/c}^(2)(w / √c) dw`.
    pub fn k4_zero(self, c: f64) -> f64 {
        let rc = c.sqrt();
        let reach = (1.0 + c) / rc;
        let mut breaks = vec![0.0];
        for s in [(1.0 - c).abs(), 1.0 + c] {
            breaks.push(s / rc);
            breaks.push(-s / rc);
        }
        for s in [(1.0 - 1.0 / c).abs(), 1.0 + 1.0 / c] {
            breaks.push(s * rc);
            breaks.push(-s * rc);
        }
        let f = |w: f64| self.convolution(c, w * rc) * self.convolution(1.0 / c, w / rc);
        integrate_with_breaks(&f, -reach, reach, &breaks, QUAD_TOL)
    }
}

/// Scalar kernel constants used by the time-effect test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub k2_zero: f64,
    pub k4_zero: f64,
}

/// Returns `K^(2)(0)` and `K_c^(4)(0)`, plus a closure evaluating `K_c^(2)(·)`.
pub fn kernel_convolutions(kernel: Kernel, c: f64) -> (impl Fn(f64) -> f64, f64) {
    assert!(c > 0.0, "convolution scale must be positive");
    (move |t| kernel.convolution(c, t), kernel.k4_zero(c))
}

/// Normalized kernel weights at one target time.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub target_time: f64,
    /// `(subject index, visit index, weight)` for every observed visit in the window.
    pub weights: Vec<(usize, usize, f64)>,
    pub denominator: f64,
}

impl WeightVector {
    pub fn total(&self) -> f64 {
        self.weights.iter().map(|w| w.2).sum()
    }
}

/// Kernel smoother over the observed visits of one treatment sample, with every
/// visit weighted by its inverse propensity.
#[derive(Debug, Clone, Copy)]
pub struct Smoother<'a> {
    frame: &'a SampleFrame,
    kernel: Kernel,
    h: f64,
}

impl<'a> Smoother<'a> {
    pub fn new(frame: &'a SampleFrame, kernel: Kernel, h: f64) -> Self {
        assert!(h > 0.0, "bandwidth must be positive");
        Smoother { frame, kernel, h }
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn frame(&self) -> &'a SampleFrame {
        self.frame
    }

    /// Calls `f(frame index, unnormalized weight)` for each visit with positive kernel mass.
    #[inline]
    pub fn for_each_in_window<F: FnMut(usize, f64)>(&self, t: f64, mut f: F) {
        for &b in self.frame.window(t, self.h) {
            let k = self.kernel.eval((self.frame.time[b] - t) / self.h);
            if k > 0.0 {
                f(b, self.frame.ipw[b] * k);
            }
        }
    }

    /// `Σ (δ/π) K((t_b - t)/h)`; zero when the window is empty.
    pub fn mass(&self, t: f64) -> f64 {
        let mut s = 0.0;
        self.for_each_in_window(t, |_, w| s += w);
        s
    }

    pub fn weights(&self, t: f64) -> Result<WeightVector> {
        let mut raw = Vec::new();
        let mut denom = 0.0;
        self.for_each_in_window(t, |b, w| {
            raw.push((b, w));
            denom += w;
        });
        if denom <= 0.0 {
            return Err(Error::EmptyWindow { t });
        }
        let weights = raw
            .into_iter()
            .map(|(b, w)| (self.frame.subject[b], self.frame.visit[b], w / denom))
            .collect();
        Ok(WeightVector {
            target_time: t,
            weights,
            denominator: denom / self.h,
        })
    }

    /// Weighted mean at `t` of a scalar series indexed by frame position.
    pub fn smooth(&self, t: f64, values: &[f64]) -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        self.for_each_in_window(t, |b, w| {
            num += w * values[b];
            den += w;
        });
        if den <= 0.0 {
            return Err(Error::EmptyWindow { t });
        }
        Ok(num / den)
    }

    /// Weighted mean at `t` of an `r`-column row-major series.
    pub fn smooth_rows(&self, t: f64, values: &[f64], r: usize, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut den = 0.0;
        self.for_each_in_window(t, |b, w| {
            den += w;
            let row = &values[b * r..(b + 1) * r];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        });
        if den <= 0.0 {
            return Err(Error::EmptyWindow { t });
        }
        out.iter_mut().for_each(|o| *o /= den);
        Ok(())
    }

    /// `Ã_b = A_b - Σ w_b'(t_b) A_b'` for an `r`-column row-major series.
    pub fn center_rows(&self, values: &[f64], r: usize) -> Result<Vec<f64>> {
        let n = self.frame.len();
        let mut out = vec![0.0; n * r];
        let mut mean = vec![0.0; r];
        for a in 0..n {
            self.smooth_rows(self.frame.time[a], values, r, &mut mean)?;
            for c in 0..r {
                out[a * r + c] = values[a * r + c] - mean[c];
            }
        }
        Ok(out)
    }
}

/// Inverse-propensity-weighted Nadaraya–Watson weights at `t`.
pub fn ipw_weights(frame: &SampleFrame, kernel: Kernel, t: f64, h: f64) -> Result<WeightVector> {
    Smoother::new(frame, kernel, h).weights(t)
}

/// Centers an `r`-column per-visit series by its kernel conditional mean given time.
pub fn center_series(
    frame: &SampleFrame,
    kernel: Kernel,
    h: f64,
    series: &[f64],
    r: usize,
) -> Result<Vec<f64>> {
    Smoother::new(frame, kernel, h).center_rows(series, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::SampleFrame;

    #[test]
    fn epanechnikov_values() {
        let k = Kernel::Epanechnikov;
        assert_eq!(k.eval(0.0), 0.75);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(-1.0), 0.0);
        assert_eq!(k.eval(0.5), 0.5625);
        assert_eq!(k.eval(1.3), 0.0);
    }

    #[test]
    fn convolution_is_symmetric_and_integrates_to_one() {
        for k in [Kernel::Epanechnikov, Kernel::Biweight] {
            for t in [0.1, 0.4, 1.3] {
                assert!((k.convolution(1.0, t) - k.convolution(1.0, -t)).abs() < 1e-12);
            }
            let total = crate::quadrature::integrate_with_breaks(
                &|t| k.convolution(1.0, t),
                -2.0,
                2.0,
                &[0.0],
                1e-10,
            );
            assert!((total - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn k4_is_symmetric_in_scale_inversion() {
        let k = Kernel::Epanechnikov;
        let a = k.k4_zero(1.7);
        let b = k.k4_zero(1.0 / 1.7);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    fn frame_with(times: &[f64], pis: &[f64]) -> SampleFrame {
        SampleFrame::from_columns(
            times.iter().enumerate().map(|(i, _)| i).collect(),
            vec![0; times.len()],
            times.to_vec(),
            pis.iter().map(|p| 1.0 / p).collect(),
            vec![],
            0,
            vec![],
            0,
            times.iter().map(|t| 2.0 * t).collect(),
        )
    }

    #[test]
    fn single_point_window() {
        let f = frame_with(&[0.3, 0.9], &[1.0, 1.0]);
        let w = ipw_weights(&f, Kernel::Epanechnikov, 0.3, 0.1).unwrap();
        assert_eq!(w.weights.len(), 1);
        assert_eq!(w.weights[0].2, 1.0);
    }

    #[test]
    fn equidistant_pair_splits_evenly() {
        let f = frame_with(&[0.4, 0.6], &[0.7, 0.7]);
        let w = ipw_weights(&f, Kernel::Epanechnikov, 0.5, 0.3).unwrap();
        assert!((w.weights[0].2 - 0.5).abs() < 1e-15);
        assert!((w.weights[1].2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inverse_propensity_reweights() {
        // three visits at the same time, one with half the propensity
        let f = frame_with(&[0.5, 0.5, 0.5], &[1.0, 0.5, 1.0]);
        let w = ipw_weights(&f, Kernel::Epanechnikov, 0.5, 0.3).unwrap();
        let got: Vec<f64> = w.weights.iter().map(|x| x.2).collect();
        for (g, e) in got.iter().zip([0.25, 0.5, 0.25]) {
            assert!((g - e).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn empty_window_is_reported() {
        let f = frame_with(&[0.1], &[1.0]);
        assert!(matches!(
            ipw_weights(&f, Kernel::Epanechnikov, 0.8, 0.2),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn centering_kills_constants() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let f = frame_with(&times, &vec![0.8; 50]);
        let c = center_series(&f, Kernel::Epanechnikov, 0.1, &vec![3.5; 50], 1).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn centering_linear_series_has_small_interior_bias() {
        let n = 2001;
        let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let f = frame_with(&times, &vec![1.0; n]);
        let series: Vec<f64> = times.iter().map(|t| 1.0 + 3.0 * t).collect();
        let h = 0.05;
        let c = center_series(&f, Kernel::Epanechnikov, h, &series, 1).unwrap();
        for (t, v) in times.iter().zip(&c) {
            if *t > h && *t < 1.0 - h {
                assert!(v.abs() < 0.01, "t={t} centered={v}");
            }
        }
    }
}
