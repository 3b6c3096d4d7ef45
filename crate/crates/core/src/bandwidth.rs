//! Leave-one-subject-out cross-validation of the smoothing bandwidth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::EstimatingContext;
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kernel::{Kernel, Smoother};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub h_grid: Vec<f64>,
    /// `+∞` where an excluded subject had no neighbours.
    pub scores: Vec<f64>,
    pub h_star: f64,
}

const GRID_POINTS: usize = 12;
const TIE_TOL: f64 = 1e-10;

/// Log-spaced candidates over `[0.5, 8] · n^{-1/5} · sd(times)`.
pub fn default_grid(frame: &SampleFrame) -> Vec<f64> {
    let n = frame.n_subjects.max(1) as f64;
    let len = frame.len() as f64;
    let mean = frame.time.iter().sum::<f64>() / len;
    let var = frame.time.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (len - 1.0).max(1.0);
    let base = (var.sqrt() * n.powf(-0.2)).max(1e-3);
    let (lo, hi) = (0.5f64.ln(), 8f64.ln());
    (0..GRID_POINTS)
        .map(|i| base * (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .collect()
}

/// Leave-one-subject-out prediction `𝕏ᵀξ̂^{(-i)} + g̃^{(-i)}(t)` of every row;
/// `None` when some excluded subject has no neighbours at this bandwidth.
pub fn cv_predictions(frame: &SampleFrame, kernel: Kernel, h: f64) -> Result<Option<Vec<f64>>> {
    let d = frame.dim();
    let design = frame.design();
    let mut pred = vec![0.0; frame.len()];
    for i in 0..frame.n_subjects {
        let rest = frame.without_subject(i);
        let xi = if d == 0 {
            Vec::new()
        } else {
            match EstimatingContext::new(&rest, kernel, h).and_then(|c| c.xi_hat()) {
                Ok(x) => x,
                Err(Error::EmptyWindow { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        };
        let lin = |a: usize, rows: &[f64]| -> f64 {
            rows[a * d..(a + 1) * d]
                .iter()
                .zip(&xi)
                .map(|(x, b)| x * b)
                .sum()
        };
        let rest_design = rest.design();
        let resid: Vec<f64> = (0..rest.len())
            .map(|a| rest.y[a] - lin(a, &rest_design))
            .collect();
        let sm = Smoother::new(&rest, kernel, h);
        for a in frame.subject_rows(i) {
            match sm.smooth(frame.time[a], &resid) {
                Ok(g) => pred[a] = lin(a, &design) + g,
                Err(_) => return Ok(None),
            }
        }
    }
    Ok(Some(pred))
}

/// `Σ_i Σ_m (δ/π)(Y - 𝕏ᵀξ̂^{(-i)} - g̃^{(-i)}(t))²`, or `+∞` when some window is empty.
pub fn cv_score(frame: &SampleFrame, kernel: Kernel, h: f64) -> Result<f64> {
    Ok(match cv_predictions(frame, kernel, h)? {
        Some(pred) => (0..frame.len())
            .map(|a| frame.ipw[a] * (frame.y[a] - pred[a]).powi(2))
            .sum(),
        None => f64::INFINITY,
    })
}

/// Minimizes the cross-validation score over `grid`; ties go to the larger bandwidth.
pub fn cv_bandwidth(frame: &SampleFrame, kernel: Kernel, grid: &[f64]) -> Result<CVResult> {
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidInput(
            "bandwidth grid must be nonempty and positive".into(),
        ));
    }
    if frame.n_subjects < 3 {
        return Err(Error::InvalidInput(
            "cross-validation needs at least three subjects".into(),
        ));
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&h| cv_score(frame, kernel, h))
        .collect::<Result<_>>()?;
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::EmptyWindow { t: f64::NAN });
    }
    let threshold = best + TIE_TOL * best.abs().max(1e-300);
    let h_star = grid
        .iter()
        .zip(&scores)
        .filter(|(_, s)| **s <= threshold)
        .map(|(h, _)| *h)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CVResult {
        h_grid: grid.to_vec(),
        scores,
        h_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(n: usize, per: usize, y: impl Fn(usize, f64) -> f64) -> SampleFrame {
        let len = n * per;
        let time: Vec<f64> = (0..len)
            .map(|a| ((a * 37) % len) as f64 / (len - 1) as f64)
            .collect();
        let subject: Vec<usize> = (0..len).map(|a| a / per).collect();
        let yv: Vec<f64> = (0..len).map(|a| y(a, time[a])).collect();
        SampleFrame::from_columns(
            subject,
            (0..len).map(|a| a % per).collect(),
            time,
            vec![1.0; len],
            vec![],
            0,
            vec![],
            0,
            yv,
        )
    }

    #[test]
    fn single_candidate_is_returned() {
        let f = frame(10, 3, |a, t| t + 0.1 * (a % 3) as f64);
        let r = cv_bandwidth(&f, Kernel::Epanechnikov, &[0.3]).unwrap();
        assert_eq!(r.h_star, 0.3);
    }

    #[test]
    fn flat_scores_pick_largest_bandwidth() {
        // constant curve: every bandwidth with nonempty windows predicts exactly
        let f = frame(10, 3, |_, _| 2.0);
        let grid = [1e-4, 0.1, 0.2, 0.4];
        let r = cv_bandwidth(&f, Kernel::Epanechnikov, &grid).unwrap();
        assert!(r.scores[0].is_infinite());
        assert!(r.scores[1..].iter().all(|s| *s < 1e-20));
        assert_eq!(r.h_star, 0.4);
    }

    #[test]
    fn excluded_subject_never_predicts_itself() {
        let base = frame(8, 4, |a, t| (4.0 * t).sin() + 0.2 * ((a * 5) % 7) as f64);
        let mut bumped = base.clone();
        for a in bumped.subject_rows(0) {
            bumped.y[a] += 3.0;
        }
        let p0 = cv_predictions(&base, Kernel::Epanechnikov, 0.3)
            .unwrap()
            .unwrap();
        let p1 = cv_predictions(&bumped, Kernel::Epanechnikov, 0.3)
            .unwrap()
            .unwrap();
        for a in base.subject_rows(0) {
            assert_eq!(p0[a], p1[a]);
        }
        // the other subjects' fits do see subject 0
        assert!(base.subject_rows(1).any(|a| p0[a] != p1[a]));
    }

    #[test]
    fn score_ignores_subject_order() {
        let f = frame(9, 3, |a, t| t * t + 0.3 * ((a * 11) % 5) as f64);
        // reverse the subject labels, keeping rows grouped
        let len = f.len();
        let mut rows: Vec<usize> = Vec::with_capacity(len);
        for i in (0..f.n_subjects).rev() {
            rows.extend(f.subject_rows(i));
        }
        let g = SampleFrame::from_columns(
            rows.iter()
                .map(|&a| f.n_subjects - 1 - f.subject[a])
                .collect(),
            rows.iter().map(|&a| f.visit[a]).collect(),
            rows.iter().map(|&a| f.time[a]).collect(),
            vec![1.0; len],
            vec![],
            0,
            vec![],
            0,
            rows.iter().map(|&a| f.y[a]).collect(),
        );
        let a = cv_score(&f, Kernel::Epanechnikov, 0.25).unwrap();
        let b = cv_score(&g, Kernel::Epanechnikov, 0.25).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }
}
