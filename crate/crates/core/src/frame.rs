//! Flat, column-oriented view of the observed visits of one treatment sample.

use std::ops::Range;

use crate::data::{InteractionRule, TreatmentSample};

/// Observed (effective-δ = 1) visits of one treatment, with inverse propensity weights.
///
/// Rows are ordered by subject and then by visit; `order` indexes rows by time.
#[derive(Debug, Clone)]
pub struct SampleFrame {
    pub n_subjects: usize,
    pub p: usize,
    pub q: usize,
    pub subject: Vec<usize>,
    pub visit: Vec<usize>,
    pub time: Vec<f64>,
    /// `δ/π` for each row.
    pub ipw: Vec<f64>,
    /// Row-major `len × p` covariates.
    pub x: Vec<f64>,
    /// Row-major `len × q` interactions.
    pub m: Vec<f64>,
    pub y: Vec<f64>,
    order: Vec<usize>,
    sorted_time: Vec<f64>,
    subject_rows: Vec<Range<usize>>,
}

impl SampleFrame {
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        subject: Vec<usize>,
        visit: Vec<usize>,
        time: Vec<f64>,
        ipw: Vec<f64>,
        x: Vec<f64>,
        p: usize,
        m: Vec<f64>,
        q: usize,
        y: Vec<f64>,
    ) -> Self {
        let n = time.len();
        assert_eq!(subject.len(), n);
        assert_eq!(visit.len(), n);
        assert_eq!(ipw.len(), n);
        assert_eq!(x.len(), n * p);
        assert_eq!(m.len(), n * q);
        assert_eq!(y.len(), n);
        let n_subjects = subject.iter().map(|s| s + 1).max().unwrap_or(0);
        let mut subject_rows = vec![0..0; n_subjects];
        let mut start = 0;
        for a in 1..=n {
            if a == n || subject[a] != subject[start] {
                assert!(
                    subject_rows[subject[start]].is_empty(),
                    "rows of a subject must be contiguous"
                );
                subject_rows[subject[start]] = start..a;
                start = a;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
        let sorted_time = order.iter().map(|&a| time[a]).collect();
        SampleFrame {
            n_subjects,
            p,
            q,
            subject,
            visit,
            time,
            ipw,
            x,
            m,
            y,
            order,
            sorted_time,
            subject_rows,
        }
    }

    /// Builds the frame for `sample`, using `pi(subject, visit)` for the observed visits.
    pub fn build<F>(
        sample: &TreatmentSample,
        interaction: &InteractionRule,
        p: usize,
        pi: F,
    ) -> Self
    where
        F: Fn(usize, usize) -> f64,
    {
        let q = interaction.dim();
        let mut cols = Columns::default();
        for (i, subj) in sample.subjects.iter().enumerate() {
            for (m, rec) in subj.records.iter().enumerate() {
                if !subj.effective_delta[m] {
                    continue;
                }
                let xs = rec
                    .covariates
                    .as_deref()
                    .expect("observed visit has covariates");
                let y = rec.response.expect("observed visit has a response");
                cols.push(
                    i,
                    m,
                    rec.time,
                    1.0 / pi(i, m),
                    xs,
                    &interaction.eval(xs, rec.time),
                    y,
                );
            }
        }
        cols.finish(p, q)
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p + self.q
    }

    /// Rows belonging to subject `i` (empty when the subject has no observed visit).
    pub fn subject_rows(&self, i: usize) -> Range<usize> {
        self.subject_rows.get(i).cloned().unwrap_or(0..0)
    }

    /// Row indices with `|t_b - t| < h`.
    pub fn window(&self, t: f64, h: f64) -> &[usize] {
        let lo = self.sorted_time.partition_point(|&s| s <= t - h);
        let hi = self.sorted_time.partition_point(|&s| s < t + h);
        &self.order[lo..hi.max(lo)]
    }

    /// Row-major `len × (p + q)` matrix of `(X, M)`.
    pub fn design(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.len() * d);
        for a in 0..self.len() {
            out.extend_from_slice(&self.x[a * self.p..(a + 1) * self.p]);
            out.extend_from_slice(&self.m[a * self.q..(a + 1) * self.q]);
        }
        out
    }

    pub fn min_time(&self) -> f64 {
        self.sorted_time.first().copied().unwrap_or(0.0)
    }

    pub fn max_time(&self) -> f64 {
        self.sorted_time.last().copied().unwrap_or(1.0)
    }

    /// Row indices of the subsample with subject `excluded` removed, renumbering subjects.
    pub fn without_subject(&self, excluded: usize) -> SampleFrame {
        let mut cols = Columns::default();
        for a in 0..self.len() {
            let s = self.subject[a];
            if s == excluded {
                continue;
            }
            let s = if s > excluded { s - 1 } else { s };
            cols.push(
                s,
                self.visit[a],
                self.time[a],
                self.ipw[a],
                &self.x[a * self.p..(a + 1) * self.p],
                &self.m[a * self.q..(a + 1) * self.q],
                self.y[a],
            );
        }
        cols.finish(self.p, self.q)
    }
}

#[derive(Default)]
struct Columns {
    subject: Vec<usize>,
    visit: Vec<usize>,
    time: Vec<f64>,
    ipw: Vec<f64>,
    x: Vec<f64>,
    m: Vec<f64>,
    y: Vec<f64>,
}

impl Columns {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, s: usize, v: usize, t: f64, w: f64, x: &[f64], m: &[f64], y: f64) {
        self.subject.push(s);
        self.visit.push(v);
        self.time.push(t);
        self.ipw.push(w);
        self.x.extend_from_slice(x);
        self.m.extend_from_slice(m);
        self.y.push(y);
    }

    fn finish(self, p: usize, q: usize) -> SampleFrame {
        SampleFrame::from_columns(
            self.subject,
            self.visit,
            self.time,
            self.ipw,
            self.x,
            p,
            self.m,
            q,
            self.y,
        )
    }
}
