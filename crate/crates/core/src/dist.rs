//! Reference distributions: chi-square tails and quantiles, normal tails, and the
//! noncentral chi-square tail used for local power.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    ChiSquared::new(df as f64).expect("df > 0").sf(x.max(0.0))
}

pub fn chi_square_quantile(prob: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64)
        .expect("df > 0")
        .inverse_cdf(prob)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_sf(x: f64) -> f64 {
    Normal::standard().sf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `P{χ²_df(nc) > x}` as a Poisson mixture of central tails.
pub fn noncentral_chi_square_sf(x: f64, df: usize, nc: f64) -> f64 {
    assert!(nc >= 0.0);
    if nc == 0.0 {
        return chi_square_sf(x, df);
    }
    let half = 0.5 * nc;
    // start at the Poisson mode and sum outward until the weights are negligible
    let mode = half.floor() as usize;
    let log_w = |j: usize| -half + j as f64 * half.ln() - ln_factorial(j);
    let term = |j: usize| log_w(j).exp() * chi_square_sf(x, df + 2 * j);
    let mut total = term(mode);
    let mut j = mode + 1;
    loop {
        let w = log_w(j).exp();
        total += w * chi_square_sf(x, df + 2 * j);
        if w < 1e-17 {
            break;
        }
        j += 1;
    }
    let mut j = mode;
    while j > 0 {
        j -= 1;
        let w = log_w(j).exp();
        total += w * chi_square_sf(x, df + 2 * j);
        if w < 1e-17 {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

fn ln_factorial(j: usize) -> f64 {
    statrs::function::gamma::ln_gamma(j as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_reference_values() {
        assert!((chi_square_quantile(0.95, 9) - 16.918977604620448).abs() < 1e-8);
        assert!((chi_square_sf(3.841458820694124, 1) - 0.05).abs() < 1e-12);
        assert_eq!(chi_square_sf(f64::INFINITY, 3), 0.0);
    }

    #[test]
    fn central_case_of_noncentral() {
        for x in [0.5, 2.0, 7.0] {
            assert!((noncentral_chi_square_sf(x, 3, 0.0) - chi_square_sf(x, 3)).abs() < 1e-15);
            let tiny = noncentral_chi_square_sf(x, 3, 1e-12);
            assert!((tiny - chi_square_sf(x, 3)).abs() < 1e-10);
        }
    }

    #[test]
    fn noncentral_tail_matches_conditioning_oracle() {
        // χ²_2(nc) = (Z + √nc)² + χ²_1: condition on the χ²_1 part and use normal tails
        let nc: f64 = 4.0;
        let x = 6.0;
        let a = nc.sqrt();
        // with v = u², the χ²_1 density times dv/du is 2 φ(u)
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let g = |u: f64| {
            let v = u * u;
            let tail = if v >= x {
                1.0
            } else {
                let r = (x - v).sqrt();
                normal_sf(r - a) + normal_cdf(-r - a)
            };
            2.0 * phi(u) * tail
        };
        let oracle = crate::quadrature::integrate_with_breaks(&g, 0.0, 12.0, &[x.sqrt()], 1e-12);
        let got = noncentral_chi_square_sf(x, 2, nc);
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }
}
