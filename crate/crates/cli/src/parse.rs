//! Parsers for the small rule languages accepted on the command line.

use anyhow::{bail, Context, Result};
use elanova::{FeatureRule, InteractionRule, PropensitySpec};

/// 1-based `x<c>` to a 0-based column.
fn covariate_index(s: &str, p: usize) -> Result<usize> {
    let c: usize = s
        .strip_prefix('x')
        .and_then(|d| d.parse().ok())
        .with_context(|| format!("expected a covariate like `x1`, got `{s}`"))?;
    if c == 0 || c > p {
        bail!("covariate `{s}` out of range: the data has {p} covariates");
    }
    Ok(c - 1)
}

/// `none`, `x<c>*t` or `t*(x<c>-<s>)^2`.
pub fn interaction(spec: &str, p: usize) -> Result<InteractionRule> {
    let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    if s == "none" {
        return Ok(InteractionRule::None);
    }
    if let Some(x) = s.strip_suffix("*t") {
        return Ok(InteractionRule::CovariateTime {
            covariate: covariate_index(x, p)?,
        });
    }
    if let Some(inner) = s.strip_prefix("t*(").and_then(|r| r.strip_suffix(")^2")) {
        let (x, shift) = inner
            .split_once('-')
            .with_context(|| format!("expected `t*(x<c>-<shift>)^2`, got `{spec}`"))?;
        let shift: f64 = shift
            .parse()
            .with_context(|| format!("bad shift in `{spec}`"))?;
        return Ok(InteractionRule::ShiftedSquareTime {
            covariate: covariate_index(x, p)?,
            shift,
        });
    }
    bail!("unknown interaction rule `{spec}`; expected none, x<c>*t or t*(x<c>-<s>)^2")
}

/// `intercept`, `[1+]x<c>`, `[1+]x<c>+dy`, `M1[:x<c>]`, `M2`, `M3`.
pub fn propensity(spec: &str, p: usize) -> Result<PropensitySpec> {
    let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    let rule = match s.as_str() {
        "intercept" | "1" => FeatureRule::Intercept,
        "M2" => FeatureRule::M2,
        "M3" => FeatureRule::M3,
        "M1" => FeatureRule::M1 { covariate: 0 },
        _ if s.starts_with("M1:") => FeatureRule::M1 {
            covariate: covariate_index(&s[3..], p)?,
        },
        _ => {
            let (intercept, rest) = match s.strip_prefix("1+") {
                Some(r) => (true, r),
                None => (false, s.as_str()),
            };
            match rest.strip_suffix("+dy") {
                Some(x) => FeatureRule::LagCovariateResponseDiff {
                    covariate: covariate_index(x, p)?,
                    intercept,
                },
                None => FeatureRule::LagCovariate {
                    covariate: covariate_index(rest, p)?,
                    intercept,
                },
            }
        }
    };
    if p == 0 && matches!(rule, FeatureRule::M1 { .. }) {
        bail!("M1 needs a covariate");
    }
    Ok(PropensitySpec::new(rule))
}

/// Default dropout model: last covariate value with an intercept, or intercept only.
pub fn default_propensity(p: usize) -> PropensitySpec {
    if p == 0 {
        PropensitySpec::new(FeatureRule::Intercept)
    } else {
        PropensitySpec::new(FeatureRule::LagCovariate {
            covariate: 0,
            intercept: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthChoice {
    CrossValidation,
    RuleOfThumb,
    Fixed(f64),
}

pub fn bandwidth(spec: &str) -> Result<BandwidthChoice> {
    Ok(match spec {
        "cv" => BandwidthChoice::CrossValidation,
        "rot" => BandwidthChoice::RuleOfThumb,
        _ => {
            let h: f64 = spec
                .parse()
                .with_context(|| format!("bandwidth must be cv, rot or a number, got `{spec}`"))?;
            if !(h > 0.0 && h.is_finite()) {
                bail!("bandwidth must be positive, got {h}");
            }
            BandwidthChoice::Fixed(h)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interaction_rules() {
        assert!(matches!(
            interaction("none", 2).unwrap(),
            InteractionRule::None
        ));
        assert!(matches!(
            interaction("x2*t", 2).unwrap(),
            InteractionRule::CovariateTime { covariate: 1 }
        ));
        match interaction("t*(x1-1.5)^2", 1).unwrap() {
            InteractionRule::ShiftedSquareTime { covariate, shift } => {
                assert_eq!((covariate, shift), (0, 1.5));
            }
            other => panic!("{other:?}"),
        }
        assert!(interaction("x3*t", 2).is_err());
        assert!(interaction("t^2", 2).is_err());
    }

    #[test]
    fn propensity_rules_round_trip_names() {
        for (s, name) in [
            ("1+x1", "1+x1[m-1]"),
            ("x2+dy", "x2[m-1]+dy[m-1]"),
            ("M1:x2", "M1"),
            ("M3", "M3"),
        ] {
            assert_eq!(propensity(s, 2).unwrap().name(), name);
        }
        assert!(propensity("x0", 2).is_err());
        assert!(propensity("M1", 0).is_err());
    }

    #[test]
    fn bandwidth_choices() {
        assert_eq!(bandwidth("cv").unwrap(), BandwidthChoice::CrossValidation);
        assert_eq!(bandwidth("0.2").unwrap(), BandwidthChoice::Fixed(0.2));
        assert!(bandwidth("-1").is_err());
        assert!(bandwidth("wide").is_err());
    }
}
