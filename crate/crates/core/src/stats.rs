//! Reference-distribution quantiles and tail probabilities.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub const CONF_LEVEL: f64 = 0.95;

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Two-sided normal p-value for statistic `z`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    2.0 * Normal::new(0.0, 1.0).expect("standard normal").sf(z.abs())
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p)
}

pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    2.0 * StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(t.abs())
}

/// Upper critical value for a two-sided 95% interval.
pub fn z975() -> f64 {
    normal_quantile(0.5 + CONF_LEVEL / 2.0)
}

pub fn t975(df: f64) -> f64 {
    t_quantile(0.5 + CONF_LEVEL / 2.0, df)
}
