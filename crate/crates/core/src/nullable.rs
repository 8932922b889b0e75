//! Deserializers that read JSON `null` back as `NaN`, the inverse of how
//! non-finite floats are written.

use serde::{Deserialize, Deserializer};

fn or_nan(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

pub fn f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Option::<f64>::deserialize(d).map(or_nan)
}

pub fn vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    Vec::<Option<f64>>::deserialize(d).map(|v| v.into_iter().map(or_nan).collect())
}

pub fn matrix<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
    Vec::<Vec<Option<f64>>>::deserialize(d)
        .map(|m| m.into_iter().map(|r| r.into_iter().map(or_nan).collect()).collect())
}
