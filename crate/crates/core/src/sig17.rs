//! Floats written with 17 significant digits so files round-trip bit-exactly
//! and read the same on every platform.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sig17(pub f64);

pub fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format_sig17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}
