//! Deterministic JSON printing with floats at 17 significant digits.
//!
//! `serde_json`'s default float formatting is shortest-roundtrip; the on-disk
//! formats here pin floats to 17 significant digits instead so files are
//! byte-stable and still round-trip `f64` exactly.

use crate::{Error, Result};
use serde_json::Value;
use std::fmt::Write as _;

/// One `f64` as a JSON number with 17 significant digits, e.g. `5.0000000000000000e-1`.
pub(crate) fn fmt_f64(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::numerical(format!("cannot serialize non-finite value {x}")));
    }
    Ok(format!("{x:.16e}"))
}

/// Renders a `serde_json::Value` with deterministic layout (no whitespace,
/// object keys in insertion order, floats via [`fmt_f64`]).
pub(crate) fn value_to_string(v: &Value) -> Result<String> {
    let mut out = String::new();
    write_value(v, &mut out)?;
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                let f = n
                    .as_f64()
                    .ok_or_else(|| Error::numerical("unrepresentable JSON number"))?;
                out.push_str(&fmt_f64(f)?);
            }
        }
        Value::String(s) => {
            // serde_json handles escaping; a bare string serialization cannot fail.
            out.push_str(&serde_json::to_string(s).expect("string serialization"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serialization"));
                out.push(':');
                write_value(item, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// Serializes any `Serialize` type through [`value_to_string`].
pub(crate) fn to_string_17<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::numerical(format!("serialization failed: {e}")))?;
    value_to_string(&v)
}
