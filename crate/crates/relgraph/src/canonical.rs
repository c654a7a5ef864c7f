//! Canonical JSON text and digests for timelines.
//!
//! Object keys are sorted, there is no whitespace, integers print as
//! integers, and every float is rounded to 9 significant digits and then
//! printed in its shortest round-trip decimal form. `-0` prints as `0`.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn to_canonical<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

/// Rounds `x` to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn write_float(x: f64, out: &mut String) {
    let r = round9(x);
    let r = if r == 0.0 { 0.0 } else { r };
    out.push_str(&format!("{r}"));
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                write_float(n.as_f64().expect("json numbers are finite"), out);
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("strings serialize"));
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
    }
}

/// Hex SHA-256 of the canonical form.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    Ok(hex::encode(Sha256::digest(to_canonical(value)?.as_bytes())))
}
