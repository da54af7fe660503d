//! Canonical JSON: sorted keys, every number rendered as a float with nine
//! significant digits. All file outputs go through this writer so identical
//! inputs produce byte-identical artifacts.

use serde::Serialize;
use serde_json::Value;

/// Formats a finite f64 with nine significant digits, `%g`-style: fixed
/// notation for moderate exponents, scientific otherwise, trailing zeros
/// trimmed, and always a decimal point or exponent so the token stays a
/// float.
pub fn format_f64(x: f64) -> String {
    const SIG: usize = 9;
    if x == 0.0 {
        return "0.0".to_string();
    }
    let sci = format!("{:.*e}", SIG - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    let sign = if neg { "-" } else { "" };

    if exp >= -4 && exp < SIG as i32 {
        // Fixed notation: place the decimal point exp+1 digits in.
        let point = exp + 1;
        if point <= 0 {
            format!("{sign}0.{}{}", "0".repeat((-point) as usize), digits)
        } else if (point as usize) >= digits.len() {
            format!(
                "{sign}{}{}.0",
                digits,
                "0".repeat(point as usize - digits.len())
            )
        } else {
            let (int, frac) = digits.split_at(point as usize);
            format!("{sign}{int}.{frac}")
        }
    } else {
        let (lead, rest) = digits.split_at(1);
        if rest.is_empty() {
            format!("{sign}{lead}.0e{exp}")
        } else {
            format!("{sign}{lead}.{rest}e{exp}")
        }
    }
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            let x = n.as_f64().expect("finite JSON number");
            out.push_str(&format_f64(x));
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string encodes"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push(':');
                write_value(out, &map[*k]);
            }
            out.push('}');
        }
    }
}

/// Canonical rendering of a JSON value.
pub fn to_canonical_value(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v);
    out
}

/// Canonical rendering of any serializable value.
pub fn to_canonical<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("value serializes");
    to_canonical_value(&value)
}

/// Re-canonicalizes raw JSON text.
pub fn canonicalize_text(text: &str) -> Result<String, serde_json::Error> {
    let v: Value = serde_json::from_str(text)?;
    Ok(to_canonical_value(&v))
}
