//! JSON reports. Keys keep insertion order and floats are written with
//! `{:.16e}` (17 significant digits, lowercase scientific) so that the
//! same config always renders to the same bytes.

use num_complex::Complex64 as C64;
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u64 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fixed-format float; NaN and infinities become `null`.
pub fn num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Value::Number(format!("{x:.16e}").parse::<Number>().expect("formatted float is a JSON number"))
}

pub fn cnum(z: C64) -> Value {
    obj([("re", num(z.re)), ("im", num(z.im))])
}

pub fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

pub fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

pub fn obj<const K: usize>(pairs: [(&str, Value); K]) -> Value {
    let mut m = Map::new();
    for (k, v) in pairs {
        m.insert(k.to_string(), v);
    }
    Value::Object(m)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Top-level report: header fields first, then command output.
#[derive(Debug, Clone)]
pub struct Report {
    map: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str, config_text: &str) -> Self {
        let mut map = Map::new();
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        map.insert("toolkit".into(), Value::from("fiocalc"));
        map.insert("version".into(), Value::from(VERSION));
        map.insert("command".into(), Value::from(command));
        map.insert("config_sha256".into(), Value::from(sha256_hex(config_text.as_bytes())));
        Report { map }
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.map.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.map.get(key)
    }

    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.map).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_fixed() {
        assert_eq!(num(1.0).to_string(), "1.0000000000000000e+0");
        assert_eq!(num(-0.125).to_string(), "-1.2500000000000000e-1");
        assert_eq!(num(f64::NAN), Value::Null);
        assert_eq!(num(1e300).to_string(), "1.0000000000000001e+300");
        // Round trip keeps the value.
        let v: f64 = num(0.1 + 0.2).to_string().parse().unwrap();
        assert_eq!(v, 0.1 + 0.2);
    }

    #[test]
    fn header_and_order() {
        let mut r = Report::new("analyze", "a = 1\n");
        r.insert("zeta", num(2.0));
        r.insert("alpha", cnum(C64::new(0.0, -1.0)));
        let text = r.render();
        assert!(text.find("schema_version").unwrap() < text.find("zeta").unwrap());
        assert!(text.find("zeta").unwrap() < text.find("alpha").unwrap());
        assert_eq!(r.get("config_sha256").unwrap().as_str().unwrap().len(), 64);
        let parsed: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["alpha"]["im"].as_f64(), Some(-1.0));
        assert_eq!(Report::new("analyze", "a = 1\n").render(), Report::new("analyze", "a = 1\n").render());
    }
}
