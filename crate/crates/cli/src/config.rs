//! Problem files: a small TOML document describing one degenerate system.
//!
//! ```toml
//! preset = "paper-ex-4"     # optional, explicit keys below override it
//! dims = [1, 1]             # [d, m]
//! p = "x2"                  # string or array of d strings
//! q = ["M1*(x1^2 - 1)"]     # string or array of m strings
//! moments = 1               # default: highest moment symbol used in q
//! x0 = [1.0, -1.0]
//! T = 5.0
//! ```

use std::path::Path;

use omkit::dsl::{DriftExpr, MAX_MOMENT_ORDER};
use omkit::system::DegenerateSystem;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, CliResult, Context};

pub const PRESETS: &[&str] = &["paper-ex-4", "ou-degenerate", "ou"];

const KEYS: &[&str] = &["preset", "dims", "p", "q", "moments", "x0", "T"];

/// Fully resolved problem. Serializes with sorted keys, which is what the
/// run manifest hashes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub dims: (usize, usize),
    pub p: Vec<String>,
    pub q: Vec<String>,
    pub moments: usize,
    pub x0: Vec<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
}

#[derive(Debug, Default)]
struct Partial {
    preset: Option<String>,
    dims: Option<(usize, usize)>,
    p: Option<Vec<String>>,
    q: Option<Vec<String>>,
    moments: Option<usize>,
    x0: Option<Vec<f64>>,
    t_end: Option<f64>,
}

fn preset(name: &str) -> CliResult<Partial> {
    let strs = |v: &[&str]| Some(v.iter().map(|s| s.to_string()).collect());
    let (p, q, moments, x0, t) = match name {
        "paper-ex-4" => (strs(&["x2"]), strs(&["M1*(x1^2-1)"]), 1, vec![1.0, -1.0], 5.0),
        "ou-degenerate" => (strs(&["x2"]), strs(&["-x2"]), 0, vec![0.0, 0.0], 1.0),
        "ou" => (strs(&["0"]), strs(&["-x2"]), 0, vec![0.0, 0.0], 1.0),
        other => {
            return Err(CliError::schema(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    Ok(Partial {
        preset: Some(name.to_string()),
        dims: Some((1, 1)),
        p,
        q,
        moments: Some(moments),
        x0: Some(x0),
        t_end: Some(t),
    })
}

pub fn load_config(path: &Path) -> CliResult<ProblemConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

/// A preset with no overrides.
pub fn preset_config(name: &str) -> CliResult<ProblemConfig> {
    resolve(preset(name)?)
}

pub fn parse_config(text: &str) -> CliResult<ProblemConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Schema {
        key: "<document>".into(),
        message: e.message().to_string(),
        offset: e.span().map(|s| s.start),
    })?;
    for key in table.keys() {
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::schema(key.as_str(), format!("unknown key (allowed: {})", KEYS.join(", "))));
        }
    }
    let mut cfg = match table.get("preset") {
        Some(v) => preset(as_str(v, "preset")?)?,
        None => Partial::default(),
    };
    if table.contains_key("p") || table.contains_key("q") {
        cfg.dims = None;
    }
    if table.contains_key("q") {
        cfg.moments = None;
    }
    if let Some(v) = table.get("dims") {
        let a = as_array(v, "dims")?;
        if a.len() != 2 {
            return Err(CliError::schema("dims", "expected [d, m]"));
        }
        cfg.dims = Some((as_usize(&a[0], "dims[0]")?, as_usize(&a[1], "dims[1]")?));
    }
    for (key, slot) in [("p", &mut cfg.p), ("q", &mut cfg.q)] {
        if let Some(v) = table.get(key) {
            *slot = Some(match v {
                Value::String(s) => vec![s.clone()],
                Value::Array(a) => a
                    .iter()
                    .enumerate()
                    .map(|(i, e)| as_str(e, &format!("{key}[{i}]")).map(str::to_string))
                    .collect::<CliResult<_>>()?,
                _ => return Err(CliError::schema(key, "expected a string or an array of strings")),
            });
        }
    }
    if let Some(v) = table.get("moments") {
        cfg.moments = Some(as_usize(v, "moments")?);
    }
    if let Some(v) = table.get("x0") {
        cfg.x0 = Some(
            as_array(v, "x0")?
                .iter()
                .enumerate()
                .map(|(i, e)| as_f64(e, &format!("x0[{i}]")))
                .collect::<CliResult<_>>()?,
        );
    }
    if let Some(v) = table.get("T") {
        cfg.t_end = Some(as_f64(v, "T")?);
    }
    resolve(cfg)
}

fn resolve(cfg: Partial) -> CliResult<ProblemConfig> {
    let missing = |k: &str| CliError::schema(k, "missing (set it or use a preset)");
    let q = cfg.q.ok_or_else(|| missing("q"))?;
    let p = cfg.p.ok_or_else(|| missing("p"))?;
    let (d, m) = cfg.dims.unwrap_or((p.len(), q.len()));
    if m == 0 {
        return Err(CliError::schema("dims[1]", "the noisy dimension m must be at least 1"));
    }
    if p.len() != d {
        return Err(CliError::schema("p", format!("expected {d} expressions, got {}", p.len())));
    }
    if q.len() != m {
        return Err(CliError::schema("q", format!("expected {m} expressions, got {}", q.len())));
    }
    let parse = |key: &str, s: &str| {
        DriftExpr::parse(s, (d, m)).map_err(|e| CliError::Schema {
            key: key.to_string(),
            message: e.to_string(),
            offset: Some(e.offset),
        })
    };
    for (i, s) in p.iter().enumerate() {
        let e = parse(&format!("p[{i}]"), s)?;
        if e.uses_moments() {
            return Err(CliError::schema(format!("p[{i}]"), "moment symbols are not allowed in p"));
        }
    }
    let mut used = 0usize;
    let mut used_by = String::new();
    for (j, s) in q.iter().enumerate() {
        let k = parse(&format!("q[{j}]"), s)?.max_moment_order() as usize;
        if k > used {
            used = k;
            used_by = format!("q[{j}]");
        }
    }
    let moments = cfg.moments.unwrap_or(used);
    if moments > MAX_MOMENT_ORDER as usize {
        return Err(CliError::schema("moments", format!("at most {MAX_MOMENT_ORDER}")));
    }
    if used > moments {
        return Err(CliError::schema(used_by, format!("references M{used} but moments = {moments}")));
    }
    let x0 = cfg.x0.unwrap_or_else(|| vec![0.0; d + m]);
    if x0.len() != d + m {
        return Err(CliError::schema("x0", format!("expected {} entries, got {}", d + m, x0.len())));
    }
    let t_end = cfg.t_end.ok_or_else(|| missing("T"))?;
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(CliError::schema("T", "must be positive and finite"));
    }
    Ok(ProblemConfig {
        preset: cfg.preset,
        dims: (d, m),
        p,
        q,
        moments,
        x0,
        t_end,
    })
}

impl ProblemConfig {
    pub fn system(&self) -> CliResult<DegenerateSystem> {
        let p: Vec<&str> = self.p.iter().map(String::as_str).collect();
        let q: Vec<&str> = self.q.iter().map(String::as_str).collect();
        DegenerateSystem::new(self.dims.0, self.dims.1, &p, &q, self.moments, &self.x0).context("system")
    }
}

fn as_str<'a>(v: &'a Value, key: &str) -> CliResult<&'a str> {
    v.as_str().ok_or_else(|| CliError::schema(key, format!("expected a string, found {}", v.type_str())))
}

fn as_array<'a>(v: &'a Value, key: &str) -> CliResult<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| CliError::schema(key, format!("expected an array, found {}", v.type_str())))
}

fn as_usize(v: &Value, key: &str) -> CliResult<usize> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => Err(CliError::schema(key, "expected a non-negative integer")),
    }
}

fn as_f64(v: &Value, key: &str) -> CliResult<f64> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(CliError::schema(key, "expected a finite number")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_key(r: CliResult<ProblemConfig>) -> String {
        match r {
            Err(CliError::Schema { key, .. }) => key,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn example_preset_with_horizon_override() {
        let c = parse_config("preset = \"paper-ex-4\"\nT = 2.5\n").unwrap();
        assert_eq!(c.dims, (1, 1));
        assert_eq!(c.p, ["x2"]);
        assert_eq!(c.q, ["M1*(x1^2-1)"]);
        assert_eq!(c.x0, [1.0, -1.0]);
        assert_eq!(c.t_end, 2.5);
        c.system().unwrap();
    }

    #[test]
    fn preset_only_resolves_completely() {
        let c = parse_config("preset = \"ou-degenerate\"").unwrap();
        assert_eq!(c.q, ["-x2"]);
        assert_eq!(c.moments, 0);
    }

    #[test]
    fn moment_beyond_order_is_a_schema_error() {
        let r = parse_config("p = \"x2\"\nq = \"M3 - x2\"\nmoments = 2\nT = 1\n");
        assert_eq!(schema_key(r), "q[0]");
    }

    #[test]
    fn moment_order_is_inferred() {
        let c = parse_config("p = \"x2\"\nq = \"M2 - x2\"\nT = 1\n").unwrap();
        assert_eq!(c.moments, 2);
    }

    #[test]
    fn errors_carry_key_paths() {
        assert_eq!(schema_key(parse_config("preset = \"ou\"\nfoo = 1\n")), "foo");
        assert_eq!(schema_key(parse_config("preset = \"ou\"\nx0 = [0, \"a\"]\n")), "x0[1]");
        assert_eq!(schema_key(parse_config("preset = \"ou\"\nq = [\"-x2 +\"]\n")), "q[0]");
        assert_eq!(schema_key(parse_config("preset = \"nope\"")), "preset");
        assert_eq!(schema_key(parse_config("dims = [1, 1]\np = \"x2\"\nq = \"-x2\"\n")), "T");
    }

    #[test]
    fn parse_errors_keep_their_offset() {
        match parse_config("preset = \"ou\"\nq = \"-x2 * (\"\n") {
            Err(CliError::Schema { offset: Some(o), .. }) => assert!(o > 0),
            other => panic!("{other:?}"),
        }
    }
}
