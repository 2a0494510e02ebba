//! Flat `key = value` run configuration with typed accessors.
//!
//! Values come from three layers, later layers winning: the subcommand's
//! defaults, the config file, then `--seed` and command-line overrides.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::CliError;

/// A key a subcommand understands, with its default. `None` marks a key
/// that must be supplied.
pub type KeySpec = (&'static str, Option<&'static str>);

/// Value used for keys whose default depends on other keys.
pub const AUTO: &str = "auto";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    values: BTreeMap<String, String>,
}

/// Parses a config file body into ordered `(key, value)` pairs.
///
/// `#` starts a comment. Blank lines are skipped and a key may appear once.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_pair(line).map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        if seen.insert(key.clone(), lineno + 1).is_some() {
            return Err(CliError::Config(format!("line {}: key `{key}` is given twice", lineno + 1)));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn split_pair(text: &str) -> Result<(String, String), String> {
    let (k, v) = text.split_once('=').ok_or_else(|| format!("expected `key = value`, got `{text}`"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("missing key in `{text}`"));
    }
    if v.is_empty() {
        return Err(format!("missing value for `{k}`"));
    }
    Ok((k.to_string(), v.to_string()))
}

impl RunConfig {
    /// Layers defaults, file entries, `--seed` and overrides.
    ///
    /// Keys unknown to every subcommand are rejected. Keys that belong to a
    /// different subcommand are dropped and reported in the returned list of
    /// warnings.
    pub fn resolve(
        command: &'static str,
        keys: &[KeySpec],
        known: &[&str],
        file_entries: &[(String, String)],
        seed: Option<u64>,
        overrides: &[String],
    ) -> Result<(Self, Vec<String>), CliError> {
        let mut values: BTreeMap<String, String> =
            keys.iter().filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string()))).collect();
        let mut warnings = Vec::new();

        let mut layer: Vec<(String, String)> = file_entries.to_vec();
        for o in overrides {
            layer.push(split_pair(o).map_err(|e| CliError::Config(format!("override: {e}")))?);
        }
        if let Some(s) = seed {
            layer.push(("seed".into(), s.to_string()));
        }
        for (k, v) in layer {
            if keys.iter().any(|(name, _)| *name == k) {
                values.insert(k, v);
            } else if known.contains(&k.as_str()) {
                warnings.push(format!("key `{k}` is not used by `{command}` and was ignored"));
            } else {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
        }
        for (k, d) in keys {
            if d.is_none() && !values.contains_key(*k) {
                return Err(CliError::Config(format!("`{k}` is required")));
            }
        }
        Ok((Self { command, values }, warnings))
    }

    fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Config(format!("`{key}` is not available to `{}`", self.command)))
    }

    fn invalid(key: &str, value: &str, what: &str) -> CliError {
        CliError::Config(format!("`{key} = {value}`: expected {what}"))
    }

    pub fn is_auto(&self, key: &str) -> bool {
        self.values.get(key).is_some_and(|v| v == AUTO)
    }

    /// Replaces a value, typically an `auto` default once it is known.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn string(&self, key: &str) -> Result<String, CliError> {
        self.raw(key).map(str::to_string)
    }

    pub fn real(&self, key: &str) -> Result<f64, CliError> {
        let v = self.raw(key)?;
        parse_real(v).ok_or_else(|| Self::invalid(key, v, "a finite number"))
    }

    pub fn reals(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.raw(key)?;
        v.split(',')
            .map(parse_real)
            .collect::<Option<Vec<_>>>()
            .filter(|xs| !xs.is_empty())
            .ok_or_else(|| Self::invalid(key, v, "a comma-separated list of numbers"))
    }

    /// A non-negative integer; `1e6` style is accepted for convenience.
    pub fn count(&self, key: &str) -> Result<usize, CliError> {
        let v = self.raw(key)?;
        parse_count(v).ok_or_else(|| Self::invalid(key, v, "a non-negative integer"))
    }

    pub fn unsigned(&self, key: &str) -> Result<u64, CliError> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Self::invalid(key, v, "an unsigned 64-bit integer"))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        let v = self.raw(key)?;
        match v.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(Self::invalid(key, v, "true or false")),
        }
    }

    /// The resolved configuration as a config file that reproduces the run.
    pub fn render(&self) -> String {
        let mut s = format!("# resolved configuration for `hmc-tune {}`\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// A finite real, also accepting `pi`, `c*pi`, `pi/d` and `c*pi/d`.
pub fn parse_real(text: &str) -> Option<f64> {
    let t = text.trim();
    let (num, den) = match t.split_once('/') {
        Some((n, d)) => (n.trim(), Some(d.trim().parse::<f64>().ok()?)),
        None => (t, None),
    };
    let value = match num.strip_suffix("pi") {
        Some(prefix) => {
            let coef = prefix.trim().trim_end_matches('*').trim();
            let c = if coef.is_empty() { 1.0 } else { coef.parse::<f64>().ok()? };
            c * PI
        }
        None => num.parse::<f64>().ok()?,
    };
    let value = match den {
        Some(d) if d != 0.0 => value / d,
        Some(_) => return None,
        None => value,
    };
    value.is_finite().then_some(value)
}

fn parse_count(text: &str) -> Option<usize> {
    let t = text.trim();
    if let Ok(n) = t.parse::<usize>() {
        return Some(n);
    }
    let x: f64 = t.parse().ok()?;
    (x >= 0.0 && x.fract() == 0.0 && x <= 2f64.powi(53)).then_some(x as usize)
}
