//! Sectioned key=value configuration text.
//!
//! One plain-text format drives experiment configs, config echoes inside run
//! directories, and the bundle checkpoint metadata. The format is a list of
//! `[section]` headers followed by `key = value` lines; `#` starts a comment.
//! Parsing is strict: malformed lines, keys outside a section, and duplicate
//! keys are errors, and `parse(serialize(x)) == x` holds for every map.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Flat map of `section.key -> value` with deterministic serialization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses the sectioned text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "unterminated section header"))?
                    .trim();
                if name.is_empty() || !name.chars().all(is_key_char) {
                    return Err(Error::config(
                        format!("line {}", lineno + 1),
                        format!("bad section name `{name}`"),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || !key.chars().all(is_key_char) {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("bad key `{key}`"),
                ));
            }
            let section = section.as_ref().ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("key `{key}` outside any [section]"))
            })?;
            let full = format!("{section}.{key}");
            if entries.insert(full.clone(), value.to_string()).is_some() {
                return Err(Error::config(full, "duplicate key"));
            }
        }
        Ok(Self { entries })
    }

    /// Serializes grouped by section, keys sorted. Round-trips through
    /// [`ConfigMap::parse`] exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (full, value) in &self.entries {
            let (section, key) = full.split_once('.').expect("qualified key");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Sets `section.key` to a display-formatted value.
    pub fn set(&mut self, full_key: &str, value: impl std::fmt::Display) {
        assert!(
            full_key.split_once('.').is_some_and(|(s, k)| {
                !s.is_empty() && !k.is_empty() && s.chars().all(is_key_char) && k.chars().all(is_key_char)
            }),
            "config keys must look like `section.key`, got `{full_key}`"
        );
        self.entries.insert(full_key.to_string(), value.to_string());
    }

    pub fn contains(&self, full_key: &str) -> bool {
        self.entries.contains_key(full_key)
    }

    /// Raw string value, or an error naming the missing key.
    pub fn get(&self, full_key: &str) -> Result<&str> {
        self.entries
            .get(full_key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(full_key, "missing key"))
    }

    /// Raw string value when present.
    pub fn get_opt(&self, full_key: &str) -> Option<&str> {
        self.entries.get(full_key).map(String::as_str)
    }

    /// Parsed value, or an error naming the key and the parse failure.
    pub fn get_parse<T>(&self, full_key: &str) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.get(full_key)?;
        raw.parse()
            .map_err(|e| Error::config(full_key, format!("cannot parse `{raw}`: {e}")))
    }

    /// Parsed value with a default when the key is absent.
    pub fn get_parse_or<T>(&self, full_key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.get(full_key) {
            None => Ok(default),
            Some(_) => self.get_parse(full_key),
        }
    }

    /// All keys under `section.`, in sorted order.
    pub fn section_keys(&self, section: &str) -> Vec<&str> {
        let prefix = format!("{section}.");
        self.entries
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .map(String::as_str)
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects any key not in the allow list; the error names every unknown
    /// key. Used by schema-validating loaders.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(unknown.join(", "), "unknown key(s)"))
        }
    }
}

fn is_key_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '/' || c == ':' || c == '*'
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_serialize_parse_is_fixpoint() {
        let text = "\n# comment\n[train]\nsteps = 100\nlr = 0.001\n\n[head]\nkind = mlp\n";
        let a = ConfigMap::parse(text).unwrap();
        let s = a.serialize();
        let b = ConfigMap::parse(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, b.serialize());
    }

    #[test]
    fn values_parse_with_named_errors() {
        let m = ConfigMap::parse("[train]\nsteps = twelve\n").unwrap();
        assert_eq!(m.get("train.steps").unwrap(), "twelve");
        let err = m.get_parse::<usize>("train.steps").unwrap_err().to_string();
        assert!(err.contains("train.steps"), "{err}");
        let err = m.get("train.missing").unwrap_err().to_string();
        assert!(err.contains("train.missing"), "{err}");
    }

    #[test]
    fn duplicate_and_orphan_keys_are_rejected() {
        assert!(ConfigMap::parse("[a]\nx = 1\nx = 2\n").is_err());
        assert!(ConfigMap::parse("x = 1\n").is_err());
        assert!(ConfigMap::parse("[a]\nno equals sign\n").is_err());
    }

    #[test]
    fn reject_unknown_names_all_offenders() {
        let m = ConfigMap::parse("[a]\nx = 1\ny = 2\n").unwrap();
        m.reject_unknown(&["a.x", "a.y"]).unwrap();
        let err = m.reject_unknown(&["a.x"]).unwrap_err().to_string();
        assert!(err.contains("a.y"), "{err}");
    }

    #[test]
    fn defaults_apply_only_when_absent() {
        let m = ConfigMap::parse("[a]\nx = 3\n").unwrap();
        assert_eq!(m.get_parse_or("a.x", 7usize).unwrap(), 3);
        assert_eq!(m.get_parse_or("a.z", 7usize).unwrap(), 7);
        assert!(m.get_parse_or::<usize>("a.x", 7).is_ok());
    }
}
