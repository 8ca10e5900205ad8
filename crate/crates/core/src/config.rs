//! `key=value` text files used for memory maps, policies and workload specs.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
}

/// Parsed `key=value` pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key=value, found `{line}`"),
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    /// Parses whitespace-separated `key=value` tokens on a single line.
    pub fn parse_inline(line: &str) -> Result<KeyValues, ConfigError> {
        KeyValues::parse(&line.split_whitespace().collect::<Vec<_>>().join("\n"))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects any key outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::Unknown(k.to_string())),
            None => Ok(()),
        }
    }

    pub fn get<T: ConfigValue>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| {
                T::parse_value(v).map_err(|message| ConfigError::Value {
                    key: key.to_string(),
                    message,
                })
            })
            .transpose()
    }

    pub fn require<T: ConfigValue>(&self, key: &str) -> Result<T, ConfigError> {
        self.get(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_or<T: ConfigValue>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }
}

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
}

impl ConfigValue for u32 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let s = s.replace('_', "");
        match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(h) => u32::from_str_radix(h, 16),
            None => s.parse(),
        }
        .map_err(|e| format!("`{s}`: {e}"))
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("`{s}`: {e}"))
    }
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("`{s}`: {e}"))
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
}

impl ConfigValue for crate::isa::EncodingVariant {
    fn parse_value(s: &str) -> Result<Self, String> {
        Self::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values() {
        let kv =
            KeyValues::parse("# map\nrom_base = 0x8000_0000\nram_size=65536\ncontiguous=yes\n")
                .unwrap();
        assert_eq!(kv.require::<u32>("rom_base").unwrap(), 0x8000_0000);
        assert_eq!(kv.require::<u32>("ram_size").unwrap(), 65536);
        assert!(kv.require::<bool>("contiguous").unwrap());
        assert_eq!(
            kv.require::<u32>("missing"),
            Err(ConfigError::Missing("missing".into()))
        );
        assert!(kv.only(&["rom_base", "ram_size"]).is_err());
    }

    #[test]
    fn syntax_errors_carry_line() {
        assert!(matches!(
            KeyValues::parse("a=1\nnonsense\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a=1\na=2"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        let kv = KeyValues::parse("flag=maybe").unwrap();
        assert!(matches!(
            kv.require::<bool>("flag"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn inline() {
        let kv = KeyValues::parse_inline("variant=dual threshold=64 near_ram=1").unwrap();
        assert_eq!(kv.raw("variant"), Some("dual"));
        assert_eq!(kv.require::<u32>("threshold").unwrap(), 64);
    }
}
