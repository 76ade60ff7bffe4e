//! Flat `section.key = value` config files and flag/file/default layering.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    "train.dims",
    "train.steps",
    "train.seed",
    "train.data_seed",
    "train.learning_rate",
    "train.batch_size",
    "train.snapshot_every",
    "train.calib_rows",
    "mapping.signal",
    "mapping.y_min",
    "mapping.y_max",
    "mapping.slices",
    "mapping.zero_epsilon",
    "mapping.multiply_activation",
    "quant.bits",
    "quant.group_size",
    "quant.protect_fraction",
    "search.grid_points",
    "search.alpha_lo",
    "search.alpha_hi",
    "search.normalize_scale",
    "search.max_calib_rows",
    "eval.held_out_rows",
    "eval.seed",
    "ablate.signals",
    "ablate.fractions",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves one setting: an explicit flag wins, then the config file, then
/// the flag's default (already in `parsed`).
pub struct Layered<'a> {
    pub matches: &'a ArgMatches,
    pub file: &'a ConfigFile,
}

impl Layered<'_> {
    fn explicit(&self, id: &str) -> bool {
        matches!(
            self.matches.value_source(id),
            Some(ValueSource::CommandLine | ValueSource::EnvVariable)
        )
    }

    pub fn pick<T: FromStr>(&self, id: &str, key: &str, parsed: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pick_with(id, key, parsed, |s| s.parse::<T>().map_err(|e| e.to_string()))
    }

    pub fn pick_with<T>(
        &self,
        id: &str,
        key: &str,
        parsed: T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, CliError> {
        if self.explicit(id) {
            return Ok(parsed);
        }
        match self.file.get(key) {
            Some(raw) => parse(raw).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
            None => Ok(parsed),
        }
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let c = ConfigFile::parse("# run\n\nsearch.grid_points = 10  # fewer\nquant.bits=4\n").unwrap();
        assert_eq!(c.get("search.grid_points"), Some("10"));
        assert_eq!(c.get("quant.bits"), Some("4"));
        assert_eq!(c.get("quant.group_size"), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for bad in ["search.gridpoints = 3", "quant.bits = 3\nquant.bits = 4", "just words"] {
            assert!(matches!(ConfigFile::parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<usize>("8, 16,8").unwrap(), vec![8, 16, 8]);
        assert!(parse_list::<usize>("").unwrap().is_empty());
        assert!(parse_list::<f64>("0.1,x").is_err());
    }
}
