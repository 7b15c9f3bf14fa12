//! Run configuration: built-in defaults, then `ATNJ_SEED`, then a `key = value`
//! file, then command-line flags. Later sources win.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use atnj_core::injector::{InjectionConfig, ScaleScope};

pub const SEED_ENV: &str = "ATNJ_SEED";

/// Every recognized key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model", ""),
    ("model_seed", "1"),
    ("encoder", ""),
    ("out", ""),
    ("outdir", "out"),
    ("image", ""),
    ("latent", ""),
    ("traj", ""),
    ("concept_image", ""),
    ("data_dir", ""),
    ("iters", "200"),
    ("trace", ""),
    ("prompt", "a photo of blob"),
    ("prompt_ref", "a photo of blob"),
    ("ws", "1"),
    ("wc", "1"),
    ("k", "2"),
    ("coarse_token", "3"),
    ("coarse_token_ref", "3"),
    ("scale_scope", "all"),
    ("self_inject", "true"),
    ("cross_inject", "true"),
    ("mask", "true"),
    ("jobs", "1"),
    ("axis", ""),
    ("values", ""),
    ("verify", "false"),
    ("golden_dir", ""),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "reading {}: {e}", p.display()),
            ConfigError::Invalid(m) => f.write_str(m),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, (String, Source)>,
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _)| *k).find(|k| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment. Keys may use `-` or `_`.
pub fn parse_file(text: &str) -> Result<Vec<(&'static str, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim().replace('-', "_");
        let key = known(&k)
            .ok_or_else(|| invalid(format!("config line {}: unknown key {k:?}", n + 1)))?;
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(
        env_seed: Option<String>,
        file: Option<&Path>,
        flags: Vec<(&'static str, String)>,
    ) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<_, _> = KEYS
            .iter()
            .map(|(k, v)| (*k, (v.to_string(), Source::Default)))
            .collect();
        if let Some(seed) = env_seed {
            values.insert("seed", (seed, Source::Env));
        }
        if let Some(path) = file {
            let text =
                fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
            for (k, v) in parse_file(&text)? {
                values.insert(k, (v, Source::File));
            }
        }
        for (k, v) in flags {
            values.insert(k, (v, Source::Flag));
        }
        let cfg = Self { values };
        cfg.u64("seed")?;
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key].0
    }

    /// `key = value  # source` for the given keys.
    pub fn render(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| {
                let (v, s) = &self.values[k];
                format!("{k} = {v}  # {s}\n")
            })
            .collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.raw(key)
            .parse()
            .map_err(|_| invalid(format!("{key}: cannot parse {:?}", self.raw(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.parsed(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parsed(key)
    }

    pub fn f32(&self, key: &str) -> Result<f32, ConfigError> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(invalid(format!("{key}: expected a boolean, got {v:?}"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.path(key)
            .ok_or_else(|| invalid(format!("missing required --{}", key.replace('_', "-"))))
    }

    pub fn words(&self, key: &str) -> Vec<String> {
        self.raw(key).split_whitespace().map(String::from).collect()
    }

    /// Comma-separated list, as given.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn raw_value(&self, key: &str) -> &str {
        self.raw(key)
    }

    pub fn injection(&self) -> Result<InjectionConfig, ConfigError> {
        let scope: ScaleScope = self
            .raw("scale_scope")
            .parse()
            .map_err(|_| invalid(format!("scale_scope: unknown {:?}", self.raw("scale_scope"))))?;
        Ok(InjectionConfig {
            w_s: self.f32("ws")?,
            w_c: self.f32("wc")?,
            k: self.usize("k")?,
            coarse_token_gen: self.usize("coarse_token")?,
            coarse_token_ref: self.usize("coarse_token_ref")?,
            scale_scope: scope,
            enable_self_inject: self.bool("self_inject")?,
            enable_cross_inject: self.bool("cross_inject")?,
            enable_mask: self.bool("mask")?,
            ..InjectionConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_env_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# run\nseed = 5\nws = 2.5 # stronger\nprompt-ref = a dog\n").unwrap();
        let cfg = RunConfig::resolve(
            Some("9".into()),
            Some(&path),
            vec![("ws", "3".into())],
        )
        .unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 5);
        assert_eq!(cfg.f32("ws").unwrap(), 3.0);
        assert_eq!(cfg.words("prompt_ref"), ["a", "dog"]);
        assert_eq!(cfg.f32("wc").unwrap(), 1.0);
        let shown = cfg.render(&["seed", "ws", "wc"]);
        assert_eq!(shown, "seed = 5  # file\nws = 3  # flag\nwc = 1  # default\n");
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let cfg = RunConfig::resolve(Some("42".into()), None, vec![]).unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 42);
        let cfg = RunConfig::resolve(Some("42".into()), None, vec![("seed", "1".into())]).unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 1);
        assert!(RunConfig::resolve(Some("x".into()), None, vec![]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse_file("colour = red"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_file("seed 4"), Err(ConfigError::Invalid(_))));
        assert_eq!(parse_file("\n  # only a comment\n").unwrap(), vec![]);
    }

    #[test]
    fn injection_fields_map_through() {
        let cfg = RunConfig::resolve(
            None,
            None,
            vec![
                ("mask", "false".into()),
                ("scale_scope", "injected-only".into()),
                ("k", "4".into()),
            ],
        )
        .unwrap();
        let inj = cfg.injection().unwrap();
        assert!(!inj.enable_mask);
        assert_eq!(inj.scale_scope, ScaleScope::InjectedOnly);
        assert_eq!(inj.k, 4);
        assert_eq!(inj.coarse_token_gen, 3);
    }
}
