//! Flat `key = value` configuration with environment and command-line
//! overrides. Later layers win: defaults, file, `M2S_ADD_<KEY>` variables,
//! explicit `key=value` overrides.

use std::path::Path;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "M2S_ADD_";

/// A configuration settable from string pairs.
pub trait KeyValue {
    /// Every accepted key, in documentation order.
    const KEYS: &'static [&'static str];

    /// Sets one known key; `key` is always a member of [`Self::KEYS`].
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Current values of all keys, in [`Self::KEYS`] order.
    fn pairs(&self) -> Vec<(&'static str, String)>;

    /// Renders the config in the file format accepted by [`parse_pairs`].
    fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: format!("expected key = value, found {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn apply<T: KeyValue>(cfg: &mut T, key: &str, value: &str, origin: &str) -> Result<()> {
    if !T::KEYS.contains(&key) {
        return Err(Error::Config(format!(
            "unknown key {key:?} ({origin}); valid keys: {}",
            T::KEYS.join(", ")
        )));
    }
    cfg.set(key, value)
        .map_err(|e| Error::Config(format!("{key} = {value:?} ({origin}): {e}")))
}

/// Builds a config from `base`, an optional file, the environment (looked up
/// through `env`) and `key=value` overrides.
pub fn layered<T: KeyValue>(
    mut base: T,
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    overrides: &[String],
) -> Result<T> {
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        for (k, v, line) in parse_pairs(&text, &origin)? {
            apply(&mut base, &k, &v, &format!("{origin}:{line}"))?;
        }
    }
    for key in T::KEYS {
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(v) = env(&var) {
            apply(&mut base, key, v.trim(), &var)?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        apply(&mut base, k.trim(), v.trim(), "override")?;
    }
    Ok(base)
}

/// [`layered`] with the process environment.
pub fn load<T: KeyValue>(base: T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    layered(base, file, |k| std::env::var(k).ok(), overrides)
}

pub(crate) fn parse_num<N: std::str::FromStr>(value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{value:?} is not a valid number")))
}

pub(crate) fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{value:?} is not a boolean"))),
    }
}

/// Model size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Preset {
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected full or desk)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq)]
    struct Demo {
        epochs: usize,
        rate: f64,
    }

    impl KeyValue for Demo {
        const KEYS: &'static [&'static str] = &["epochs", "rate"];

        fn set(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                "epochs" => self.epochs = parse_num(value)?,
                _ => self.rate = parse_num(value)?,
            }
            Ok(())
        }

        fn pairs(&self) -> Vec<(&'static str, String)> {
            vec![("epochs", self.epochs.to_string()), ("rate", self.rate.to_string())]
        }
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nepochs = 3\nrate=0.5  # trailing\n\n").unwrap();
        let env = |k: &str| (k == "M2S_ADD_EPOCHS").then(|| "7".to_string());
        let cfg = layered(Demo::default(), Some(&p), env, &["rate=0.25".into()]).unwrap();
        assert_eq!(cfg, Demo { epochs: 7, rate: 0.25 });
        let back = parse_pairs(&cfg.to_text(), "x").unwrap();
        assert_eq!(back[0].0, "epochs");
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let err = layered(Demo::default(), None, |_| None, &["epoch=3".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch") && msg.contains("valid keys: epochs, rate"), "{msg}");
        assert!(layered(Demo::default(), None, |_| None, &["rate=fast".into()]).is_err());
        assert!(layered(Demo::default(), None, |_| None, &["rate".into()]).is_err());
        assert!(parse_pairs("just words\n", "f").is_err());
    }
}
