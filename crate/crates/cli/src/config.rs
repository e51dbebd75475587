//! Resolution of a run configuration from an optional JSON file and flags.
//!
//! The file is read as a JSON object, each flag that was given overwrites
//! one leaf of it, and the result is deserialized into the subcommand's
//! run struct (which rejects unknown keys).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::CliError;

const LOSS_KEYS: [&str; 5] = ["family", "kernel", "mode", "margin_m", "margin_tau"];
const SARE_ONLY_KEYS: [&str; 2] = ["kernel", "mode"];
pub const DEFAULT_KERNEL: &str = "gaussian";
pub const DEFAULT_MODE: &str = "joint";

/// Flags that were given on the command line, as JSON leaves keyed by
/// their path in the run configuration.
#[derive(Debug, Default)]
pub struct Overrides {
    leaves: Vec<(Vec<String>, Value)>,
}

impl Overrides {
    pub fn set(&mut self, path: &[&str], value: impl Into<Value>) {
        self.leaves
            .push((path.iter().map(|s| s.to_string()).collect(), value.into()));
    }

    pub fn set_opt<T: Into<Value>>(&mut self, path: &[&str], value: Option<T>) {
        if let Some(v) = value {
            self.set(path, v);
        }
    }

    fn apply(self, root: &mut Value) -> Result<(), CliError> {
        for (path, value) in self.leaves {
            set_path(root, &path, value)?;
        }
        Ok(())
    }
}

/// Reads `path` as a JSON object, or an empty object when no file is given.
pub fn read_file(path: Option<&Path>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if v.is_object() {
        Ok(v)
    } else {
        Err(CliError::config(format!(
            "{}: top level must be a JSON object",
            path.display()
        )))
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut node = root;
    for key in parents {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("`{key}`'s parent is not an object")))?;
        node = obj
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::config(format!("`{last}`'s parent is not an object")))?
        .insert(last.clone(), value);
    Ok(())
}

/// Loss flags shared by every subcommand that takes an objective.
#[derive(Debug, Default, Clone)]
pub struct LossFlags {
    pub family: Option<&'static str>,
    pub kernel: Option<&'static str>,
    pub mode: Option<&'static str>,
    pub margin_m: Option<f64>,
    pub margin_tau: Option<f64>,
}

/// Applies loss flags under `at`, then checks the resulting loss object:
/// only known keys, kernel and mode only for the `sare` family, and
/// `sare` filled in with the default kernel and mode where absent.
///
/// A kernel or mode flag on its own selects the `sare` family. Choosing a
/// non-SARE family by flag drops any kernel or mode the file carried.
fn resolve_loss(root: &mut Value, at: &[&str], flags: &LossFlags) -> Result<(), CliError> {
    let flag_family = match (flags.family, flags.kernel.or(flags.mode)) {
        (Some(f), Some(_)) if f != "sare" => {
            return Err(CliError::config(format!(
                "--kernel and --mode only apply to the sare family, not {f}"
            )))
        }
        (Some(f), _) => Some(f),
        (None, Some(_)) => Some("sare"),
        (None, None) => None,
    };
    let mut node = &mut *root;
    for key in at {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("`{key}`'s parent is not an object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let where_ = at.join(".");
    let loss = node
        .as_object_mut()
        .ok_or_else(|| CliError::config(format!("`{where_}` must be an object")))?;
    if let Some(f) = flag_family {
        if f != "sare" {
            for k in SARE_ONLY_KEYS {
                loss.remove(k);
            }
        }
        loss.insert("family".into(), f.into());
    }
    for (key, v) in [("kernel", flags.kernel), ("mode", flags.mode)] {
        if let Some(v) = v {
            loss.insert(key.into(), v.into());
        }
    }
    for (key, v) in [
        ("margin_m", flags.margin_m),
        ("margin_tau", flags.margin_tau),
    ] {
        if let Some(v) = v {
            loss.insert(key.into(), v.into());
        }
    }

    if let Some(k) = loss.keys().find(|k| !LOSS_KEYS.contains(&k.as_str())) {
        return Err(CliError::config(format!(
            "unknown key `{k}` in `{where_}`; expected one of {LOSS_KEYS:?}"
        )));
    }
    let family = loss
        .entry("family")
        .or_insert_with(|| "sare".into())
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| CliError::config(format!("`{where_}.family` must be a string")))?;
    if family == "sare" {
        loss.entry("kernel")
            .or_insert_with(|| DEFAULT_KERNEL.into());
        loss.entry("mode").or_insert_with(|| DEFAULT_MODE.into());
    } else if let Some(k) = SARE_ONLY_KEYS.iter().find(|k| loss.contains_key(**k)) {
        return Err(CliError::config(format!(
            "`{where_}.{k}` only applies to the sare family, not {family}"
        )));
    }
    Ok(())
}

/// File, then flags, then loss checks, then typed deserialization.
pub fn resolve<T: DeserializeOwned>(
    file: Option<&Path>,
    overrides: Overrides,
    loss: Option<(&[&str], &LossFlags)>,
) -> Result<T, CliError> {
    let mut root = read_file(file)?;
    overrides.apply(&mut root)?;
    if let Some((at, flags)) = loss {
        resolve_loss(&mut root, at, flags)?;
    }
    serde_json::from_value(root).map_err(|e| CliError::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn loss_of(file: Value, flags: &LossFlags) -> Result<Value, CliError> {
        let mut root = json!({ "loss": file });
        resolve_loss(&mut root, &["loss"], flags)?;
        Ok(root["loss"].clone())
    }

    #[test]
    fn empty_loss_defaults_to_gaussian_joint() {
        let l = loss_of(json!({}), &LossFlags::default()).unwrap();
        assert_eq!(
            l,
            json!({"family": "sare", "kernel": "gaussian", "mode": "joint"})
        );
    }

    #[test]
    fn kernel_flag_implies_sare() {
        let flags = LossFlags {
            kernel: Some("cauchy"),
            ..LossFlags::default()
        };
        let l = loss_of(json!({"family": "triplet_ranking"}), &flags).unwrap();
        assert_eq!(
            l,
            json!({"family": "sare", "kernel": "cauchy", "mode": "joint"})
        );
    }

    #[test]
    fn family_flag_drops_file_kernel() {
        let flags = LossFlags {
            family: Some("contrastive"),
            ..LossFlags::default()
        };
        let l = loss_of(
            json!({"family": "sare", "kernel": "cauchy", "margin_tau": 0.5}),
            &flags,
        )
        .unwrap();
        assert_eq!(l, json!({"family": "contrastive", "margin_tau": 0.5}));
    }

    #[test]
    fn rejects_kernel_on_non_sare() {
        assert!(loss_of(
            json!({"family": "triplet_ranking", "kernel": "gaussian"}),
            &LossFlags::default()
        )
        .is_err());
        let flags = LossFlags {
            family: Some("triplet_ranking"),
            mode: Some("joint"),
            ..LossFlags::default()
        };
        assert!(loss_of(json!({}), &flags).is_err());
    }

    #[test]
    fn rejects_unknown_loss_key() {
        assert!(loss_of(json!({"negative_count": 3}), &LossFlags::default()).is_err());
    }

    #[test]
    fn flags_overwrite_leaves_only() {
        let mut root = json!({"synth": {"n_places": 5, "seed": 1}, "out": "a"});
        let mut o = Overrides::default();
        o.set(&["synth", "seed"], 9);
        o.set(&["out"], "b");
        o.apply(&mut root).unwrap();
        assert_eq!(
            root,
            json!({"synth": {"n_places": 5, "seed": 9}, "out": "b"})
        );
    }
}
