use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{invalid, Error, Result};

/// Applies one `key=value` override to a JSON document. Dotted keys reach
/// into nested objects; the value is parsed as JSON when possible and taken
/// as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return invalid(format!("override {assignment:?} is not of the form key=value"));
    };
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return invalid(format!("override key {key:?} is malformed"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("{key}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::InvalidInput(format!("{key}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return invalid(format!("{key}: {part:?} does not name a field")),
        };
    }
    Ok(())
}

/// Reads a JSON file, applies overrides and decodes.
pub fn load_json<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Reads `path` (or starts from `default`), applies overrides and decodes.
pub fn load_config<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    default: &T,
    overrides: &[String],
) -> Result<T> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(default)?,
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::InvalidInput(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_and_typed_overrides() {
        let mut doc = json!({"tau": 3, "model": {"experts": 8}, "seeds": [0, 1]});
        apply_override(&mut doc, "tau=10").unwrap();
        apply_override(&mut doc, "model.experts=4").unwrap();
        apply_override(&mut doc, "strategy=u_G").unwrap();
        apply_override(&mut doc, "seeds.1=7").unwrap();
        apply_override(&mut doc, "train.anneal_phase1=true").unwrap();
        assert_eq!(
            doc,
            json!({"tau": 10, "model": {"experts": 4}, "seeds": [0, 7], "strategy": "u_G",
                   "train": {"anneal_phase1": true}})
        );
    }

    #[test]
    fn malformed_overrides() {
        let mut doc = json!({"tau": 3, "seeds": [0]});
        assert!(apply_override(&mut doc, "tau").is_err());
        assert!(apply_override(&mut doc, "=3").is_err());
        assert!(apply_override(&mut doc, "tau.x=3").is_err());
        assert!(apply_override(&mut doc, "seeds.4=3").is_err());
        assert!(apply_override(&mut doc, "a..b=3").is_err());
    }
}
