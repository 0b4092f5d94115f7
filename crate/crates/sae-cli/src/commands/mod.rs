pub mod aggregate;
pub mod direct;
pub mod fit;
pub mod loo;
pub mod simulate;

use std::path::{Path, PathBuf};

use sae_core::model::{AreaFamily, AreaModelSpec, ModelSpec, UnitFamily, UnitModelSpec};
use sae_core::{Result, SaeError};

/// Load a model specification from JSON, turning unknown families into a
/// usage error with the list of valid names.
pub fn load_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    ModelSpec::from_json(&text).map_err(|e| match e {
        SaeError::Json(err) => SaeError::usage(format!(
            "{}: {err}; valid area families: {:?}; valid unit families: {:?}",
            path.display(),
            AreaFamily::ALL.map(|f| f.name()),
            UnitFamily::ALL.map(|f| f.name()),
        )),
        other => other,
    })
}

/// Resolve a comma-separated model list: each entry is either a family name
/// (level given by `level_hint`) or a path to a model JSON file.
pub fn resolve_models(list: &str, level_hint: ModelLevel) -> Result<Vec<(ModelSpec, Option<PathBuf>)>> {
    let mut out = Vec::new();
    for entry in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if entry.ends_with(".json") {
            let path = PathBuf::from(entry);
            out.push((load_model_spec(&path)?, Some(path)));
            continue;
        }
        let spec = match level_hint {
            ModelLevel::Area => AreaFamily::from_name(entry)
                .map(|f| ModelSpec::Area(AreaModelSpec::new(f)))
                .ok_or_else(|| {
                    SaeError::usage(format!(
                        "unknown area family {entry:?}; valid: {:?}",
                        AreaFamily::ALL.map(|f| f.name())
                    ))
                })?,
            ModelLevel::Unit => UnitFamily::from_name(entry)
                .map(|f| ModelSpec::Unit(UnitModelSpec::new(f)))
                .ok_or_else(|| {
                    SaeError::usage(format!(
                        "unknown unit family {entry:?}; valid: {:?}",
                        UnitFamily::ALL.map(|f| f.name())
                    ))
                })?,
        };
        out.push((spec, None));
    }
    if out.is_empty() {
        return Err(SaeError::usage("empty model list"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelLevel {
    Area,
    Unit,
}
