//! Checkpoint layout: a directory with `manifest.json` plus one SGDT tensor
//! file per parameter. The manifest embeds the owning config verbatim, so a
//! checkpoint is self-describing; loading validates that the parameter name
//! sets match exactly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sgda::{SgdaConfig, SgdaParams};
use crate::sgdt::{read_sgdt, write_sgdt, Sgdt};
use crate::tape::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    /// Parameter name to tensor file name, sorted by name.
    pub tensors: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    params: &[(String, Param)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, p) in params {
        let file = format!("{name}.sgdt");
        if tensors.insert(name.clone(), file.clone()).is_some() {
            return Err(Error::usage(format!("duplicate parameter name `{name}`")));
        }
        write_sgdt(&dir.join(&file), &Sgdt::from_tensor(&p.value()))?;
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every tensor named by the manifest.
pub fn load_tensors(dir: &Path, manifest: &Manifest) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, file) in &manifest.tensors {
        out.insert(name.clone(), read_sgdt(&dir.join(file))?.to_tensor()?);
    }
    Ok(out)
}

/// Total scalars reachable through the manifest's tensor files.
pub fn manifest_scalar_count(dir: &Path) -> Result<usize> {
    let manifest = read_manifest(dir)?;
    let mut total = 0usize;
    for file in manifest.tensors.values() {
        total += read_sgdt(&dir.join(file))?.shape.iter().product::<usize>();
    }
    Ok(total)
}

/// Copies loaded tensors into live parameters; the name sets must match
/// exactly in both directions.
pub fn apply_tensors(
    params: &[(String, Param)],
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut seen = BTreeMap::new();
    for (name, p) in params {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing tensor `{name}`")))?;
        p.set_value(t.clone())?;
        seen.insert(name.clone(), ());
    }
    for name in tensors.keys() {
        if !seen.contains_key(name) {
            return Err(Error::data(format!(
                "checkpoint tensor `{name}` matches no parameter"
            )));
        }
    }
    Ok(())
}

pub fn save_sgda(dir: &Path, cfg: &SgdaConfig, params: &SgdaParams) -> Result<()> {
    params.validate(cfg)?;
    save_checkpoint(dir, "sgda", serde_json::to_value(cfg)?, &params.params(cfg))
}

pub fn load_sgda(dir: &Path) -> Result<(SgdaConfig, SgdaParams)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != "sgda" {
        return Err(Error::data(format!(
            "expected an sgda checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let cfg: SgdaConfig = serde_json::from_value(manifest.config.clone())?;
    let params = SgdaParams::zeros(&cfg)?;
    let tensors = load_tensors(dir, &manifest)?;
    apply_tensors(&params.params(&cfg), &tensors)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgda::{init_params, parameter_count};

    #[test]
    fn sgda_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SgdaConfig {
            channels: 4,
            groups: 2,
            adapters: 2,
            reduction: 2,
            ..SgdaConfig::new(4)
        };
        let params = init_params(&cfg, 3).unwrap();
        save_sgda(dir.path(), &cfg, &params).unwrap();
        let (cfg2, loaded) = load_sgda(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for ((na, pa), (nb, pb)) in params.params(&cfg).iter().zip(loaded.params(&cfg2)) {
            assert_eq!(*na, nb);
            assert_eq!(pa.value(), pb.value());
        }
    }

    #[test]
    fn manifest_scalar_count_matches_the_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SgdaConfig {
            channels: 16,
            groups: 2,
            adapters: 3,
            reduction: 2,
            ..SgdaConfig::new(16)
        };
        let params = init_params(&cfg, 5).unwrap();
        save_sgda(dir.path(), &cfg, &params).unwrap();
        assert_eq!(
            manifest_scalar_count(dir.path()).unwrap(),
            parameter_count(&cfg)
        );
    }

    #[test]
    fn name_set_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SgdaConfig {
            channels: 4,
            groups: 2,
            adapters: 2,
            reduction: 2,
            ..SgdaConfig::new(4)
        };
        let params = init_params(&cfg, 3).unwrap();
        save_sgda(dir.path(), &cfg, &params).unwrap();
        let manifest = read_manifest(dir.path()).unwrap();
        let tensors = load_tensors(dir.path(), &manifest).unwrap();

        // missing tensor
        let mut trimmed = tensors.clone();
        trimmed.pop_first();
        assert!(apply_tensors(&params.params(&cfg), &trimmed).is_err());

        // stray tensor
        let mut extra = tensors;
        extra.insert("phantom".into(), Tensor::zeros(&[1]));
        assert!(apply_tensors(&params.params(&cfg), &extra).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let cfg = SgdaConfig {
            channels: 4,
            groups: 2,
            adapters: 2,
            reduction: 2,
            ..SgdaConfig::new(4)
        };
        let params = init_params(&cfg, 9).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        save_sgda(da.path(), &cfg, &params).unwrap();
        save_sgda(db.path(), &cfg, &params).unwrap();
        for entry in fs::read_dir(da.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(da.path().join(&name)).unwrap();
            let b = fs::read(db.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?}");
        }
    }
}
