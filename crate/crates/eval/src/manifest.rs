//! JSON manifests that tie scene and patch files to labels, illuminants and
//! split roles. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rawmix_core::io;
use rawmix_core::sim::{Role, SceneCube, Split};
use rawmix_core::RawImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    /// Full-resolution scene tensor.
    pub scene: PathBuf,
    pub label: usize,
    pub illuminant: String,
    /// `train` entries are cut from the top half, `test` from the bottom.
    pub role: Role,
}

/// Image half a scene role draws its patches from.
pub fn split_for(role: Role) -> Result<Split> {
    match role {
        Role::Train => Ok(Split::Top),
        Role::Test => Ok(Split::Bottom),
        Role::Validation => Err(Error::Data(
            "scenes cannot have role validation; validation patches come out of training".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub msfa: String,
    pub patch_size: usize,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub id: String,
    /// Raw patch tensor.
    pub path: PathBuf,
    pub label: usize,
    pub illuminant: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub msfa: String,
    pub patch_size: usize,
    pub patches: Vec<PatchEntry>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

impl DatasetManifest {
    /// Reads a manifest and makes every scene path absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = base_dir(path);
        for e in &mut m.scenes {
            e.scene = resolve(&base, &e.scene);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path.as_ref())
    }

    pub fn num_classes(&self) -> usize {
        self.scenes.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }
}

pub fn load_scene(path: &Path) -> Result<SceneCube> {
    let full = io::read_full(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    SceneCube::new(full).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl PatchManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = base_dir(path);
        for e in &mut m.patches {
            e.path = resolve(&base, &e.path);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path.as_ref())
    }

    /// Loads every patch listed with `role`, in manifest order.
    pub fn read_patches(&self, role: Role) -> Result<Vec<(&PatchEntry, RawImage)>> {
        self.patches
            .iter()
            .filter(|e| e.role == role)
            .map(|e| {
                let img = io::read_raw(&e.path).map_err(|err| Error::Data(format!("{}: {err}", e.path.display())))?;
                if img.pattern().id() != self.msfa {
                    return Err(Error::Data(format!(
                        "{} uses {} but the manifest says {}",
                        e.path.display(),
                        img.pattern().id(),
                        self.msfa
                    )));
                }
                Ok((e, img))
            })
            .collect()
    }
}
