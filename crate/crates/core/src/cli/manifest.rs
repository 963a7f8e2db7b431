//! Dataset directories: `manifest.toml` plus one PNG per item.
//!
//! ```toml
//! format_version = 1
//! seed = 7
//!
//! [world]            # WorldConfig
//! image_width = 64
//! ...
//!
//! [splits]
//! generator = [0, 4]
//! train = [8]
//! test = [12]
//!
//! [[items]]
//! id = 0
//! y = [0.1, -0.3, 1.2, 0.0]
//! z = [0.5, -1.0, 0.2]
//! image = "images/0.png"
//! [items.params]     # PhysicalParams
//! radius = 0.31
//! ...
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attrworld::{AttributeVector, Image, PhysicalParams, WorldConfig};
use crate::error::{Error, Result};
use crate::pairgen::ItemView;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub generator: Vec<u64>,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub id: u64,
    /// Strengths the image was rendered from.
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub image: String,
    pub params: PhysicalParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub splits: SplitAssignment,
    pub items: Vec<ItemRecord>,
}

/// A manifest with the directory its image paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetManifest {
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        self.world
            .validate()
            .map_err(|e| Error::format(&path, format!("world: {e}")))?;
        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.id) {
                return Err(Error::format(&path, format!("duplicate item id {}", item.id)));
            }
            if item.y.len() != self.world.n_attributes {
                return Err(Error::format(
                    &path,
                    format!("item {} has {} strengths", item.id, item.y.len()),
                ));
            }
            if !dir.join(&item.image).is_file() {
                return Err(Error::format(
                    &path,
                    format!("item {} image `{}` does not exist", item.id, item.image),
                ));
            }
        }
        let mut assigned = HashSet::new();
        for (name, split) in [
            ("generator", &self.splits.generator),
            ("train", &self.splits.train),
            ("test", &self.splits.test),
        ] {
            for id in split {
                if !ids.contains(id) {
                    return Err(Error::format(&path, format!("split {name} names unknown item {id}")));
                }
                if !assigned.insert(*id) {
                    return Err(Error::format(
                        &path,
                        format!("item {id} assigned to more than one split"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot encode manifest: {e}")))
    }
}

impl Dataset {
    /// Reads `dir/manifest.toml`, or the file itself when `path` names one.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(&file, e.message()))?;
        manifest.validate(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    pub fn item(&self, id: u64) -> Result<&ItemRecord> {
        self.manifest
            .items
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("item {id} is not in {}", self.dir.display())))
    }

    pub fn image(&self, item: &ItemRecord) -> Result<Image> {
        Image::load_png(&self.dir.join(&item.image))
    }
}

/// Items of several datasets keyed by id; ids must not collide.
pub struct ItemIndex<'a> {
    items: HashMap<u64, (&'a Dataset, &'a ItemRecord)>,
}

impl<'a> ItemIndex<'a> {
    pub fn new(datasets: &'a [Dataset]) -> Result<Self> {
        let mut items = HashMap::new();
        for ds in datasets {
            for item in &ds.manifest.items {
                if items.insert(item.id, (ds, item)).is_some() {
                    return Err(Error::InvalidInput(format!(
                        "item id {} appears in two datasets",
                        item.id
                    )));
                }
            }
        }
        Ok(Self { items })
    }

    pub fn get(&self, id: u64) -> Result<(&'a Dataset, &'a ItemRecord)> {
        self.items
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no dataset holds item {id}")))
    }

    pub fn image(&self, id: u64) -> Result<Image> {
        let (ds, item) = self.get(id)?;
        ds.image(item)
    }

    pub fn view(&self, id: u64) -> Result<ItemView> {
        let (_, item) = self.get(id)?;
        Ok(ItemView {
            id,
            y: AttributeVector(item.y.clone()),
            params: item.params.clone(),
        })
    }
}

/// The world config shared by every dataset.
pub fn common_world(datasets: &[Dataset]) -> Result<WorldConfig> {
    let first = &datasets
        .first()
        .ok_or_else(|| Error::InvalidInput("no dataset given".into()))?
        .manifest
        .world;
    if datasets.iter().any(|d| &d.manifest.world != first) {
        return Err(Error::InvalidInput(
            "datasets were rendered with different world configs".into(),
        ));
    }
    Ok(first.clone())
}
