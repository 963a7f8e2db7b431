//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes  "SJMODEL\0"
//! version       u32      MODEL_FORMAT_VERSION
//! manifest_len  u32
//! manifest      manifest_len bytes of UTF-8 TOML (see ModelManifest)
//! n_arrays      u32
//! n_arrays times:
//!   name_len    u32
//!   name        name_len bytes of UTF-8
//!   count       u64
//!   values      count × f64
//! ```
//!
//! Arrays are written in name order. Integer-valued arrays (item ids, enum
//! codes) are stored as exactly representable `f64`s below 2^53.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attrworld::{ConditionedWorld, WorldConfig};
use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::pairgen::{Label, OrderedPair, PairKind, Provenance, Split};
use crate::prior::PriorModel;
use crate::rankers::classifier::BinaryClassifierModel;
use crate::rankers::ranknet::{RankNetConfig, RankNetModel, TrainConfig};
use crate::rankers::ranksvm::{LinearRankModel, LocalConfig, LocalRankModel, SvmConfig};
use crate::rankers::FeatureTable;

pub const MAGIC: &[u8; 8] = b"SJMODEL\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RanksvmLinear,
    RanksvmLocal,
    Ranknet,
    Classifier,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub seed: u64,
    pub attribute: Option<usize>,
    pub dims: BTreeMap<String, usize>,
    pub hyperparameters: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub manifest: ModelManifest,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

const MAX_EXACT: f64 = 9_007_199_254_740_992.0;

impl ModelFile {
    pub fn new(kind: ModelKind, seed: u64, attribute: Option<usize>) -> Self {
        Self {
            manifest: ModelManifest {
                format_version: MODEL_FORMAT_VERSION,
                kind,
                seed,
                attribute,
                dims: BTreeMap::new(),
                hyperparameters: toml::Table::new(),
            },
            arrays: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = toml::to_string(&self.manifest)
            .map_err(|e| Error::InvalidInput(format!("cannot encode model manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(manifest.len())
                .expect("manifest under 4 GiB")
                .to_le_bytes(),
        );
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).map_err(&bad)? != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = cur.u32().map_err(&bad)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(bad(format!("unsupported model format version {version}")));
        }
        let len = cur.u32().map_err(&bad)? as usize;
        let text = std::str::from_utf8(cur.take(len).map_err(&bad)?).map_err(|e| bad(format!("manifest: {e}")))?;
        let manifest: ModelManifest = toml::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        let n = cur.u32().map_err(&bad)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name_len = cur.u32().map_err(&bad)? as usize;
            let name = std::str::from_utf8(cur.take(name_len).map_err(&bad)?)
                .map_err(|e| bad(format!("array name: {e}")))?
                .to_string();
            let count = usize::try_from(cur.u64().map_err(&bad)?).map_err(|_| bad("array too long".into()))?;
            let raw = cur
                .take(count.checked_mul(8).ok_or_else(|| bad("array too long".into()))?)
                .map_err(&bad)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if arrays.insert(name.clone(), values).is_some() {
                return Err(bad(format!("duplicate array `{name}`")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn kind(&self) -> ModelKind {
        self.manifest.kind
    }

    fn put(&mut self, name: &str, values: Vec<f64>) {
        self.arrays.insert(name.to_string(), values);
    }

    fn put_ids(&mut self, name: &str, ids: impl IntoIterator<Item = u64>) -> Result<()> {
        let values = ids
            .into_iter()
            .map(|id| {
                let v = id as f64;
                if v >= MAX_EXACT {
                    Err(Error::InvalidInput(format!("id {id} does not fit a model array")))
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<_>>()?;
        self.put(name, values);
        Ok(())
    }

    fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("model file has no array `{name}`")))
    }

    fn array_len(&self, name: &str, len: usize) -> Result<&[f64]> {
        let a = self.array(name)?;
        if a.len() != len {
            return Err(Error::InvalidInput(format!(
                "array `{name}` has {} values, expected {len}",
                a.len()
            )));
        }
        Ok(a)
    }

    fn ids(&self, name: &str) -> Result<Vec<u64>> {
        self.array(name)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v < MAX_EXACT && v.fract() == 0.0 {
                    Ok(v as u64)
                } else {
                    Err(Error::InvalidInput(format!("array `{name}` holds non-integer id {v}")))
                }
            })
            .collect()
    }

    fn hyper<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .hyperparameters
            .get(key)
            .ok_or_else(|| Error::InvalidInput(format!("model manifest lacks hyperparameter `{key}`")))?;
        v.clone()
            .try_into()
            .map_err(|e| Error::InvalidInput(format!("hyperparameter `{key}`: {e}")))
    }

    fn set_hyper<T: Serialize>(&mut self, key: &str, v: &T) -> Result<()> {
        let value =
            toml::Value::try_from(v).map_err(|e| Error::InvalidInput(format!("hyperparameter `{key}`: {e}")))?;
        self.manifest.hyperparameters.insert(key.to_string(), value);
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::InvalidInput(format!(
                "expected a {kind:?} model, found {:?}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    fn put_normalizer(&mut self, n: &Option<Normalizer>) {
        if let Some(n) = n {
            self.put("norm_mean", n.mean.clone());
            self.put("norm_std", n.std.clone());
        }
    }

    fn normalizer(&self, dim: usize) -> Result<Option<Normalizer>> {
        if !self.arrays.contains_key("norm_mean") {
            return Ok(None);
        }
        Ok(Some(Normalizer {
            mean: self.array_len("norm_mean", dim)?.to_vec(),
            std: self.array_len("norm_std", dim)?.to_vec(),
        }))
    }

    fn dim(&self, name: &str) -> Result<usize> {
        self.manifest
            .dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("model manifest lacks dimension `{name}`")))
    }

    pub fn from_linear(m: &LinearRankModel, attribute: usize) -> Result<Self> {
        let mut f = Self::new(ModelKind::RanksvmLinear, m.seed, Some(attribute));
        f.manifest.dims.insert("descriptor".into(), m.w.len());
        f.set_hyper(
            "svm",
            &SvmConfig {
                lambda: m.lambda,
                iterations: m.iterations,
            },
        )?;
        f.put("w", m.w.clone());
        f.put_normalizer(&m.normalizer);
        Ok(f)
    }

    pub fn to_linear(&self) -> Result<LinearRankModel> {
        self.expect_kind(ModelKind::RanksvmLinear)?;
        let d = self.dim("descriptor")?;
        let svm: SvmConfig = self.hyper("svm")?;
        Ok(LinearRankModel {
            w: self.array_len("w", d)?.to_vec(),
            normalizer: self.normalizer(d)?,
            lambda: svm.lambda,
            iterations: svm.iterations,
            seed: self.manifest.seed,
        })
    }

    pub fn from_local(m: &LocalRankModel, attribute: usize, seed: u64) -> Result<Self> {
        let mut f = Self::new(ModelKind::RanksvmLocal, seed, Some(attribute));
        f.manifest.dims.insert("descriptor".into(), m.items.dim());
        f.manifest.dims.insert("items".into(), m.items.len());
        f.manifest.dims.insert("pairs".into(), m.pool.len());
        f.set_hyper("svm", &m.svm)?;
        f.set_hyper("local", &m.local)?;
        f.put_ids("item_ids", m.items.ids().iter().copied())?;
        f.put("item_features", m.items.data().to_vec());
        f.put_ids("pair_a", m.pool.iter().map(|p| p.item_a))?;
        f.put_ids("pair_b", m.pool.iter().map(|p| p.item_b))?;
        f.put(
            "pair_label",
            m.pool
                .iter()
                .map(|p| if p.label == Label::AMore { 1.0 } else { 0.0 })
                .collect(),
        );
        f.put_ids("pair_provenance", m.pool.iter().map(|p| provenance_code(p.provenance)))?;
        f.put_ids("pair_kind", m.pool.iter().map(|p| kind_code(p.kind)))?;
        f.put_normalizer(&m.normalizer);
        Ok(f)
    }

    pub fn to_local(&self) -> Result<LocalRankModel> {
        self.expect_kind(ModelKind::RanksvmLocal)?;
        let d = self.dim("descriptor")?;
        let n_items = self.dim("items")?;
        let n_pairs = self.dim("pairs")?;
        let attribute = self
            .manifest
            .attribute
            .ok_or_else(|| Error::InvalidInput("local model has no attribute".into()))?;
        let ids = self.ids("item_ids")?;
        if ids.len() != n_items {
            return Err(Error::InvalidInput("item_ids length disagrees with dims".into()));
        }
        let feats = self.array_len("item_features", n_items * d)?;
        let mut items = FeatureTable::new(d);
        for (i, id) in ids.iter().enumerate() {
            items.insert(*id, &feats[i * d..(i + 1) * d])?;
        }
        let (a, b) = (self.ids("pair_a")?, self.ids("pair_b")?);
        let labels = self.array_len("pair_label", n_pairs)?;
        let (prov, kind) = (self.ids("pair_provenance")?, self.ids("pair_kind")?);
        if [a.len(), b.len(), prov.len(), kind.len()].iter().any(|&l| l != n_pairs) {
            return Err(Error::InvalidInput("pair arrays disagree in length".into()));
        }
        let pool = (0..n_pairs)
            .map(|i| {
                OrderedPair::new(
                    attribute,
                    a[i],
                    b[i],
                    if labels[i] == 1.0 { Label::AMore } else { Label::BMore },
                    provenance_from(prov[i])?,
                    kind_from(kind[i])?,
                    Split::Train,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalRankModel {
            pool,
            items,
            normalizer: self.normalizer(d)?,
            local: self.hyper::<LocalConfig>("local")?,
            svm: self.hyper("svm")?,
        })
    }

    pub fn from_classifier(m: &BinaryClassifierModel, attribute: usize) -> Result<Self> {
        let mut f = Self::new(ModelKind::Classifier, m.seed, Some(attribute));
        f.manifest.dims.insert("descriptor".into(), m.w.len());
        f.set_hyper(
            "classifier",
            &crate::rankers::classifier::ClassifierConfig {
                lambda: m.lambda,
                iterations: m.iterations,
            },
        )?;
        f.put("w", m.w.clone());
        f.put("bias", vec![m.bias]);
        f.put("threshold", vec![m.threshold]);
        f.put_normalizer(&m.normalizer);
        Ok(f)
    }

    pub fn to_classifier(&self) -> Result<BinaryClassifierModel> {
        self.expect_kind(ModelKind::Classifier)?;
        let d = self.dim("descriptor")?;
        let cfg: crate::rankers::classifier::ClassifierConfig = self.hyper("classifier")?;
        Ok(BinaryClassifierModel {
            w: self.array_len("w", d)?.to_vec(),
            bias: self.array_len("bias", 1)?[0],
            threshold: self.array_len("threshold", 1)?[0],
            normalizer: self.normalizer(d)?,
            lambda: cfg.lambda,
            iterations: cfg.iterations,
            seed: self.manifest.seed,
        })
    }

    pub fn from_ranknet(m: &RankNetModel, train: &TrainConfig, attribute: usize, seed: u64) -> Result<Self> {
        let mut f = Self::new(ModelKind::Ranknet, seed, Some(attribute));
        f.manifest.dims.insert("params".into(), m.params.len());
        f.set_hyper("architecture", &m.cfg)?;
        f.set_hyper("train", train)?;
        f.put("params", m.params.clone());
        Ok(f)
    }

    pub fn to_ranknet(&self) -> Result<RankNetModel> {
        self.expect_kind(ModelKind::Ranknet)?;
        let cfg: RankNetConfig = self.hyper("architecture")?;
        RankNetModel::from_params(cfg, self.array_len("params", self.dim("params")?)?.to_vec())
    }

    /// A fitted prior with the conditioning map that renders its samples.
    pub fn from_prior(prior: &PriorModel, world: &ConditionedWorld, seed: u64) -> Result<Self> {
        let mut f = Self::new(ModelKind::Prior, seed, None);
        f.manifest.dims.insert("attributes".into(), prior.dim());
        f.set_hyper("ridge", &prior.ridge)?;
        f.set_hyper("world", &world.cfg)?;
        f.put("mean", prior.mean.clone());
        f.put("covariance", prior.covariance.clone());
        f.put("per_attribute_std", prior.per_attribute_std.clone());
        f.put("map_weights", world.weights.clone());
        f.put("map_offset", world.offset.clone());
        f.put("map_residual_factor", world.residual_factor.clone());
        Ok(f)
    }

    pub fn to_prior(&self) -> Result<(PriorModel, ConditionedWorld)> {
        self.expect_kind(ModelKind::Prior)?;
        let n = self.dim("attributes")?;
        let prior = PriorModel {
            mean: self.array_len("mean", n)?.to_vec(),
            covariance: self.array_len("covariance", n * n)?.to_vec(),
            per_attribute_std: self.array_len("per_attribute_std", n)?.to_vec(),
            ridge: self.hyper("ridge")?,
        };
        prior.cholesky()?;
        let cfg: WorldConfig = self.hyper("world")?;
        cfg.validate()?;
        if cfg.n_attributes != n {
            return Err(Error::InvalidInput(
                "prior and world disagree on attribute count".into(),
            ));
        }
        let world = ConditionedWorld {
            cfg,
            weights: self.array_len("map_weights", n * n)?.to_vec(),
            offset: self.array_len("map_offset", n)?.to_vec(),
            residual_factor: self.array_len("map_residual_factor", n * n)?.to_vec(),
        };
        Ok((prior, world))
    }
}

const PROVENANCES: [Provenance; 6] = [
    Provenance::Real,
    Provenance::SynthVerified,
    Provenance::SynthAuto,
    Provenance::Jitter,
    Provenance::Pseudo,
    Provenance::Oracle,
];
const KINDS: [PairKind; 3] = [PairKind::Intra, PairKind::Inter, PairKind::NotApplicable];

fn provenance_code(p: Provenance) -> u64 {
    PROVENANCES.iter().position(|&q| q == p).expect("listed") as u64
}

fn provenance_from(code: u64) -> Result<Provenance> {
    PROVENANCES
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("unknown provenance code {code}")))
}

fn kind_code(k: PairKind) -> u64 {
    KINDS.iter().position(|&q| q == k).expect("listed") as u64
}

fn kind_from(code: u64) -> Result<PairKind> {
    KINDS
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("unknown pair kind code {code}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut f = ModelFile::new(ModelKind::RanksvmLinear, 9, Some(1));
        f.put("w", vec![1.5, -2.0]);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            MODEL_FORMAT_VERSION
        );
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let tail = &bytes[16 + mlen..];
        assert_eq!(u32::from_le_bytes(tail[..4].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(tail[4..8].try_into().unwrap()), 1);
        assert_eq!(&tail[8..9], b"w");
        assert_eq!(u64::from_le_bytes(tail[9..17].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(tail[17..25].try_into().unwrap()), 1.5);
        assert_eq!(tail.len(), 33);
        assert_eq!(ModelFile::from_bytes(&bytes, Path::new("m")).unwrap(), f);
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let f = ModelFile::new(ModelKind::Prior, 0, None);
        let bytes = f.to_bytes().unwrap();
        let p = Path::new("m");
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad, p), Err(Error::Format { .. })));
    }

    #[test]
    fn classifier_round_trip() {
        let m = BinaryClassifierModel {
            w: vec![0.25, -1.0, 3.0],
            bias: 0.5,
            threshold: 0.1,
            normalizer: Some(Normalizer {
                mean: vec![0.0, 1.0, 2.0],
                std: vec![1.0, 2.0, 3.0],
            }),
            lambda: 0.01,
            iterations: 7,
            seed: 11,
        };
        let f = ModelFile::from_classifier(&m, 2).unwrap();
        let back = ModelFile::from_bytes(&f.to_bytes().unwrap(), Path::new("m")).unwrap();
        assert_eq!(back.to_classifier().unwrap(), m);
        assert!(back.to_linear().is_err());
    }
}
