use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::bitstream::{decode_with_layers, interpolate_pair, Bitstream, LayerSource};
use super::io::{anchor_from_bytes, anchor_to_bytes, derivation_from_bytes, derivation_to_bytes};
use super::model::{AnchorModel, LayerPair};
use super::train::Derivation;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Environment variable that overrides the registry directory.
pub const REGISTRY_ENV: &str = "SVRC_REGISTRY";

/// Directory of anchors and derivations:
/// `anchors/A<id>.model` and `derivations/A<anchor>/D<id>.stanh`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$SVRC_REGISTRY` when set, otherwise `fallback`.
    pub fn from_env_or(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(REGISTRY_ENV) {
            Some(p) if !p.is_empty() => Self::new(p),
            _ => Self::new(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn anchor_path(&self, id: u16) -> PathBuf {
        self.root.join("anchors").join(format!("A{id}.model"))
    }

    pub fn derivation_path(&self, anchor: u16, id: u16) -> PathBuf {
        self.root.join("derivations").join(format!("A{anchor}")).join(format!("D{id}.stanh"))
    }

    pub fn save_anchor(&self, id: u16, model: &AnchorModel) -> Result<PathBuf> {
        let path = self.anchor_path(id);
        write_atomic(&path, &anchor_to_bytes(model))?;
        Ok(path)
    }

    pub fn load_anchor(&self, id: u16) -> Result<AnchorModel> {
        match fs::read(self.anchor_path(id)) {
            Ok(bytes) => anchor_from_bytes(&bytes),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::UnknownAnchor(id)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn has_anchor(&self, id: u16) -> bool {
        self.anchor_path(id).is_file()
    }

    /// Stores a derivation next to its anchor, which must already exist.
    pub fn save_derivation(&self, d: &Derivation) -> Result<PathBuf> {
        if d.id == 0 {
            return Err(Error::InvalidArgument("derivation id 0 is reserved for the anchor's layers".into()));
        }
        if !self.has_anchor(d.anchor_id) {
            return Err(Error::UnknownAnchor(d.anchor_id));
        }
        let path = self.derivation_path(d.anchor_id, d.id);
        write_atomic(&path, &derivation_to_bytes(d))?;
        Ok(path)
    }

    pub fn load_derivation(&self, anchor: u16, id: u16) -> Result<Derivation> {
        if !self.has_anchor(anchor) {
            return Err(Error::UnknownAnchor(anchor));
        }
        let d = match fs::read(self.derivation_path(anchor, id)) {
            Ok(bytes) => derivation_from_bytes(&bytes)?,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Error::UnknownDerivation {
                    anchor,
                    derivation: id,
                })
            }
            Err(e) => return Err(e.into()),
        };
        if (d.anchor_id, d.id) != (anchor, id) {
            return Err(Error::Corrupted(format!(
                "file for A{anchor}/D{id} holds A{}/D{}",
                d.anchor_id, d.id
            )));
        }
        Ok(d)
    }

    /// Sorted ids of the stored anchors.
    pub fn anchor_ids(&self) -> Result<Vec<u16>> {
        list_ids(&self.root.join("anchors"), 'A', ".model")
    }

    /// Sorted ids of the derivations stored for `anchor`.
    pub fn derivation_ids(&self, anchor: u16) -> Result<Vec<u16>> {
        list_ids(&self.root.join("derivations").join(format!("A{anchor}")), 'D', ".stanh")
    }

    /// First free id of the form `10 * anchor + j`, falling back to the
    /// smallest free id when that range is exhausted.
    pub fn next_derivation_id(&self, anchor: u16) -> Result<u16> {
        let taken = self.derivation_ids(anchor)?;
        let base = 10 * anchor as u32;
        (1..10)
            .map(|j| base + j)
            .chain(1..=u16::MAX as u32)
            .filter(|&c| c <= u16::MAX as u32)
            .map(|c| c as u16)
            .find(|c| !taken.contains(c))
            .ok_or_else(|| Error::InvalidArgument(format!("no free derivation id for anchor {anchor}")))
    }

    /// Layers of a derivation id; 0 names the anchor's own.
    pub fn layers(&self, anchor_id: u16, anchor: &AnchorModel, id: u16) -> Result<LayerPair> {
        if id == 0 {
            return Ok(anchor.layers.clone());
        }
        let d = self.load_derivation(anchor_id, id)?;
        anchor.check_layers(&d.layers)?;
        Ok(d.layers)
    }

    /// Layers a bitstream header refers to.
    pub fn resolve(&self, anchor_id: u16, anchor: &AnchorModel, source: LayerSource) -> Result<LayerPair> {
        match source {
            LayerSource::Anchor => Ok(anchor.layers.clone()),
            LayerSource::Derivation(id) => self.layers(anchor_id, anchor, id),
            LayerSource::Interpolation { from, to, rho } => interpolate_pair(
                &self.layers(anchor_id, anchor, from)?,
                &self.layers(anchor_id, anchor, to)?,
                rho,
            ),
        }
    }

    /// Decodes a serialized bitstream with the anchor and layers it names.
    pub fn decode(&self, bytes: &[u8]) -> Result<Tensor> {
        let stream = Bitstream::parse(bytes)?;
        let anchor = self.load_anchor(stream.header.anchor_id)?;
        let layers = self.resolve(stream.header.anchor_id, &anchor, stream.header.source)?;
        decode_with_layers(&stream, &anchor, &layers)
    }
}

fn list_ids(dir: &Path, prefix: char, suffix: &str) -> Result<Vec<u16>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut ids: Vec<u16> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Decodes `bytes` against `registry`.
pub fn decode_image(bytes: &[u8], registry: &Registry) -> Result<Tensor> {
    registry.decode(bytes)
}
