//! TOML sequence manifests and raw planar frame loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::siamese::BoundingBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Path of the 3-plane RGB file, relative to the manifest.
    pub rgb: String,
    /// Path of the 1-plane TIR file, relative to the manifest.
    pub tir: String,
    /// Groundtruth `[x, y, w, h]`, top-left corner.
    pub gt: [f64; 4],
    /// Degradations active on this frame.
    #[serde(default)]
    pub degraded: Vec<String>,
}

impl FrameEntry {
    pub fn bbox(&self) -> BoundingBox {
        let [x, y, w, h] = self.gt;
        BoundingBox::from_xywh(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub name: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub index: u64,
    pub scheme: String,
    pub frames: Vec<FrameEntry>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub manifest: SequenceManifest,
    pub root: PathBuf,
}

impl SequenceManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn groundtruth(&self) -> Vec<BoundingBox> {
        self.frames.iter().map(FrameEntry::bbox).collect()
    }

    fn check_shape(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::format(0, format!("manifest {:?} has {} frames, need at least 2", self.name, self.frame_count)));
        }
        if self.frames.len() != self.frame_count {
            return Err(Error::format(
                0,
                format!("manifest {:?} declares {} frames but lists {}", self.name, self.frame_count, self.frames.len()),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::format(0, "manifest image dimensions must be positive"));
        }
        Ok(())
    }
}

impl Sequence {
    /// Parses and validates a manifest; every frame file must exist with the
    /// byte length implied by the image dimensions.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SequenceManifest = toml::from_str(&text).map_err(|e| {
            let offset = e.span().map(|s| s.start as u64).unwrap_or(0);
            Error::format(offset, format!("{}: {}", path.display(), e.message()))
        })?;
        manifest.check_shape()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let plane = manifest.width * manifest.height;
        for f in &manifest.frames {
            for (rel, planes) in [(&f.rgb, 3), (&f.tir, 1)] {
                let p = root.join(rel);
                let len = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
                if len != (plane * planes) as u64 {
                    return Err(Error::format(
                        len,
                        format!("{} has {len} bytes, expected {}", p.display(), plane * planes),
                    ));
                }
            }
        }
        Ok(Sequence { manifest, root })
    }

    pub fn len(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frame_count == 0
    }

    /// Frame `i` as `([1,3,H,W], [1,1,H,W])` float tensors in 0..255.
    pub fn frame(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let m = &self.manifest;
        let f = m.frames.get(i).ok_or_else(|| Error::param(format!("frame {i} of {}", m.frame_count)))?;
        let read = |rel: &str, planes: usize| -> Result<Tensor> {
            let p = self.root.join(rel);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if bytes.len() != planes * m.width * m.height {
                return Err(Error::format(bytes.len() as u64, format!("{} has the wrong size", p.display())));
            }
            Tensor::new([1, planes, m.height, m.width], bytes.into_iter().map(f32::from).collect())
        };
        Ok((read(&f.rgb, 3)?, read(&f.tir, 1)?))
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<(Tensor, Tensor)>> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    pub fn groundtruth(&self) -> Vec<BoundingBox> {
        self.manifest.groundtruth()
    }
}
