use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Conv2d, Layer, Linear, ModelGraph, Pool, ResidualLink};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "model.manifest";
pub const BLOB_FILE: &str = "model.blob";
const FORMAT: &str = "fsm-model";
const VERSION: u32 = 1;

/// Byte region of one tensor inside the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Region {
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        stride: usize,
        padding: usize,
        weight: Region,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Region>,
    },
    BatchNorm {
        eps: f32,
        gamma: Region,
        beta: Region,
        #[serde(default)]
        running_mean: Option<Region>,
        #[serde(default)]
        running_var: Option<Region>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        weight: Region,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Region>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input: [usize; 3],
    #[serde(default)]
    residual_links: Vec<ResidualLink>,
    layers: Vec<LayerEntry>,
    blob_bytes: usize,
    crc32: u32,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() || path.extension().is_none() {
        (path.join(MANIFEST_FILE), path.join(BLOB_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(BLOB_FILE))
    }
}

struct BlobWriter(Vec<u8>);

impl BlobWriter {
    fn push(&mut self, shape: &[usize], data: &[f32]) -> Region {
        let offset = self.0.len();
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Region {
            offset,
            shape: shape.to_vec(),
        }
    }

    fn vec(&mut self, data: &[f32]) -> Region {
        self.push(&[data.len()], data)
    }
}

/// Write `graph` as `model.manifest` + `model.blob` into directory `dir`.
pub fn save_model(graph: &ModelGraph, dir: &Path) -> Result<()> {
    graph.validate()?;
    let mut blob = BlobWriter(Vec::new());
    let layers = graph
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Conv2d(c) => LayerEntry::Conv2d {
                stride: c.stride,
                padding: c.padding,
                weight: blob.push(c.weight.shape(), c.weight.data()),
                bias: c.bias.as_deref().map(|b| blob.vec(b)),
            },
            Layer::BatchNorm(bn) => LayerEntry::BatchNorm {
                eps: bn.eps,
                gamma: blob.vec(&bn.gamma),
                beta: blob.vec(&bn.beta),
                running_mean: Some(blob.vec(&bn.running_mean)),
                running_var: Some(blob.vec(&bn.running_var)),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool(p) => LayerEntry::MaxPool {
                kernel: p.kernel,
                stride: p.stride,
            },
            Layer::AvgPool(p) => LayerEntry::AvgPool {
                kernel: p.kernel,
                stride: p.stride,
            },
            Layer::Flatten => LayerEntry::Flatten,
            Layer::Linear(l) => LayerEntry::Linear {
                weight: blob.push(l.weight.shape(), l.weight.data()),
                bias: l.bias.as_deref().map(|b| blob.vec(b)),
            },
        })
        .collect();
    let blob = blob.0;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        input: graph.input,
        residual_links: graph.residual_links.clone(),
        layers,
        blob_bytes: blob.len(),
        crc32: crc32fast::hash(&blob),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let (mpath, bpath) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

struct BlobReader<'a> {
    blob: &'a [u8],
    /// offset -> (end, name) of every region read so far.
    seen: BTreeMap<usize, (usize, String)>,
}

impl BlobReader<'_> {
    /// Bounds and overlap checks only; data is read after the checksum.
    fn claim(&mut self, name: String, r: &Region) -> Result<()> {
        let count: usize = r.shape.iter().product();
        if r.shape.is_empty() || count == 0 {
            return Err(Error::Manifest(format!("tensor `{name}` has empty shape {:?}", r.shape)));
        }
        if r.offset % 4 != 0 {
            return Err(Error::Manifest(format!(
                "tensor `{name}` offset {} is not 4-byte aligned",
                r.offset
            )));
        }
        let end = r.offset + count * 4;
        if end > self.blob.len() {
            return Err(Error::OffsetOverrun {
                name,
                offset: r.offset,
                end,
                len: self.blob.len(),
            });
        }
        // Claimed regions are disjoint, so only the last one starting before
        // `end` can reach into this one.
        if let Some((_, (prev_end, other))) = self.seen.range(..end).next_back() {
            if *prev_end > r.offset {
                return Err(Error::Manifest(format!(
                    "tensor `{name}` overlaps tensor `{other}`"
                )));
            }
        }
        self.seen.insert(r.offset, (end, name));
        Ok(())
    }

    fn floats(&self, r: &Region) -> Vec<f32> {
        let count: usize = r.shape.iter().product();
        self.blob[r.offset..r.offset + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }

    fn tensor(&self, r: &Region) -> Result<Tensor> {
        Tensor::from_vec(&r.shape, self.floats(r))
    }

    fn vector(&self, name: &str, r: &Region) -> Result<Vec<f32>> {
        if r.shape.len() != 1 {
            return Err(Error::Manifest(format!(
                "tensor `{name}` must be a vector, has shape {:?}",
                r.shape
            )));
        }
        Ok(self.floats(r))
    }
}

/// Read an archive from a directory or from the path of its manifest.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let (mpath, bpath) = paths(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format {} version {}",
            manifest.format, manifest.version
        )));
    }
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut reader = BlobReader {
        blob: &blob,
        seen: BTreeMap::new(),
    };
    for (i, entry) in manifest.layers.iter().enumerate() {
        match entry {
            LayerEntry::Conv2d { weight, bias, .. } | LayerEntry::Linear { weight, bias } => {
                reader.claim(format!("layers[{i}].weight"), weight)?;
                if let Some(b) = bias {
                    reader.claim(format!("layers[{i}].bias"), b)?;
                }
            }
            LayerEntry::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                let (Some(mean), Some(var)) = (running_mean, running_var) else {
                    return Err(Error::Manifest(format!(
                        "layers[{i}]: batch norm without running statistics"
                    )));
                };
                reader.claim(format!("layers[{i}].gamma"), gamma)?;
                reader.claim(format!("layers[{i}].beta"), beta)?;
                reader.claim(format!("layers[{i}].running_mean"), mean)?;
                reader.claim(format!("layers[{i}].running_var"), var)?;
            }
            _ => {}
        }
    }
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Manifest(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let actual = crc32fast::hash(&blob);
    if actual != manifest.crc32 {
        return Err(Error::Checksum {
            expected: manifest.crc32,
            actual,
        });
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let name = |field: &str| format!("layers[{i}].{field}");
        let layer = match entry {
            LayerEntry::Conv2d {
                stride,
                padding,
                weight,
                bias,
            } => Layer::Conv2d(Conv2d {
                weight: reader.tensor(weight)?,
                bias: bias.as_ref().map(|b| reader.vector(&name("bias"), b)).transpose()?,
                stride: *stride,
                padding: *padding,
            }),
            LayerEntry::BatchNorm {
                eps,
                gamma,
                beta,
                running_mean,
                running_var,
            } => Layer::BatchNorm(BatchNorm {
                gamma: reader.vector(&name("gamma"), gamma)?,
                beta: reader.vector(&name("beta"), beta)?,
                running_mean: reader.vector(&name("running_mean"), running_mean.as_ref().expect("checked"))?,
                running_var: reader.vector(&name("running_var"), running_var.as_ref().expect("checked"))?,
                eps: *eps,
            }),
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool { kernel, stride } => Layer::MaxPool(Pool {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerEntry::AvgPool { kernel, stride } => Layer::AvgPool(Pool {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerEntry::Flatten => Layer::Flatten,
            LayerEntry::Linear { weight, bias } => Layer::Linear(Linear {
                weight: reader.tensor(weight)?,
                bias: bias.as_ref().map(|b| reader.vector(&name("bias"), b)).transpose()?,
            }),
        };
        layers.push(layer);
    }
    let graph = ModelGraph {
        input: manifest.input,
        layers,
        residual_links: manifest.residual_links,
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::zoo::{vgg8, VggConfig};
    use proptest::prelude::*;

    fn small() -> ModelGraph {
        vgg8(
            &VggConfig {
                widths: [4, 4, 6, 6, 8, 8],
                hidden: 8,
                classes: 3,
                input: [3, 8, 8],
            },
            1,
        )
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = small();
        save_model(&g, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), g);
        assert_eq!(load_model(&dir.path().join(MANIFEST_FILE)).unwrap(), g);
    }

    #[test]
    fn truncated_blob_overruns() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        let bpath = dir.path().join(BLOB_FILE);
        let blob = fs::read(&bpath).unwrap();
        fs::write(&bpath, &blob[..blob.len() - 4]).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::OffsetOverrun { ref name, .. } if name.starts_with("layers[")), "{err}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        let bpath = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&bpath).unwrap();
        blob[17] ^= 0x40;
        fs::write(&bpath, &blob).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let mpath = dir.join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        f(&mut v);
        fs::write(&mpath, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn channel_mismatch_surfaces_as_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| {
            v["layers"][3]["weight"]["shape"] = serde_json::json!([4, 3, 3, 3]);
        });
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: 3, .. }), "{err}");
    }

    #[test]
    fn missing_running_stats_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| {
            v["layers"][1].as_object_mut().unwrap().remove("running_var");
        });
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(m)) if m.contains("layers[1]")));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| {
            v["layers"][1]["beta"]["offset"] = v["layers"][1]["gamma"]["offset"].clone();
        });
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(m)) if m.contains("overlaps")));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"format\": 3").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn missing_archive_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn loading_leaves_files_untouched() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small(), dir.path()).unwrap();
        let before = (
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(dir.path().join(BLOB_FILE)).unwrap(),
        );
        load_model(dir.path()).unwrap();
        let after = (
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(dir.path().join(BLOB_FILE)).unwrap(),
        );
        assert_eq!(before, after);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), w in 1usize..6, residual in any::<bool>()) {
            let mut g = vgg8(
                &VggConfig { widths: [w, w, w + 1, w + 1, w, w], hidden: 5, classes: 4, input: [3, 8, 8] },
                seed,
            );
            if residual {
                g.residual_links.push(ResidualLink { from: 0, to: 1 });
            }
            // Exercise optional biases and odd float patterns.
            if let Layer::Conv2d(c) = &mut g.layers[0] {
                c.bias = Some((0..w).map(|k| f32::from_bits(0x3f80_0001 + k as u32)).collect());
            }
            let dir = tempfile::tempdir().unwrap();
            save_model(&g, dir.path()).unwrap();
            let back = load_model(dir.path()).unwrap();
            for (a, b) in g.layers.iter().zip(&back.layers) {
                if let (Layer::Conv2d(x), Layer::Conv2d(y)) = (a, b) {
                    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(&x.weight), bits(&y.weight));
                }
            }
            prop_assert_eq!(back, g);
        }
    }
}
