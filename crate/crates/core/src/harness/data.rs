use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Outputs, RunConfig};
use crate::error::{Error, Result};
use crate::imaging::{EdgeGtParams, FloatMap};
use crate::losses::TargetTensors;
use crate::network::SliceInputs;
use crate::tensor::{Shape, Tensor};
use crate::volume::{
    assemble_slices, gen_phantom, load_volume, make_triplets, normalize_hu, pad_volume, round_up,
    tile_triplet, volume_paths, Dtype, MaskSet, PhantomConfig, SliceTriplet, TileTriple, Volume,
    GRID,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub name: String,
    /// `phantom:<seed>` or the path of the provided image volume.
    pub source: String,
    pub split: Split,
    /// Dims before padding.
    pub dims: [usize; 3],
    /// Dims of the stored, padded volumes.
    pub padded_dims: [usize; 3],
    /// Volume names relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub edge: String,
    /// SHA-256 of the image, mask and edge payloads, in that order.
    pub sha256: [String; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    /// Index into [`Manifest::volumes`].
    pub volume: usize,
    pub slice: usize,
    /// Row-major position in the 4x4 grid.
    pub tile: usize,
    pub split: Split,
    pub positives: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    /// Tile edge length in pixels.
    pub tile: usize,
    pub triplets: usize,
    pub edge_gt: EdgeGtParams,
    pub volumes: Vec<VolumeEntry>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", m.version),
            ));
        }
        Ok(m)
    }
}

/// Hash of a tile-triple's slices and ground truth.
pub fn sample_digest(t: &TileTriple) -> String {
    let mut h = Sha256::new();
    h.update((t.target.height() as u64).to_le_bytes());
    h.update((t.target.width() as u64).to_le_bytes());
    for m in [&t.prev, &t.target, &t.next] {
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(t.gt.g.data());
    h.update(t.gt.g_edge.data());
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_digest(name: &Path) -> Result<String> {
    let (_, raw) = volume_paths(name);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Square slice edge that every volume is padded to: a multiple of the grid
/// times the encoder's tile multiple.
pub(crate) fn padded_edge(h: usize, w: usize, tile_multiple: usize) -> usize {
    round_up(h.max(w), GRID * tile_multiple)
}

fn phantom_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

fn assign_splits(seed: u64, n: usize, train: f64, val: f64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let n_train = ((train * n as f64).round() as usize).clamp(1, n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Triplets built from stored edge bands instead of recomputing them.
fn triplets_with_edges(image: &Volume, mask: &Volume, edge: &Volume) -> Result<Vec<SliceTriplet>> {
    if image.dims() != mask.dims() || image.dims() != edge.dims() {
        return Err(Error::usage("image, mask and edge volumes differ in dims"));
    }
    let d = image.depth();
    (0..d)
        .map(|i| {
            Ok(SliceTriplet {
                index: i,
                prev: image.slice(i.saturating_sub(1)),
                target: image.slice(i),
                next: image.slice((i + 1).min(d - 1)),
                gt: MaskSet::with_edge(mask.mask_slice(i)?, edge.mask_slice(i)?)?,
            })
        })
        .collect()
}

/// Generates or ingests the volumes, pads them, precomputes the edge bands,
/// and writes everything plus the manifest under `paths.data_dir`.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = &cfg.paths.data_dir;
    let mut out = Outputs::new();
    out.create_dir(dir)?;

    let mut sources: Vec<(String, String, Volume, Volume)> = Vec::new();
    for (i, s) in phantom_seeds(cfg.seed, cfg.data.phantoms).into_iter().enumerate() {
        let (img, mask) = gen_phantom(s, &cfg.data.phantom)?;
        sources.push((format!("phantom_{i:03}"), format!("phantom:{s}"), img, mask));
    }
    let [lo, hi] = cfg.data.hu_window;
    for (i, pair) in cfg.data.volumes.iter().enumerate() {
        let img = load_volume(&pair.image)?;
        let mask = load_volume(&pair.mask)?;
        if img.dtype() != Dtype::F32 {
            return Err(Error::format(&pair.image, "image volume must be f32"));
        }
        if mask.dtype() != Dtype::U8 {
            return Err(Error::format(&pair.mask, "mask volume must be u8"));
        }
        if img.dims() != mask.dims() {
            return Err(Error::format(
                &pair.mask,
                format!("mask dims {:?} differ from image dims {:?}", mask.dims(), img.dims()),
            ));
        }
        let img = normalize_hu(&img, lo, hi)?;
        sources.push((
            format!("volume_{i:03}"),
            pair.image.display().to_string(),
            img,
            mask,
        ));
    }

    let splits = assign_splits(
        cfg.seed,
        sources.len(),
        cfg.data.train_fraction,
        cfg.data.val_fraction,
    );
    let m = cfg.network.tile_multiple();
    let edge_len = sources
        .iter()
        .map(|(_, _, v, _)| padded_edge(v.height(), v.width(), m))
        .max()
        .expect("at least one volume");

    let mut volumes = Vec::new();
    let mut samples = Vec::new();
    let mut triplet_count = 0;
    for (vi, ((name, source, img, mask), split)) in sources.into_iter().zip(splits).enumerate() {
        let dims = img.dims();
        let img = pad_volume(&img, edge_len, edge_len)?;
        let mask = pad_volume(&mask, edge_len, edge_len)?;
        let triplets = make_triplets(&img, &mask, &cfg.edge_gt)?;
        let edges: Vec<_> = triplets.iter().map(|t| t.gt.g_edge.clone()).collect();
        let edge = assemble_slices(&edges, img.spacing())?;

        let names = [
            format!("volumes/{name}_image"),
            format!("volumes/{name}_mask"),
            format!("volumes/{name}_edge"),
        ];
        for (n, v) in names.iter().zip([&img, &mask, &edge]) {
            out.save_volume(&dir.join(n), v)?;
        }
        let sha256 = [
            payload_digest(&dir.join(&names[0]))?,
            payload_digest(&dir.join(&names[1]))?,
            payload_digest(&dir.join(&names[2]))?,
        ];

        for t in &triplets {
            triplet_count += 1;
            for (k, tile) in tile_triplet(t)?.tiles.iter().enumerate() {
                samples.push(SampleEntry {
                    volume: vi,
                    slice: t.index,
                    tile: k,
                    split,
                    positives: tile.gt.g.count(),
                    sha256: sample_digest(tile),
                });
            }
        }
        let [image, mask_name, edge_name] = names;
        volumes.push(VolumeEntry {
            name,
            source,
            split,
            dims,
            padded_dims: img.dims(),
            image,
            mask: mask_name,
            edge: edge_name,
            sha256,
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        tile: edge_len / GRID,
        triplets: triplet_count,
        edge_gt: cfg.edge_gt.clone(),
        volumes,
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    out.write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    out.write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    out.commit();
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub entry: VolumeEntry,
    pub image: Volume,
    pub mask: Volume,
    pub edge: Volume,
}

/// A prepared dataset with every checksum verified.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub volumes: Vec<LoadedVolume>,
    /// Tile-triples in manifest order.
    pub samples: Vec<TileTriple>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mpath = dir.join(MANIFEST_FILE);
        let mut volumes = Vec::with_capacity(manifest.volumes.len());
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.volumes {
            let names = [&entry.image, &entry.mask, &entry.edge].map(|n| dir.join(n));
            for (n, want) in names.iter().zip(&entry.sha256) {
                if &payload_digest(n)? != want {
                    return Err(Error::format(
                        volume_paths(n).1,
                        "payload checksum differs from the manifest",
                    ));
                }
            }
            let [image, mask, edge] = [
                load_volume(&names[0])?,
                load_volume(&names[1])?,
                load_volume(&names[2])?,
            ];
            for t in triplets_with_edges(&image, &mask, &edge)? {
                samples.extend(tile_triplet(&t)?.tiles);
            }
            volumes.push(LoadedVolume {
                entry: entry.clone(),
                image,
                mask,
                edge,
            });
        }
        if samples.len() != manifest.samples.len() {
            return Err(Error::format(
                &mpath,
                format!(
                    "manifest lists {} samples, volumes yield {}",
                    manifest.samples.len(),
                    samples.len()
                ),
            ));
        }
        for (i, (s, e)) in samples.iter().zip(&manifest.samples).enumerate() {
            if sample_digest(s) != e.sha256 {
                return Err(Error::format(
                    &mpath,
                    format!("sample {i} (volume {}, slice {}, tile {}) checksum differs", e.volume, e.slice, e.tile),
                ));
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            volumes,
            samples,
        })
    }

    pub fn split_samples(&self, split: Split) -> Vec<&TileTriple> {
        self.samples
            .iter()
            .zip(&self.manifest.samples)
            .filter(|(_, e)| e.split == split)
            .map(|(s, _)| s)
            .collect()
    }

    /// Volumes used for evaluation: the test split, else validation, else train.
    pub fn eval_volumes(&self) -> Vec<&LoadedVolume> {
        for split in [Split::Test, Split::Val, Split::Train] {
            let v: Vec<_> = self.volumes.iter().filter(|v| v.entry.split == split).collect();
            if !v.is_empty() {
                return v;
            }
        }
        Vec::new()
    }
}

fn stack(maps: impl Iterator<Item = FloatMap>, n: usize, size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * size * size);
    for m in maps {
        if m.height() != size || m.width() != size {
            return Err(Error::usage(format!(
                "tile {}x{} in a batch of {size}x{size} tiles",
                m.height(),
                m.width()
            )));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(Shape::new(n, 1, size, size), data)
}

/// Network inputs and loss targets for a batch of tile-triples.
pub fn batch_tensors(batch: &[&TileTriple]) -> Result<(SliceInputs, TargetTensors)> {
    let first = batch.first().ok_or_else(|| Error::usage("empty batch"))?;
    let n = batch.len();
    let t = first.target.height();
    if first.target.width() != t {
        return Err(Error::usage("tiles must be square"));
    }
    let inputs = SliceInputs {
        prev: stack(batch.iter().map(|s| s.prev.clone()), n, t)?,
        target: stack(batch.iter().map(|s| s.target.clone()), n, t)?,
        next: stack(batch.iter().map(|s| s.next.clone()), n, t)?,
    };
    let targets = TargetTensors {
        mask: stack(batch.iter().map(|s| s.gt.g.to_float()), n, t)?,
        edge: stack(batch.iter().map(|s| s.gt.g_edge.to_float()), n, t)?,
        scales: [
            stack(batch.iter().map(|s| s.gt.scales[0].to_float()), n, t)?,
            stack(batch.iter().map(|s| s.gt.scales[1].to_float()), n, t / 2)?,
            stack(batch.iter().map(|s| s.gt.scales[2].to_float()), n, t / 4)?,
        ],
    };
    Ok((inputs, targets))
}

/// Four 64x64 tile-triples with the most nodule pixels, cut from a 256x256
/// phantom. Used for the overfitting smoke test.
pub fn overfit_fixture(seed: u64) -> Result<Vec<TileTriple>> {
    let cfg = PhantomConfig {
        dims: [8, 256, 256],
        nodules: 4,
        radius_range: [8.0, 20.0],
        ..PhantomConfig::default()
    };
    let (img, mask) = gen_phantom(seed, &cfg)?;
    let mut tiles = Vec::new();
    for t in make_triplets(&img, &mask, &EdgeGtParams::default())? {
        tiles.extend(tile_triplet(&t)?.tiles);
    }
    // Stable sort keeps the choice deterministic among ties.
    tiles.sort_by_key(|t| std::cmp::Reverse(t.gt.g.count()));
    tiles.truncate(4);
    if tiles.iter().any(|t| t.gt.g.is_empty()) {
        return Err(Error::usage("fixture phantom has fewer than four nodule tiles"));
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.paths.data_dir = dir.join("data");
        cfg.paths.out_dir = dir.join("out");
        cfg.network.encoder_depth = 2;
        cfg.network.stage_blocks = vec![1, 1];
        cfg.network.base_channels = 4;
        cfg
    }

    #[test]
    fn splits_are_seeded_and_cover_everything() {
        let a = assign_splits(3, 10, 0.6, 0.2);
        assert_eq!(a, assign_splits(3, 10, 0.6, 0.2));
        let count = |s| a.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        assert_eq!(assign_splits(0, 1, 0.1, 0.0), vec![Split::Train]);
    }

    #[test]
    fn prepare_counts_triplets_and_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let m = cmd_prepare(&cfg).unwrap();
        assert_eq!(m.triplets, 16);
        assert_eq!(m.samples.len(), 256);
        assert_eq!(m.tile, 16);
        let ds = Dataset::load(&cfg.paths.data_dir).unwrap();
        assert_eq!(ds.samples.len(), 256);
        let train = ds.split_samples(Split::Train).len();
        assert_eq!(train, 128);
    }

    #[test]
    fn tampered_volume_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let m = cmd_prepare(&cfg).unwrap();
        let (_, raw) = volume_paths(&cfg.paths.data_dir.join(&m.volumes[0].mask));
        let mut bytes = std::fs::read(&raw).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&raw, bytes).unwrap();
        assert!(matches!(
            Dataset::load(&cfg.paths.data_dir),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn batch_tensors_stack_in_order() {
        let fixture = overfit_fixture(1).unwrap();
        let refs: Vec<&TileTriple> = fixture.iter().collect();
        let (inputs, targets) = batch_tensors(&refs).unwrap();
        assert_eq!(inputs.target.shape(), Shape::new(4, 1, 64, 64));
        assert_eq!(targets.scales[2].shape(), Shape::new(4, 1, 16, 16));
        let n = 64 * 64;
        assert_eq!(&inputs.prev.data()[n..2 * n], fixture[1].prev.data());
        let ones = targets.mask.data()[2 * n..3 * n].iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, fixture[2].gt.g.count());
    }

    #[test]
    fn fixture_tiles_all_contain_nodule() {
        let f = overfit_fixture(5).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.iter().all(|t| t.gt.g.count() > 0 && t.target.height() == 64));
        assert_eq!(f, overfit_fixture(5).unwrap());
    }
}
