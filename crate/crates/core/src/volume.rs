//! CT volumes on disk and in memory, slice triplets with their ground-truth
//! mask sets, the 4x4 tile decomposition, and synthetic phantoms.
//!
//! A volume named `name` lives in `name.json` (header) and `name.raw`
//! (little-endian payload, slice-major, `W` innermost).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    build_edge_gt, convolve_separable, downsample_mask, gaussian_kernel, BinaryMask, EdgeGtParams,
    FloatMap,
};

/// Tiles per slice side.
pub const GRID: usize = 4;
pub const TILES_PER_SLICE: usize = GRID * GRID;

pub const HU_LO: f32 = -1000.0;
pub const HU_HI: f32 = 400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        dtype: Dtype,
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!(
                "volume dims {dims:?} must all be positive"
            )));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::usage(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if dtype == Dtype::U8 {
            if let Some(v) = voxels
                .iter()
                .find(|v| !(v.fract() == 0.0 && (0.0..=255.0).contains(*v)))
            {
                return Err(Error::usage(format!("u8 volume holds non-byte value {v}")));
            }
        }
        Ok(Volume {
            dims,
            spacing,
            dtype,
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], dtype: Dtype) -> Result<Self> {
        Volume::new(dims, spacing, dtype, vec![0.0; dims.iter().product()])
    }

    /// Stacks slice maps into an `f32` volume.
    pub fn from_slices(slices: &[FloatMap], spacing: [f64; 3]) -> Result<Self> {
        let (h, w) = common_shape(slices.iter().map(|s| (s.height(), s.width())))?;
        let voxels = slices
            .iter()
            .flat_map(|s| s.data().iter().copied())
            .collect();
        Volume::new([slices.len(), h, w], spacing, Dtype::F32, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    fn plane(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice(&self, z: usize) -> FloatMap {
        let p = self.plane();
        FloatMap::new(
            self.dims[1],
            self.dims[2],
            self.voxels[z * p..(z + 1) * p].to_vec(),
        )
        .expect("slice length matches plane")
    }

    /// Slice `z` as a binary mask; fails on values other than 0 and 1.
    pub fn mask_slice(&self, z: usize) -> Result<BinaryMask> {
        let p = self.plane();
        let mut data = Vec::with_capacity(p);
        for &v in &self.voxels[z * p..(z + 1) * p] {
            if v == 0.0 {
                data.push(0);
            } else if v == 1.0 {
                data.push(1);
            } else {
                return Err(Error::usage(format!(
                    "mask slice {z} holds non-binary value {v}"
                )));
            }
        }
        BinaryMask::new(self.dims[1], self.dims[2], data)
    }

    pub fn mask_slices(&self) -> Result<Vec<BinaryMask>> {
        (0..self.depth()).map(|z| self.mask_slice(z)).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0.0).count()
    }
}

fn common_shape(mut shapes: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let first = shapes
        .next()
        .ok_or_else(|| Error::usage("no slices to stack"))?;
    for s in shapes {
        if s != first {
            return Err(Error::usage(format!(
                "slices differ in shape: {}x{} vs {}x{}",
                first.0, first.1, s.0, s.1
            )));
        }
    }
    Ok(first)
}

/// Header and payload paths for a volume name, with or without extension.
pub fn volume_paths(name: &Path) -> (PathBuf, PathBuf) {
    let stem = match name.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => name.with_extension(""),
        _ => name.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn load_volume(name: &Path) -> Result<Volume> {
    let (json, raw) = volume_paths(name);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.dims.iter().product();
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    if bytes.len() != n * width {
        return Err(Error::format(
            &raw,
            format!(
                "header declares {:?} ({} values) but payload holds {} values",
                header.dims,
                n,
                bytes.len() / width
            ),
        ));
    }
    let voxels = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(header.dims, header.spacing, header.dtype, voxels)
        .map_err(|e| Error::format(&json, e.to_string()))
}

/// Writes both files through temporaries so a failure leaves nothing behind.
pub fn save_volume(name: &Path, v: &Volume) -> Result<()> {
    let (json, raw) = volume_paths(name);
    let header = Header {
        dims: v.dims,
        spacing: v.spacing,
        dtype: v.dtype,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    let payload: Vec<u8> = match v.dtype {
        Dtype::F32 => v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Dtype::U8 => v.voxels.iter().map(|&x| x as u8).collect(),
    };
    write_atomic(&raw, &payload)?;
    if let Err(e) = write_atomic(&json, text.as_bytes()) {
        let _ = fs::remove_file(&raw);
        return Err(e);
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Clips to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::usage(format!(
            "normalize_hu needs lo < hi, got {lo} >= {hi}"
        )));
    }
    let span = hi - lo;
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (x.clamp(lo, hi) - lo) / span)
        .collect();
    Volume::new(v.dims, v.spacing, Dtype::F32, voxels)
}

/// Ground truth for one slice or tile: the mask, its boundary band, and the
/// mask at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub g: BinaryMask,
    pub g_edge: BinaryMask,
    pub scales: [BinaryMask; 3],
}

impl MaskSet {
    pub fn with_edge(g: BinaryMask, g_edge: BinaryMask) -> Result<Self> {
        if !g_edge.is_subset_of(&g) {
            return Err(Error::usage("edge band is not contained in its mask"));
        }
        let scales = [g.clone(), downsample_mask(&g, 2)?, downsample_mask(&g, 4)?];
        Ok(MaskSet { g, g_edge, scales })
    }

    pub fn build(g: BinaryMask, params: &EdgeGtParams) -> Result<Self> {
        let e = build_edge_gt(&g, params)?;
        MaskSet::with_edge(g, e)
    }

    /// Row-major 4x4 tiles. The edge band is cut from the full-slice band,
    /// not recomputed per tile.
    pub fn tiles(&self) -> Result<Vec<MaskSet>> {
        let g = tile_mask(&self.g)?;
        let e = tile_mask(&self.g_edge)?;
        g.into_iter()
            .zip(e)
            .map(|(g, e)| MaskSet::with_edge(g, e))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriplet {
    pub index: usize,
    pub prev: FloatMap,
    pub target: FloatMap,
    pub next: FloatMap,
    pub gt: MaskSet,
}

/// One triplet per slice; the first and last slices reuse themselves as the
/// missing neighbour.
pub fn make_triplets(
    v: &Volume,
    masks: &Volume,
    params: &EdgeGtParams,
) -> Result<Vec<SliceTriplet>> {
    if v.dims != masks.dims {
        return Err(Error::usage(format!(
            "image dims {:?} and mask dims {:?} differ",
            v.dims, masks.dims
        )));
    }
    let d = v.depth();
    (0..d)
        .map(|i| {
            Ok(SliceTriplet {
                index: i,
                prev: v.slice(i.saturating_sub(1)),
                target: v.slice(i),
                next: v.slice((i + 1).min(d - 1)),
                gt: MaskSet::build(masks.mask_slice(i)?, params)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileTriple {
    pub prev: FloatMap,
    pub target: FloatMap,
    pub next: FloatMap,
    pub gt: MaskSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileBatch {
    pub index: usize,
    pub tiles: Vec<TileTriple>,
}

pub fn tile_triplet(t: &SliceTriplet) -> Result<TileBatch> {
    let prev = tile_slice(&t.prev)?;
    let target = tile_slice(&t.target)?;
    let next = tile_slice(&t.next)?;
    let gts = t.gt.tiles()?;
    let tiles = prev
        .into_iter()
        .zip(target)
        .zip(next)
        .zip(gts)
        .map(|(((prev, target), next), gt)| TileTriple {
            prev,
            target,
            next,
            gt,
        })
        .collect();
    Ok(TileBatch {
        index: t.index,
        tiles,
    })
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % GRID != 0 || w % GRID != 0 || h == 0 || w == 0 {
        return Err(Error::usage(format!(
            "slice {h}x{w} is not divisible into a {GRID}x{GRID} grid; pad it first"
        )));
    }
    Ok(())
}

fn tile_raw<T: Copy>(h: usize, w: usize, data: &[T]) -> Vec<Vec<T>> {
    let (th, tw) = (h / GRID, w / GRID);
    let mut out = Vec::with_capacity(TILES_PER_SLICE);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut t = Vec::with_capacity(th * tw);
            for y in gy * th..(gy + 1) * th {
                t.extend_from_slice(&data[y * w + gx * tw..y * w + (gx + 1) * tw]);
            }
            out.push(t);
        }
    }
    out
}

fn assemble_raw<T: Copy + Default>(th: usize, tw: usize, tiles: &[&[T]]) -> Vec<T> {
    let w = tw * GRID;
    let mut out = vec![T::default(); th * GRID * w];
    for (k, t) in tiles.iter().enumerate() {
        let (gy, gx) = (k / GRID, k % GRID);
        for y in 0..th {
            let dst = (gy * th + y) * w + gx * tw;
            out[dst..dst + tw].copy_from_slice(&t[y * tw..(y + 1) * tw]);
        }
    }
    out
}

/// Row-major 4x4 grid of equal tiles.
pub fn tile_slice(s: &FloatMap) -> Result<Vec<FloatMap>> {
    let (h, w) = (s.height(), s.width());
    check_divisible(h, w)?;
    tile_raw(h, w, s.data())
        .into_iter()
        .map(|t| FloatMap::new(h / GRID, w / GRID, t))
        .collect()
}

pub fn tile_mask(m: &BinaryMask) -> Result<Vec<BinaryMask>> {
    let (h, w) = (m.height(), m.width());
    check_divisible(h, w)?;
    tile_raw(h, w, m.data())
        .into_iter()
        .map(|t| BinaryMask::new(h / GRID, w / GRID, t))
        .collect()
}

fn tile_count(n: usize) -> Result<()> {
    if n != TILES_PER_SLICE {
        return Err(Error::usage(format!(
            "expected {TILES_PER_SLICE} tiles, got {n}"
        )));
    }
    Ok(())
}

pub fn assemble_tiles(tiles: &[FloatMap]) -> Result<FloatMap> {
    tile_count(tiles.len())?;
    let (th, tw) = common_shape(tiles.iter().map(|t| (t.height(), t.width())))?;
    let parts: Vec<&[f32]> = tiles.iter().map(|t| t.data()).collect();
    FloatMap::new(th * GRID, tw * GRID, assemble_raw(th, tw, &parts))
}

pub fn assemble_mask_tiles(tiles: &[BinaryMask]) -> Result<BinaryMask> {
    tile_count(tiles.len())?;
    let (th, tw) = common_shape(tiles.iter().map(|t| (t.height(), t.width())))?;
    let parts: Vec<&[u8]> = tiles.iter().map(|t| t.data()).collect();
    BinaryMask::new(th * GRID, tw * GRID, assemble_raw(th, tw, &parts))
}

/// Stacks mask slices into a `u8` volume.
pub fn assemble_slices(slices: &[BinaryMask], spacing: [f64; 3]) -> Result<Volume> {
    let (h, w) = common_shape(slices.iter().map(|s| (s.height(), s.width())))?;
    let voxels = slices
        .iter()
        .flat_map(|s| s.data().iter().map(|&v| v as f32))
        .collect();
    Volume::new([slices.len(), h, w], spacing, Dtype::U8, voxels)
}

/// Smallest multiple of `m` that is at least `n`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Zero-pads every slice at the bottom and right to `h x w`.
pub fn pad_volume(v: &Volume, h: usize, w: usize) -> Result<Volume> {
    let [d, vh, vw] = v.dims;
    if h < vh || w < vw {
        return Err(Error::usage(format!(
            "cannot pad {vh}x{vw} down to {h}x{w}"
        )));
    }
    let mut voxels = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..vh {
            let src = (z * vh + y) * vw;
            let dst = (z * h + y) * w;
            voxels[dst..dst + vw].copy_from_slice(&v.voxels[src..src + vw]);
        }
    }
    Volume::new([d, h, w], v.spacing, v.dtype, voxels)
}

/// Keeps the top-left `h x w` of every slice.
pub fn crop_volume(v: &Volume, h: usize, w: usize) -> Result<Volume> {
    let [d, vh, vw] = v.dims;
    if h > vh || w > vw {
        return Err(Error::usage(format!("cannot crop {vh}x{vw} up to {h}x{w}")));
    }
    let mut voxels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let src = (z * vh + y) * vw;
            voxels.extend_from_slice(&v.voxels[src..src + w]);
        }
    }
    Volume::new([d, h, w], v.spacing, v.dtype, voxels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub nodules: usize,
    /// Semi-axis range in voxels.
    pub radius_range: [f64; 2],
    pub background: f64,
    pub intensity: f64,
    /// Standard deviation of the smoothed background texture.
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [8, 64, 64],
            spacing: [2.5, 0.7, 0.7],
            nodules: 2,
            radius_range: [3.0, 8.0],
            background: 0.2,
            intensity: 0.7,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        match self.problem() {
            Some((_, msg)) => Err(Error::usage(format!("phantom: {msg}"))),
            None => Ok(()),
        }
    }

    /// First invalid field and what is wrong with it.
    pub fn problem(&self) -> Option<(&'static str, String)> {
        if self.dims.iter().any(|&d| d == 0) {
            return Some(("dims", format!("{:?} must be positive", self.dims)));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Some(("radius_range", format!("[{lo}, {hi}] is invalid")));
        }
        if self.nodules > 0 && 2.0 * hi + 1.0 > self.dims[1].min(self.dims[2]) as f64 {
            return Some((
                "radius_range",
                format!(
                    "nodule radius {hi} does not fit inside {}x{} slices",
                    self.dims[1], self.dims[2]
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Some(("noise_sigma", "must be non-negative".into()));
        }
        None
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Nodule {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Random nodules whose in-plane extent lies inside the slice. Through-plane
/// radii are capped at half the depth.
pub fn sample_nodules(rng: &mut impl Rng, cfg: &PhantomConfig) -> Vec<Nodule> {
    let [lo, hi] = cfg.radius_range;
    (0..cfg.nodules)
        .map(|_| {
            let mut radii = [0.0; 3];
            let mut center = [0.0; 3];
            for a in 0..3 {
                let n = cfg.dims[a] as f64;
                let r = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                radii[a] = if a == 0 { r.min((n / 2.0).max(0.5)) } else { r };
                let (c_lo, c_hi) = (radii[a], n - 1.0 - radii[a]);
                center[a] = if c_lo < c_hi {
                    rng.gen_range(c_lo..=c_hi)
                } else {
                    (n - 1.0) / 2.0
                };
            }
            Nodule { center, radii }
        })
        .collect()
}

/// Synthetic image and mask volumes with sampled nodules.
pub fn gen_phantom(seed: u64, cfg: &PhantomConfig) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodules = sample_nodules(&mut rng, cfg);
    render_phantom(&mut rng, cfg, &nodules)
}

/// Renders explicit nodules over a smoothed-noise background.
pub fn render_phantom(
    rng: &mut impl Rng,
    cfg: &PhantomConfig,
    nodules: &[Nodule],
) -> Result<(Volume, Volume)> {
    let [d, h, w] = cfg.dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::usage(format!(
            "phantom dims {:?} must be positive",
            cfg.dims
        )));
    }
    let k = gaussian_kernel(2.0, 9)?;
    let mut texture = Vec::with_capacity(d * h * w);
    for _ in 0..d {
        let noise: Vec<f32> = (0..h * w)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let plane = FloatMap::new(h, w, noise)?;
        texture.extend_from_slice(convolve_separable(&plane, &k).data());
    }
    let n = texture.len() as f64;
    let mean = texture.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (texture
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let scale = if std > 0.0 {
        cfg.noise_sigma / std
    } else {
        0.0
    };

    let mut image = Vec::with_capacity(d * h * w);
    let mut mask = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let t = (texture[(z * h + y) * w + x] as f64 - mean) * scale;
                let inside = nodules.iter().any(|n| n.contains(z, y, x));
                let level = if inside {
                    cfg.intensity
                } else {
                    cfg.background
                };
                image.push((level + t).clamp(0.0, 1.0) as f32);
                mask.push(inside as u8 as f32);
            }
        }
    }
    Ok((
        Volume::new(cfg.dims, cfg.spacing, Dtype::F32, image)?,
        Volume::new(cfg.dims, cfg.spacing, Dtype::U8, mask)?,
    ))
}
