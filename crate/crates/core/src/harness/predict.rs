use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Rgb};

use super::data::padded_edge;
use super::Outputs;
use crate::autodiff::BnMode;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{build_edge_gt, BinaryMask, EdgeGtParams, FloatMap};
use crate::metrics::{confusion, evaluate_volume, metrics, report_from_rows, EvalReport, SliceRow};
use crate::network::{Model, SliceInputs};
use crate::tensor::{Shape, Tensor};
use crate::volume::{
    assemble_slices, assemble_tiles, crop_volume, load_volume, pad_volume, tile_slice, Dtype,
    TileTriple, Volume, TILES_PER_SLICE,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per-voxel probabilities (`f32`).
    pub prob: Volume,
    /// `prob >= threshold` (`u8`).
    pub mask: Volume,
}

pub fn predicted_mask(prob: &Volume, threshold: f32) -> Result<Volume> {
    let slices: Vec<BinaryMask> = (0..prob.depth())
        .map(|z| prob.slice(z).threshold_at_least(threshold))
        .collect();
    assemble_slices(&slices, prob.spacing())
}

fn tiles_tensor(tiles: &[FloatMap]) -> Result<Tensor> {
    let t = tiles[0].height();
    let mut data = Vec::with_capacity(tiles.len() * t * t);
    for m in tiles {
        data.extend_from_slice(m.data());
    }
    Tensor::new(Shape::new(tiles.len(), 1, t, t), data)
}

/// Segments every slice of a normalized image volume: pad to a square slice,
/// run the 16 tiles of each triplet through the network with running BN
/// statistics, reassemble and crop back to the input dims.
pub fn predict_volume(model: &Model, image: &Volume, threshold: f32) -> Result<Prediction> {
    if image.dtype() != Dtype::F32 {
        return Err(Error::usage("prediction needs an f32 image volume, got a u8 mask"));
    }
    if image.voxels().iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("image volume contains non-finite voxels"));
    }
    let [d, h, w] = image.dims();
    let edge = padded_edge(h, w, model.config.tile_multiple());
    let padded = pad_volume(image, edge, edge)?;
    let tile = edge / 4;
    let mut fg = model.build(TILES_PER_SLICE, tile, BnMode::Eval, None)?;
    let mut slices = Vec::with_capacity(d);
    for z in 0..d {
        let inputs = SliceInputs {
            prev: tiles_tensor(&tile_slice(&padded.slice(z.saturating_sub(1)))?)?,
            target: tiles_tensor(&tile_slice(&padded.slice(z))?)?,
            next: tiles_tensor(&tile_slice(&padded.slice((z + 1).min(d - 1)))?)?,
        };
        let b = model.bindings(&fg, &inputs, None)?;
        let prob = fg.graph.evaluate(fg.outputs.mask, &b)?;
        let n = tile * tile;
        let tiles = prob
            .data()
            .chunks_exact(n)
            .map(|c| FloatMap::new(tile, tile, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        slices.push(assemble_tiles(&tiles)?);
    }
    let prob = crop_volume(&Volume::from_slices(&slices, image.spacing())?, h, w)?;
    let mask = predicted_mask(&prob, threshold)?;
    Ok(Prediction { prob, mask })
}

/// Loads a checkpoint and an image volume and writes `<out>/prob` and `<out>/mask`.
pub fn cmd_predict(ckpt: &Path, volume: &Path, out_dir: &Path, threshold: f32) -> Result<Prediction> {
    if !threshold.is_finite() {
        return Err(Error::config("threshold", "must be finite"));
    }
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let image = load_volume(volume)?;
    let pred = predict_volume(&model, &image, threshold)?;
    let mut out = Outputs::new();
    out.save_volume(&out_dir.join("prob"), &pred.prob)?;
    out.save_volume(&out_dir.join("mask"), &pred.mask)?;
    out.commit();
    Ok(pred)
}

pub fn cmd_evaluate(pred: &Path, gt: &Path, out_dir: &Path, threshold: f32) -> Result<EvalReport> {
    let p = load_volume(pred)?;
    let g = load_volume(gt)?;
    if g.dtype() != Dtype::U8 {
        return Err(Error::usage("ground truth must be a u8 mask volume"));
    }
    let report = evaluate_volume(&p, &g, threshold)?;
    let mut out = Outputs::new();
    out.write(&out_dir.join("eval.json"), report.to_json().as_bytes())?;
    out.write(&out_dir.join("eval.txt"), report.to_table().as_bytes())?;
    out.commit();
    Ok(report)
}

/// Scores the model on individual tile-triples, one report row per tile.
pub fn evaluate_samples(model: &Model, samples: &[&TileTriple], threshold: f32) -> Result<EvalReport> {
    let (inputs, _) = super::data::batch_tensors(samples)?;
    let out = model.forward(&inputs, BnMode::Eval)?;
    let n = out.mask.shape().h() * out.mask.shape().w();
    let side = out.mask.shape().h();
    let rows = samples
        .iter()
        .zip(out.mask.data().chunks_exact(n))
        .enumerate()
        .map(|(i, (s, p))| {
            let p = FloatMap::new(side, side, p.to_vec())?.threshold_at_least(threshold);
            let counts = confusion(&p, &s.gt.g)?;
            Ok(SliceRow {
                slice: i,
                has_nodule: !s.gt.g.is_empty(),
                counts,
                metrics: metrics(&counts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_rows(threshold, rows))
}

fn overlay_png(mask: &BinaryMask, edge: &BinaryMask) -> Vec<u8> {
    let img = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        if edge.get(y, x) {
            Rgb([255u8, 40, 40])
        } else if mask.get(y, x) {
            Rgb([110, 110, 110])
        } else {
            Rgb([0, 0, 0])
        }
    });
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    bytes.into_inner()
}

/// Writes the edge-band volume `<out>/edge` and one overlay PNG per slice
/// (band in red over the mask in grey).
pub fn cmd_edge_gt(mask: &Path, params: &EdgeGtParams, out_dir: &Path) -> Result<Volume> {
    params.validate()?;
    let v = load_volume(mask)?;
    if v.dtype() != Dtype::U8 {
        return Err(Error::usage("edge-gt needs a u8 mask volume"));
    }
    let masks = v.mask_slices()?;
    let edges = masks
        .iter()
        .map(|m| build_edge_gt(m, params))
        .collect::<Result<Vec<_>>>()?;
    let edge = assemble_slices(&edges, v.spacing())?;
    let mut out = Outputs::new();
    out.save_volume(&out_dir.join("edge"), &edge)?;
    for (z, (m, e)) in masks.iter().zip(&edges).enumerate() {
        out.write(&out_dir.join(format!("overlay_{z:03}.png")), &overlay_png(m, e))?;
    }
    out.commit();
    Ok(edge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::volume::{gen_phantom, save_volume, PhantomConfig};

    fn tiny_model() -> Model {
        Model::new(NetworkConfig {
            base_channels: 4,
            encoder_depth: 2,
            stage_blocks: vec![1, 1],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn prediction_keeps_dims_and_is_deterministic() {
        let cfg = PhantomConfig {
            dims: [3, 30, 21],
            radius_range: [2.0, 4.0],
            ..Default::default()
        };
        let (img, _) = gen_phantom(1, &cfg).unwrap();
        let model = tiny_model();
        let a = predict_volume(&model, &img, 0.5).unwrap();
        assert_eq!(a.prob.dims(), [3, 30, 21]);
        assert_eq!(a.mask.dims(), [3, 30, 21]);
        assert_eq!(a.mask.dtype(), Dtype::U8);
        assert!(a.prob.voxels().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a, predict_volume(&model, &img, 0.5).unwrap());
    }

    #[test]
    fn mask_volume_rejected_as_input() {
        let (_, mask) = gen_phantom(1, &PhantomConfig::default()).unwrap();
        assert!(matches!(
            predict_volume(&tiny_model(), &mask, 0.5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn edge_gt_writes_volume_and_overlays() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            dims: [2, 32, 32],
            nodules: 1,
            radius_range: [5.0, 6.0],
            ..Default::default()
        };
        let (_, mask) = gen_phantom(3, &cfg).unwrap();
        let name = dir.path().join("m");
        save_volume(&name, &mask).unwrap();
        let out = dir.path().join("edge");
        let edge = cmd_edge_gt(&name, &EdgeGtParams::default(), &out).unwrap();
        assert_eq!(edge.dims(), mask.dims());
        assert!(edge.positive_count() > 0);
        assert!(edge.positive_count() <= mask.positive_count());
        let png = image::open(out.join("overlay_001.png")).unwrap().to_rgb8();
        assert_eq!(png.dimensions(), (32, 32));
        assert_eq!(load_volume(&out.join("edge")).unwrap(), edge);
    }

    #[test]
    fn failed_edge_gt_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("edge");
        let bad = EdgeGtParams {
            kernel: 4,
            ..Default::default()
        };
        assert!(cmd_edge_gt(&dir.path().join("missing"), &bad, &out).is_err());
        assert!(!out.exists());
    }
}
