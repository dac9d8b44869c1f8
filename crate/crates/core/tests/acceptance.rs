//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use asfseg::autodiff::optim::{AdamConfig, AdamState};
use asfseg::autodiff::{Bindings, BnMode, Graph};
use asfseg::harness::{
    cmd_ablation, cmd_gradcheck, cmd_prepare, evaluate_samples, overfit_fixture, AblationSpec,
    GradcheckConfig, RunConfig, Trainer, Variant,
};
use asfseg::imaging::{build_edge_gt, BinaryMask, EdgeGtParams, FloatMap};
use asfseg::losses::{bce, dice_loss, loss_bin, loss_edge, loss_ms, loss_total, LossWeights, TargetTensors};
use asfseg::metrics::{confusion, evaluate_volume, metrics, ConfusionCounts};
use asfseg::network::attention::apply_weight_maps;
use asfseg::network::{asf_fuse, AsfVariant, Builder, Model, NetworkConfig, SliceInputs};
use asfseg::volume::{
    assemble_mask_tiles, assemble_slices, assemble_tiles, crop_volume, make_triplets, pad_volume,
    round_up, tile_triplet, Dtype, Volume,
};
use asfseg::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny_network(seed: u64) -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        encoder_depth: 2,
        stage_blocks: vec![1, 1],
        seed,
        ..NetworkConfig::default()
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Check {
    let t0 = Instant::now();
    let report = cmd_gradcheck(&GradcheckConfig::default(), None).map_err(e2s)?;
    let elapsed = t0.elapsed();
    let worst_prim = report
        .rows
        .iter()
        .filter(|r| !r.name.starts_with("total loss"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let full = report
        .rows
        .iter()
        .find(|r| r.name.starts_with("total loss"))
        .ok_or("no full-graph row")?;
    ensure(report.passed, || format!("gradcheck failed:\n{}", report.to_table()))?;
    ensure(worst_prim <= 1e-3, || format!("primitive error {worst_prim:.2e}"))?;
    ensure(full.max_rel_error <= 1e-2, || format!("full-graph error {:.2e}", full.max_rel_error))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} primitives, worst {worst_prim:.1e}; full graph {:.1e}; {elapsed:.1?}",
        report.rows.len() - 1,
        full.max_rel_error
    ))
}

// ---------------------------------------------------------------- 2

fn fused(x: &Tensor, wp: &Tensor, wn: &Tensor) -> Tensor {
    let s = x.shape();
    let mut g = Graph::new();
    let ids = ["wp", "x", "wn"].map(|k| g.input(k, s).unwrap());
    let z = apply_weight_maps(&mut g, ids[0], ids[1], ids[2]).unwrap();
    let bind: Bindings = [("wp", wp), ("x", x), ("wn", wn)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    g.evaluate(z, &bind).unwrap()
}

fn fusion_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f0 = Model::new(NetworkConfig {
        asf_variant: AsfVariant::F0,
        ..tiny_network(5)
    })
    .map_err(e2s)?;
    for case in 0..50 {
        let s = Shape::new(rng.gen_range(1..3), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = Tensor::uniform(s, -3.0, 3.0, &mut rng);
        let ones = Tensor::full(s, 1.0);
        let zeros = Tensor::full(s, 0.0);
        ensure(fused(&x, &ones, &ones) == x, || format!("case {case}: ones are not the identity"))?;
        let z = fused(&x, &zeros, &zeros);
        ensure(z.data().iter().all(|&v| v == 0.0), || format!("case {case}: zeros do not annihilate"))?;

        // F0 returns the target feature node itself.
        let mut g = Graph::new();
        let mut b = Builder::new(&mut g, BnMode::Train);
        let ids = ["p", "x", "n"].map(|k| b.graph.input(k, s).unwrap());
        let out = asf_fuse(&mut b, "asf", Some(ids[0]), ids[1], Some(ids[2]), AsfVariant::F0).map_err(e2s)?;
        ensure(out == ids[1], || format!("case {case}: F0 built extra nodes"))?;

        // And the whole F0 network ignores neighbour content.
        let t = Shape::new(1, 1, 16, 16);
        let mut inputs = SliceInputs {
            prev: Tensor::uniform(t, 0.0, 1.0, &mut rng),
            target: Tensor::uniform(t, 0.0, 1.0, &mut rng),
            next: Tensor::uniform(t, 0.0, 1.0, &mut rng),
        };
        let a = f0.forward(&inputs, BnMode::Eval).map_err(e2s)?;
        inputs.prev = Tensor::uniform(t, 0.0, 1.0, &mut rng);
        inputs.next = Tensor::uniform(t, 0.0, 1.0, &mut rng);
        let b2 = f0.forward(&inputs, BnMode::Eval).map_err(e2s)?;
        ensure(a == b2, || format!("case {case}: F0 output depends on neighbours"))?;
    }
    Ok("50 inputs: ones identity, zeros annihilate, F0 neighbour-invariant".into())
}

// ---------------------------------------------------------------- 3

/// Dense-loop edge band, written without the library's helpers.
mod oracle {
    pub fn mirror(i: isize, n: usize) -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    }

    pub fn kernel(sigma: f64, size: usize) -> Vec<f64> {
        let r = (size / 2) as isize;
        let mut k = Vec::new();
        for d in -r..=r {
            k.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let mut total = 0.0;
        for v in &k {
            total += v;
        }
        k.iter().map(|v| v / total).collect()
    }

    pub fn blur(img: &[Vec<f64>], k: &[f64]) -> Vec<Vec<f64>> {
        let (h, w) = (img.len(), img[0].len());
        let r = (k.len() / 2) as isize;
        let mut rows = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for j in 0..k.len() {
                    acc += k[j] * img[y][mirror(x as isize + j as isize - r, w)];
                }
                rows[y][x] = acc;
            }
        }
        let mut out = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for j in 0..k.len() {
                    acc += k[j] * rows[mirror(y as isize + j as isize - r, h)][x];
                }
                out[y][x] = acc;
            }
        }
        out
    }

    pub fn canny(img: &[Vec<f64>], low: f64, high: f64) -> Vec<Vec<bool>> {
        let (h, w) = (img.len(), img[0].len());
        let mut min = f64::INFINITY;
        for row in img {
            for &v in row {
                min = min.min(v);
            }
        }
        let shifted: Vec<Vec<f64>> = img.iter().map(|r| r.iter().map(|v| v - min).collect()).collect();
        let s = blur(&shifted, &kernel(1.0, 5));
        let p = |y: isize, x: isize| s[mirror(y, h)][mirror(x, w)];
        let mut gx = vec![vec![0.0; w]; h];
        let mut gy = vec![vec![0.0; w]; h];
        let mut mag = vec![vec![0.0; w]; h];
        let mut max = 0.0f64;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (yu, xu) = (y as usize, x as usize);
                gx[yu][xu] = (p(y - 1, x + 1) + 2.0 * p(y, x + 1) + p(y + 1, x + 1))
                    - (p(y - 1, x - 1) + 2.0 * p(y, x - 1) + p(y + 1, x - 1));
                gy[yu][xu] = (p(y + 1, x - 1) + 2.0 * p(y + 1, x) + p(y + 1, x + 1))
                    - (p(y - 1, x - 1) + 2.0 * p(y - 1, x) + p(y - 1, x + 1));
                mag[yu][xu] = gx[yu][xu].hypot(gy[yu][xu]);
                max = max.max(mag[yu][xu]);
            }
        }
        let mut edges = vec![vec![false; w]; h];
        if max <= 0.0 {
            return edges;
        }
        let tie = 1e-9 * max;
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                mag[y as usize][x as usize]
            }
        };
        let mut thin = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let m = mag[y][x];
                if m <= tie {
                    continue;
                }
                let a = gy[y][x].atan2(gx[y][x]).to_degrees().rem_euclid(180.0);
                let (dy, dx) = if a < 22.5 || a >= 157.5 {
                    (0, 1)
                } else if a < 67.5 {
                    (1, 1)
                } else if a < 112.5 {
                    (1, 0)
                } else {
                    (1, -1)
                };
                let (yi, xi) = (y as isize, x as isize);
                if m > at(yi + dy, xi + dx) + tie && m >= at(yi - dy, xi - dx) - tie {
                    thin[y][x] = m;
                }
            }
        }
        // Hysteresis as a fixed point: grow strong edges through weak ones
        // until nothing changes.
        for y in 0..h {
            for x in 0..w {
                edges[y][x] = thin[y][x] >= high * max;
            }
        }
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if edges[y][x] || thin[y][x] < low * max {
                        continue;
                    }
                    let mut touch = false;
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            touch |= edges[yy][xx];
                        }
                    }
                    if touch {
                        edges[y][x] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                return edges;
            }
        }
    }

    pub fn edge_band(mask: &[Vec<bool>], sigma: f64, size: usize, low: f64, high: f64, thr: f64) -> Vec<Vec<bool>> {
        let img: Vec<Vec<f64>> = mask
            .iter()
            .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        let e = canny(&img, low, high);
        let ef: Vec<Vec<f64>> = e
            .iter()
            .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        let spread = blur(&ef, &kernel(sigma, size));
        let mut out = vec![vec![false; mask[0].len()]; mask.len()];
        for y in 0..mask.len() {
            for x in 0..mask[0].len() {
                out[y][x] = spread[y][x] > thr && mask[y][x];
            }
        }
        out
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; w]; h];
    for _ in 0..rng.gen_range(0..4) {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ry, rx) = (rng.gen_range(2.0..16.0), rng.gen_range(2.0..16.0));
        for (y, row) in m.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                *v |= dy * dy + dx * dx <= 1.0;
            }
        }
    }
    if rng.gen_bool(0.5) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(1..20)).min(h), (x0 + rng.gen_range(1..20)).min(w));
        for row in &mut m[y0..y1] {
            for v in &mut row[x0..x1] {
                *v = true;
            }
        }
    }
    for _ in 0..rng.gen_range(0..10) {
        m[rng.gen_range(0..h)][rng.gen_range(0..w)] ^= true;
    }
    m
}

fn edge_oracle() -> Check {
    let p = EdgeGtParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut band_pixels = 0;
    for case in 0..20 {
        let m = random_mask(&mut rng, 64, 64);
        let mask = BinaryMask::from_fn(64, 64, |y, x| m[y][x]);
        let got = build_edge_gt(&mask, &p).map_err(e2s)?;
        let want = oracle::edge_band(&m, p.sigma, p.kernel, p.canny_low, p.canny_high, p.band_threshold);
        for y in 0..64 {
            for x in 0..64 {
                ensure(got.get(y, x) == want[y][x], || format!("case {case}: differs at ({y},{x})"))?;
            }
        }
        ensure(got.is_subset_of(&mask), || format!("case {case}: band leaves the mask"))?;
        band_pixels += got.count();
    }
    Ok(format!("20 masks bit-exact, band within mask ({band_pixels} band pixels)"))
}

// ---------------------------------------------------------------- 4

fn mean_bce(p: &[f32], t: &[f32]) -> f64 {
    let mut s = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        s -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
    }
    s / p.len() as f64
}

fn soft_dice(p: &[f32], t: &[f32], smooth: f64) -> f64 {
    let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in p.iter().zip(t) {
        i += p as f64 * t as f64;
        sp += p as f64;
        st += t as f64;
    }
    1.0 - (2.0 * i + smooth) / (sp + st + smooth)
}

fn binary(s: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let d = (0..s.numel()).map(|_| rng.gen_range(0..2) as f32).collect();
    Tensor::new(s, d).unwrap()
}

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    let cfg = NetworkConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    let mut worst_graph = 0.0f64;
    let model = Model::new(tiny_network(0)).map_err(e2s)?;
    let mut fg = model.build(2, 16, BnMode::Train, Some(&w)).map_err(e2s)?;
    for case in 0..100 {
        let n = rng.gen_range(1..4);
        let t = 4 * rng.gen_range(1..5);
        let s = |k: usize| Shape::new(n, 1, t / k, t / k);
        let gt = binary(s(1), &mut rng);
        let half = Tensor::full(s(1), 0.5);
        let b = bce(&half, &gt).map_err(e2s)?;
        ensure((b - std::f64::consts::LN_2).abs() <= 1e-6, || format!("case {case}: bce(0.5) = {b}"))?;
        let d = dice_loss(&gt, &gt, w.dice_smooth).map_err(e2s)?;
        ensure(d <= 1e-5, || format!("case {case}: dice(identical) = {d}"))?;

        let out = asfseg::network::NetworkOutputs {
            mask: Tensor::uniform(s(1), 0.0, 1.0, &mut rng),
            edge: Some(Tensor::uniform(s(1), 0.0, 1.0, &mut rng)),
            scales: Some([
                Tensor::uniform(s(1), 0.0, 1.0, &mut rng),
                Tensor::uniform(s(2), 0.0, 1.0, &mut rng),
                Tensor::uniform(s(4), 0.0, 1.0, &mut rng),
            ]),
        };
        let targets = TargetTensors {
            mask: gt.clone(),
            edge: binary(s(1), &mut rng),
            scales: [gt, binary(s(2), &mut rng), binary(s(4), &mut rng)],
        };
        let r = loss_total(&out, &targets, &w, &cfg).map_err(e2s)?;
        let bin = loss_bin(&out.mask, &targets.mask, &w).map_err(e2s)?;
        let edge = loss_edge(out.edge.as_ref(), &targets.edge, &w).map_err(e2s)?;
        let ms = loss_ms(out.scales.as_ref().unwrap(), &targets.scales, &w).map_err(e2s)?;
        ensure(r.total == bin + edge + ms && r.total == r.bin + r.edge + r.ms, || {
            format!("case {case}: total {} != sum {}", r.total, bin + edge + ms)
        })?;
        // Independent formulas for each term.
        let (m, e) = (out.mask.data(), out.edge.as_ref().unwrap().data());
        let ob = mean_bce(m, targets.mask.data()) + soft_dice(m, targets.mask.data(), w.dice_smooth);
        let oe = mean_bce(e, targets.edge.data()) + soft_dice(e, targets.edge.data(), w.dice_smooth);
        let sc = out.scales.as_ref().unwrap();
        let om: f64 = (0..3).map(|k| mean_bce(sc[k].data(), targets.scales[k].data())).sum();
        ensure(close(bin, ob) && close(edge, oe) && close(ms, om), || {
            format!("case {case}: terms ({bin}, {edge}, {ms}) vs oracle ({ob}, {oe}, {om})")
        })?;

        // The differentiable loss graph agrees with the reported total.
        if case % 10 == 0 {
            let sh = Shape::new(2, 1, 16, 16);
            let inputs = SliceInputs {
                prev: Tensor::uniform(sh, 0.0, 1.0, &mut rng),
                target: Tensor::uniform(sh, 0.0, 1.0, &mut rng),
                next: Tensor::uniform(sh, 0.0, 1.0, &mut rng),
            };
            let gm = binary(sh, &mut rng);
            let tg = TargetTensors {
                mask: gm.clone(),
                edge: binary(sh, &mut rng),
                scales: [gm, binary(Shape::new(2, 1, 8, 8), &mut rng), binary(Shape::new(2, 1, 4, 4), &mut rng)],
            };
            let bind = model.bindings(&fg, &inputs, Some(&tg)).map_err(e2s)?;
            let lv = fg.graph.evaluate(fg.loss.unwrap(), &bind).map_err(e2s)?.item() as f64;
            let outs = Model::read_outputs(&fg).map_err(e2s)?;
            let rep = loss_total(&outs, &tg, &w, &model.config).map_err(e2s)?;
            let rel = (lv - rep.total).abs() / rep.total;
            worst_graph = worst_graph.max(rel);
            ensure(rel <= 1e-5, || format!("case {case}: graph loss {lv} vs {}", rep.total))?;
        }
    }
    Ok(format!("100 bundles; graph loss within {worst_graph:.1e} of the term sum"))
}

// ---------------------------------------------------------------- 5

fn round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [
        [1, 32, 32],
        [1, 17, 23],
        [2, 16, 16],
        [3, 30, 21],
        [4, 8, 40],
        [5, 33, 33],
        [2, 64, 48],
        [1, 5, 7],
        [6, 12, 20],
        [3, 41, 19],
    ];
    for (case, &[d, h, w]) in dims.iter().enumerate() {
        let n = d * h * w;
        let img = Volume::new(
            [d, h, w],
            [1.0, 0.7, 0.7],
            Dtype::F32,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .map_err(e2s)?;
        let mask = Volume::new(
            [d, h, w],
            [1.0, 0.7, 0.7],
            Dtype::U8,
            (0..n).map(|_| rng.gen_range(0..2) as f32).collect(),
        )
        .map_err(e2s)?;
        // Four tiles per side, and each tile halves twice for the scale masks.
        let edge = round_up(h.max(w), 16);
        let pi = pad_volume(&img, edge, edge).map_err(e2s)?;
        let pm = pad_volume(&mask, edge, edge).map_err(e2s)?;
        let triplets = make_triplets(&pi, &pm, &EdgeGtParams::default()).map_err(e2s)?;
        ensure(triplets.len() == d, || format!("case {case}: {} triplets", triplets.len()))?;
        let mut slices = Vec::new();
        let mut masks = Vec::new();
        for (z, t) in triplets.iter().enumerate() {
            ensure(t.prev == pi.slice(z.saturating_sub(1)) && t.next == pi.slice((z + 1).min(d - 1)), || {
                format!("case {case}: wrong neighbours at slice {z}")
            })?;
            let batch = tile_triplet(t).map_err(e2s)?;
            ensure(batch.tiles.len() == 16, || format!("case {case}: {} tiles", batch.tiles.len()))?;
            let targets: Vec<FloatMap> = batch.tiles.iter().map(|t| t.target.clone()).collect();
            slices.push(assemble_tiles(&targets).map_err(e2s)?);
            let gts: Vec<BinaryMask> = batch.tiles.iter().map(|t| t.gt.g.clone()).collect();
            masks.push(assemble_mask_tiles(&gts).map_err(e2s)?);
        }
        let back = crop_volume(&Volume::from_slices(&slices, img.spacing()).map_err(e2s)?, h, w).map_err(e2s)?;
        let back_mask = crop_volume(&assemble_slices(&masks, mask.spacing()).map_err(e2s)?, h, w).map_err(e2s)?;
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(back.dims() == img.dims() && bits(&back) == bits(&img), || format!("case {case}: image differs"))?;
        ensure(back_mask == mask, || format!("case {case}: mask differs"))?;
    }
    Ok("10 volumes bit-identical (D=1 and padded/cropped dims included)".into())
}

// ---------------------------------------------------------------- 6

fn metric_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let (pp, pg) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let p = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(pp));
        let g = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(pg));
        let m = metrics(&confusion(&p, &g).map_err(e2s)?);
        let want = 2.0 * m.iou / (1.0 + m.iou);
        ensure((m.dsc - want).abs() <= 1e-12, || format!("case {case}: dsc {} vs {want}", m.dsc))?;
    }

    let c = ConfusionCounts { tp: 8, fp: 4, fn_: 4, tn: 48 };
    let m = metrics(&c);
    ensure((m.iou, m.dsc, m.sen, m.acc) == (0.5, 2.0 / 3.0, 2.0 / 3.0, 0.875), || format!("constructed case gave {m:?}"))?;

    // Slice 0 and 2 hold a nodule; slice 1 is empty ground truth with a
    // false positive that must not affect the aggregate.
    let gt = Volume::new([3, 2, 2], [1.0; 3], Dtype::U8, vec![1., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0.]).map_err(e2s)?;
    let pr = Volume::new([3, 2, 2], [1.0; 3], Dtype::F32, vec![1., 0., 0., 0., 1., 1., 1., 1., 1., 0., 0., 0.]).map_err(e2s)?;
    let r = evaluate_volume(&pr, &gt, 0.5).map_err(e2s)?;
    let agg = r.aggregate.ok_or("no aggregate")?;
    ensure(r.nodule_slices == 2 && (agg.dsc - (2.0 / 3.0 + 1.0) / 2.0).abs() <= 1e-12, || {
        format!("aggregate {agg:?} over {} slices", r.nodule_slices)
    })?;
    Ok("DSC = 2 IOU/(1+IOU) on 100 pairs; 8/4/4/48 exact; empty slices ignored".into())
}

// ---------------------------------------------------------------- 7

fn overfit() -> Check {
    let fixture = overfit_fixture(1).map_err(e2s)?;
    let refs: Vec<_> = fixture.iter().collect();
    let mut dscs = Vec::new();
    let mut times = Vec::new();
    for seed in 0..3u64 {
        let t0 = Instant::now();
        let model = Model::new(NetworkConfig { seed, ..NetworkConfig::default() }).map_err(e2s)?;
        let mut trainer = Trainer::new(
            model,
            AdamState::default(),
            AdamConfig::default(),
            LossWeights::default(),
            4,
            64,
        )
        .map_err(e2s)?;
        trainer.train(&refs, seed, 300, &mut |_, _, _| Ok(())).map_err(e2s)?;
        let report = evaluate_samples(&trainer.model, &refs, 0.5).map_err(e2s)?;
        let dsc = report.aggregate.ok_or("fixture has no nodule tile")?.dsc;
        let elapsed = t0.elapsed();
        ensure(elapsed < Duration::from_secs(300), || format!("seed {seed} took {elapsed:.0?}"))?;
        dscs.push(dsc);
        times.push(elapsed.as_secs_f64());
    }
    let mut sorted = dscs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    ensure(median >= 0.95, || format!("median DSC {median:.3} (per seed {dscs:.3?})"))?;
    Ok(format!(
        "median DSC {median:.3} (per seed {:.3?}); {:.0?} s per run",
        dscs,
        times.iter().map(|t| t.round()).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- 8

fn small_run_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.out_dir = root.join("run");
    cfg.network = tiny_network(11);
    cfg.schedule.steps = 6;
    cfg.schedule.batch_size = 4;
    cfg.schedule.checkpoint_interval = 3;
    cfg
}

fn asfseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_asfseg"))
        .args(args)
        .env_remove("ASFSEG_SEED")
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("asfseg {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline_once(root: &Path) -> Result<(String, String), String> {
    let cfg = small_run_config(root);
    let cfg_path = root.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(e2s)?;
    let c = cfg_path.to_str().unwrap();
    asfseg(&["prepare", "--config", c])?;
    asfseg(&["train", "--config", c, "--quiet"])?;
    let manifest = asfseg::harness::Manifest::load(&cfg.paths.data_dir).map_err(e2s)?;
    let vol = manifest.volumes.last().ok_or("no volumes")?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    asfseg(&[
        "predict",
        "--ckpt",
        &s(&cfg.paths.out_dir.join("model.ckpt")),
        "--volume",
        &s(&cfg.paths.data_dir.join(&vol.image)),
        "--out",
        &s(&root.join("pred")),
    ])?;
    asfseg(&[
        "evaluate",
        "--pred",
        &s(&root.join("pred/prob")),
        "--gt",
        &s(&cfg.paths.data_dir.join(&vol.mask)),
        "--out",
        &s(&root.join("eval")),
    ])?;
    let json = std::fs::read_to_string(root.join("eval/eval.json")).map_err(e2s)?;
    let table = std::fs::read_to_string(root.join("eval/eval.txt")).map_err(e2s)?;
    Ok((json, table))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let ra = pipeline_once(a.path())?;
    let rb = pipeline_once(b.path())?;
    ensure(ra == rb, || "eval reports differ between runs".into())?;
    let ck = |d: &Path| std::fs::read(d.join("run/model.ckpt")).unwrap();
    ensure(ck(a.path()) == ck(b.path()), || "checkpoints differ between runs".into())?;
    Ok(format!("two CLI runs gave identical eval.json ({} bytes) and checkpoints", ra.0.len()))
}

// ---------------------------------------------------------------- 9

fn ablation() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = small_run_config(dir.path());
    cfg.schedule.steps = 3;
    cfg.schedule.checkpoint_interval = 0;
    cmd_prepare(&cfg).map_err(e2s)?;
    let base = dir.path().join("base.toml");
    std::fs::write(&base, cfg.to_toml()).map_err(e2s)?;
    let spec = AblationSpec {
        base_config: base,
        seeds: vec![0, 1],
        variants: Variant::ALL.to_vec(),
        out_dir: dir.path().join("ablation"),
    };
    let report = cmd_ablation(&spec, &mut |_| {}).map_err(e2s)?;
    let names: Vec<Variant> = report.rows.iter().map(|r| r.variant).collect();
    ensure(names == Variant::ALL.to_vec(), || format!("rows {names:?}"))?;
    let t2 = report.rows.iter().filter(|r| r.table == 2).count();
    let t3 = report.rows.iter().filter(|r| r.table == 3).count();
    ensure((t2, t3) == (5, 4), || format!("table sizes {t2}/{t3}"))?;
    ensure(report.rows.iter().all(|r| r.dsc_per_seed.len() == 2), || "missing seeds".into())?;
    let table = report.to_table();
    ensure(table.contains("Components") && table.contains("Fusion"), || format!("table:\n{table}"))?;
    ensure(spec.out_dir.join("ablation.json").exists() && spec.out_dir.join("ablation.txt").exists(), || {
        "report files missing".into()
    })?;
    Ok("M0..M4 and F0..F3 rows for 2 seeds; ordering reported, not asserted".into())
}

fn main() {
    // Cargo passes libtest flags such as `--quiet`; a bare filter argument
    // selects criteria by number.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "gradient correctness", gradients),
        (2, "fusion algebra", fusion_algebra),
        (3, "edge ground-truth oracle", edge_oracle),
        (4, "loss identities", loss_identities),
        (5, "pipeline round-trip", round_trip),
        (6, "metric correctness", metric_checks),
        (7, "overfit smoke test", overfit),
        (8, "determinism", determinism),
        (9, "ablation harness", ablation),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
