//! Synthetic paired LR/HR scenes.
//!
//! A scene is an HR mosaic of `grid x grid` square tiles over a smooth
//! low-frequency background. Objects fill single tiles with a concept-specific
//! period-2 texture and a small concept-specific mean shift. The LR overview
//! is never stored: [`downsample_lr`] box-averages the mosaic by `grid`, which
//! cancels the period-2 texture exactly and leaves only the mean shift.

use numkernel::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CxsError, Result};

/// Side of the LR patch encoded into one LR token.
pub const LR_PATCH_PX: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Tiles per side (`P = grid^2`); also the HR-to-LR downsample factor.
    pub grid: usize,
    /// Tile side in HR pixels; equals the LR image side.
    pub tile_px: usize,
    pub channels: usize,
    pub concepts: usize,
    /// Inclusive range of objects placed per scene.
    pub objects_min: usize,
    pub objects_max: usize,
    pub hf_amplitude: f64,
    /// Maximum background frequency, in cycles across the mosaic.
    pub background_smoothness: f64,
    pub background_amplitude: f64,
    /// Largest per-concept mean shift; shifts are spread over
    /// `[mean_shift / 2, mean_shift]`.
    pub mean_shift: f64,
    /// Seed of the concept textures and shifts, shared by every scene.
    pub appearance_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid: 10,
            tile_px: 20,
            channels: 1,
            concepts: 8,
            objects_min: 1,
            objects_max: 4,
            hf_amplitude: 1.0,
            background_smoothness: 1.5,
            background_amplitude: 0.5,
            mean_shift: 0.6,
            appearance_seed: 0xC0FFEE,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CxsError::InvalidSpec(m));
        if self.grid < 2 {
            return bad(format!("grid must be >= 2, got {}", self.grid));
        }
        if self.tile_px % self.grid != 0 {
            return bad(format!(
                "grid {} must divide tile_px {} (LR pixels per tile)",
                self.grid, self.tile_px
            ));
        }
        if self.tile_px % 2 != 0 {
            return bad(format!("tile_px {} must be even (2x2 tokens per tile)", self.tile_px));
        }
        if self.tile_px % LR_PATCH_PX != 0 {
            return bad(format!("tile_px {} must be a multiple of {LR_PATCH_PX}", self.tile_px));
        }
        if self.channels != 1 {
            return bad(format!("only single-channel scenes are generated, got {}", self.channels));
        }
        for (name, v) in [
            ("hf_amplitude", self.hf_amplitude),
            ("background_smoothness", self.background_smoothness),
            ("background_amplitude", self.background_amplitude),
            ("mean_shift", self.mean_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.concepts == 0 || self.concepts > 64 {
            return bad(format!("concepts must be in 1..=64, got {}", self.concepts));
        }
        if self.objects_min > self.objects_max || self.objects_max > self.tiles() {
            return bad(format!(
                "objects range {}..={} invalid for {} tiles",
                self.objects_min,
                self.objects_max,
                self.tiles()
            ));
        }
        Ok(())
    }

    pub fn tiles(&self) -> usize {
        self.grid * self.grid
    }

    pub fn mosaic_px(&self) -> usize {
        self.grid * self.tile_px
    }

    pub fn lr_px(&self) -> usize {
        self.tile_px
    }

    /// LR pixels along one side of a tile footprint.
    pub fn lr_px_per_tile(&self) -> usize {
        self.tile_px / self.grid
    }

    /// Side of the dense target token grid (two tokens per tile side).
    pub fn token_side(&self) -> usize {
        2 * self.grid
    }

    pub fn lr_token_side(&self) -> usize {
        self.lr_px() / LR_PATCH_PX
    }

    pub fn appearance(&self) -> ConceptAppearance {
        ConceptAppearance::new(self)
    }
}

/// Per-concept texture motif and mean shift, fixed by `appearance_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAppearance {
    /// Zero-mean 2x2 motifs `[c][dy * 2 + dx]`, RMS equal to `hf_amplitude`.
    pub motifs: Vec<[f64; 4]>,
    pub shifts: Vec<f64>,
}

impl ConceptAppearance {
    fn new(spec: &SceneSpec) -> Self {
        let mut rng = RngStream::new(spec.appearance_seed, 0);
        let c = spec.concepts;
        let mut motifs: Vec<[f64; 4]> = Vec::with_capacity(c);
        let mut attempts = 0usize;
        while motifs.len() < c {
            attempts += 1;
            let mut m = [0.0; 4];
            m.iter_mut().for_each(|v| *v = rng.standard_normal());
            let mean = m.iter().sum::<f64>() / 4.0;
            m.iter_mut().for_each(|v| *v -= mean);
            let rms = (m.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
            m.iter_mut().for_each(|v| *v *= spec.hf_amplitude / rms);
            // zero-mean 2x2 motifs live in three dimensions, so the
            // separation demand is relaxed once it becomes hard to meet
            let limit = if attempts < 10_000 { 0.6 } else { 0.9 };
            let distinct = spec.hf_amplitude == 0.0 || motifs.iter().all(|o| {
                let dot: f64 = o.iter().zip(&m).map(|(a, b)| a * b).sum();
                dot / (4.0 * spec.hf_amplitude * spec.hf_amplitude) < limit
            });
            if distinct {
                motifs.push(m);
            }
        }
        let order = rng.permutation(c);
        let shifts = order
            .iter()
            .map(|&rank| {
                let frac = if c > 1 { rank as f64 / (c - 1) as f64 } else { 1.0 };
                spec.mean_shift * (0.5 + 0.5 * frac)
            })
            .collect();
        Self { motifs, shifts }
    }

    /// The concept whose motif best explains the tile's period-2 residual,
    /// or `None` when the tile carries no texture.
    pub fn classify_tile(&self, tile: &Tensor) -> Option<usize> {
        let side = tile.shape()[1];
        let d = tile.data();
        let mut phase = [0.0; 4];
        for y in 0..side {
            for x in 0..side {
                phase[(y % 2) * 2 + x % 2] += d[y * side + x];
            }
        }
        let n = (side * side / 4) as f64;
        phase.iter_mut().for_each(|v| *v /= n);
        let mean = phase.iter().sum::<f64>() / 4.0;
        phase.iter_mut().for_each(|v| *v -= mean);
        let energy = phase.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let amp2 = self.motifs.first().map_or(0.0, |m| m.iter().map(|v| v * v).sum::<f64>() / 4.0);
        if energy < 0.25 * amp2 {
            return None;
        }
        self.motifs
            .iter()
            .enumerate()
            .map(|(c, m)| (c, m.iter().zip(&phase).map(|(a, b)| a * b).sum::<f64>()))
            .fold(None, |best: Option<(usize, f64)>, (c, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((c, s)),
            })
            .map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    /// `[channels, grid * tile_px, grid * tile_px]`, values representable in f32.
    pub hr_mosaic: Tensor,
    /// Bit `c` set when concept `c` is present.
    pub labels: u64,
}

impl Scene {
    pub fn label_list(&self) -> Vec<usize> {
        (0..64).filter(|c| self.labels >> c & 1 == 1).collect()
    }

    pub fn has_label(&self, concept: usize) -> bool {
        concept < 64 && self.labels >> concept & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedObject {
    pub tile: usize,
    pub concept: usize,
}

/// Generate one scene and the object layout behind its labels.
///
/// Raw draws, in order: background offset (1 normal), four background waves
/// (2 uniform frequencies, 1 uniform phase, 1 uniform amplitude each), object
/// count (1), tile permutation (`P - 1`), one concept per object.
pub fn generate_scene_with_layout(
    spec: &SceneSpec,
    appearance: &ConceptAppearance,
    scene_id: u64,
    rng: &mut RngStream,
) -> Result<(Scene, Vec<PlacedObject>)> {
    spec.validate()?;
    let side = spec.mosaic_px();
    let amp = spec.background_amplitude;
    let offset = 0.5 * amp * rng.standard_normal();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fx = rng.uniform(-spec.background_smoothness, spec.background_smoothness);
            let fy = rng.uniform(-spec.background_smoothness, spec.background_smoothness);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let a = 0.5 * amp * rng.uniform(0.5, 1.0);
            (fx, fy, phase, a)
        })
        .collect();
    let mut data = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
            data[y * side + x] = offset
                + waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos())
                    .sum::<f64>();
        }
    }

    let span = spec.objects_max - spec.objects_min + 1;
    let count = spec.objects_min + rng.below(span);
    let tiles = rng.permutation(spec.tiles());
    let mut layout: Vec<PlacedObject> = tiles[..count]
        .iter()
        .map(|&tile| PlacedObject {
            tile,
            concept: rng.below(spec.concepts),
        })
        .collect();
    layout.sort_by_key(|o| o.tile);

    let mut labels = 0u64;
    for obj in &layout {
        labels |= 1 << obj.concept;
        let (ty, tx) = (obj.tile / spec.grid, obj.tile % spec.grid);
        let motif = &appearance.motifs[obj.concept];
        let shift = appearance.shifts[obj.concept];
        for y in ty * spec.tile_px..(ty + 1) * spec.tile_px {
            for x in tx * spec.tile_px..(tx + 1) * spec.tile_px {
                data[y * side + x] += shift + motif[(y % 2) * 2 + x % 2];
            }
        }
    }
    // The dataset file stores f32; generate on that lattice so files round-trip exactly.
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let hr_mosaic = Tensor::new([1, side, side], data)?;
    Ok((
        Scene {
            scene_id,
            hr_mosaic,
            labels,
        },
        layout,
    ))
}

pub fn generate_scene(
    spec: &SceneSpec,
    appearance: &ConceptAppearance,
    scene_id: u64,
    rng: &mut RngStream,
) -> Result<Scene> {
    generate_scene_with_layout(spec, appearance, scene_id, rng).map(|(s, _)| s)
}

/// Generate `count` scenes with ids `first_id..`, each from its own stream
/// `(seed, scene_id)`.
pub fn generate_scenes(spec: &SceneSpec, seed: u64, first_id: u64, count: usize) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    let appearance = spec.appearance();
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            generate_scene(spec, &appearance, id, &mut RngStream::new(seed, id))
        })
        .collect()
}

fn dims3(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(CxsError::Geometry(format!("{op}: expected [C, H, W], got {:?}", t.shape()))),
    }
}

/// Box-average reduction: each output pixel is the mean of its
/// `factor x factor` input block.
pub fn downsample_lr(hr: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = dims3("downsample_lr", hr)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(CxsError::Geometry(format!(
            "downsample_lr: {h}x{w} not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = hr.data();
    let mut out = vec![0.0; c * oh * ow];
    let area = (factor * factor) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        s += d[(ch * h + y) * w + x];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = s / area;
            }
        }
    }
    Ok(Tensor::new([c, oh, ow], out)?)
}

/// Split into `grid^2` tiles in row-major tile order.
pub fn tessellate(hr: &Tensor, grid: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = dims3("tessellate", hr)?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(CxsError::Geometry(format!(
            "tessellate: {h}x{w} not divisible by grid {grid}"
        )));
    }
    let (th, tw) = (h / grid, w / grid);
    let d = hr.data();
    (0..grid * grid)
        .map(|p| {
            let (ty, tx) = (p / grid, p % grid);
            let mut out = Vec::with_capacity(c * th * tw);
            for ch in 0..c {
                for y in ty * th..(ty + 1) * th {
                    let row = (ch * h + y) * w;
                    out.extend_from_slice(&d[row + tx * tw..row + (tx + 1) * tw]);
                }
            }
            Ok(Tensor::new([c, th, tw], out)?)
        })
        .collect()
}

/// Inverse of [`tessellate`].
pub fn stitch(tiles: &[Tensor], grid: usize) -> Result<Tensor> {
    if tiles.len() != grid * grid || tiles.is_empty() {
        return Err(CxsError::Geometry(format!(
            "stitch: {} tiles for grid {grid}",
            tiles.len()
        )));
    }
    let (c, th, tw) = dims3("stitch", &tiles[0])?;
    let (h, w) = (th * grid, tw * grid);
    let mut out = vec![0.0; c * h * w];
    for (p, tile) in tiles.iter().enumerate() {
        if tile.shape() != [c, th, tw] {
            return Err(CxsError::Geometry(format!("stitch: tile {p} has shape {:?}", tile.shape())));
        }
        let (ty, tx) = (p / grid, p % grid);
        let d = tile.data();
        for ch in 0..c {
            for y in 0..th {
                let dst = (ch * h + ty * th + y) * w + tx * tw;
                out[dst..dst + tw].copy_from_slice(&d[(ch * th + y) * tw..(ch * th + y + 1) * tw]);
            }
        }
    }
    Ok(Tensor::new([c, h, w], out)?)
}

/// Mean squared first difference (horizontal and vertical) over a `[C, H, W]` image.
pub fn high_frequency_energy(img: &Tensor) -> Result<f64> {
    let (c, h, w) = dims3("high_frequency_energy", img)?;
    let d = img.data();
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = d[(ch * h + y) * w + x];
                if x + 1 < w {
                    sum += (d[(ch * h + y) * w + x + 1] - v).powi(2);
                    n += 1;
                }
                if y + 1 < h {
                    sum += (d[(ch * h + y + 1) * w + x] - v).powi(2);
                    n += 1;
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// The `lr_px_per_tile`-square LR footprint of tile `p`.
pub fn lr_footprint(lr: &Tensor, grid: usize, p: usize) -> Result<Tensor> {
    tessellate(lr, grid).map(|mut t| t.swap_remove(p))
}
