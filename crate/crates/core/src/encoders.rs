//! Frozen random feature extractors.
//!
//! `Ψ` maps non-overlapping `tile_px / 2` square HR patches to `d`-dim tokens
//! (`tanh(W x + b)`), so each tile yields 2x2 tokens and a mosaic yields a
//! `2G x 2G` grid. The per-tile encoder `ψ_h` is `Ψ` applied to one tile.
//! `ψ_g` maps 4x4 LR patches the same way. Concept "text" embeddings are unit
//! vectors with bounded pairwise similarity, and the visual projection into
//! their space is a ridge fit that sends each concept's prototype tile
//! features to its embedding and bare background to the origin.

use nalgebra::DMatrix;
use numkernel::{RngStream, Tensor};

use crate::error::{CxsError, Result};
use crate::scene::{SceneSpec, LR_PATCH_PX};

const MAX_CONCEPT_COSINE: f64 = 0.5;
const RIDGE: f64 = 1e-3;
const PROTOTYPE_LEVELS: [f64; 7] = [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEncoders {
    pub dim: usize,
    pub text_dim: usize,
    pub seed: u64,
    /// Side of one target patch (`tile_px / 2`).
    pub patch_px: usize,
    /// `[patch_px^2, d]`, shared by `Ψ` and `ψ_h`.
    pub target_patch_weights: Tensor,
    pub target_bias: Tensor,
    /// `[16, d]`.
    pub lr_patch_weights: Tensor,
    pub lr_bias: Tensor,
    /// `[C, d_t]`, unit rows.
    pub concept_table: Tensor,
    /// `[d, d_t]`.
    pub visual_projection: Tensor,
}

fn gaussian(rng: &mut RngStream, shape: [usize; 2], std: f64) -> Tensor {
    let data = (0..shape[0] * shape[1]).map(|_| std * rng.standard_normal()).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn unit_rows(t: &mut Tensor) {
    let m = t.last_dim();
    for row in t.data_mut().chunks_mut(m) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Mean over all rows of a token grid viewed as `[n, d]`.
pub fn mean_token(tokens: &Tensor) -> Vec<f64> {
    let d = tokens.last_dim();
    let rows = tokens.numel() / d;
    let mut out = vec![0.0; d];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < numkernel::COSINE_EPS || nb < numkernel::COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl OracleEncoders {
    pub fn new(spec: &SceneSpec, dim: usize, text_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dim == 0 || text_dim == 0 {
            return Err(CxsError::InvalidSpec("encoder dimensions must be positive".into()));
        }
        let patch_px = spec.tile_px / 2;
        let patch_len = patch_px * patch_px;
        let lr_len = LR_PATCH_PX * LR_PATCH_PX;
        let mut rng = RngStream::new(seed, 0x0E4C);
        let target_patch_weights = gaussian(&mut rng, [patch_len, dim], (1.0 / patch_len as f64).sqrt());
        let target_bias = gaussian(&mut rng, [1, dim], 0.5).reshape([dim])?;
        let lr_patch_weights = gaussian(&mut rng, [lr_len, dim], (1.0 / lr_len as f64).sqrt());
        let lr_bias = gaussian(&mut rng, [1, dim], 0.5).reshape([dim])?;

        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.concepts);
        let mut attempts = 0usize;
        while rows.len() < spec.concepts {
            attempts += 1;
            if attempts > 100_000 {
                return Err(CxsError::InvalidSpec(format!(
                    "cannot place {} concept vectors in {text_dim} dims with cosine < {MAX_CONCEPT_COSINE}",
                    spec.concepts
                )));
            }
            let mut v = gaussian(&mut rng, [1, text_dim], 1.0);
            unit_rows(&mut v);
            let v = v.into_data();
            if rows.iter().all(|r| cosine(r, &v) < MAX_CONCEPT_COSINE) {
                rows.push(v);
            }
        }
        let concept_table = Tensor::new([spec.concepts, text_dim], rows.concat())?;

        let mut enc = Self {
            dim,
            text_dim,
            seed,
            patch_px,
            target_patch_weights,
            target_bias,
            lr_patch_weights,
            lr_bias,
            concept_table,
            visual_projection: Tensor::zeros([dim, text_dim]),
        };
        enc.visual_projection = enc.fit_projection(spec)?;
        Ok(enc)
    }

    fn fit_projection(&self, spec: &SceneSpec) -> Result<Tensor> {
        let app = spec.appearance();
        let side = spec.tile_px;
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<Vec<f64>> = Vec::new();
        for &level in &PROTOTYPE_LEVELS {
            let flat = Tensor::full([1, side, side], level);
            xs.push(mean_token(&self.encode_tile(&flat)?));
            ys.push(vec![0.0; self.text_dim]);
            for c in 0..spec.concepts {
                let mut tile = flat.clone();
                for y in 0..side {
                    for x in 0..side {
                        tile.data_mut()[y * side + x] += app.shifts[c] + app.motifs[c][(y % 2) * 2 + x % 2];
                    }
                }
                xs.push(mean_token(&self.encode_tile(&tile)?));
                ys.push(self.concept_table.row(c).to_vec());
            }
        }
        let x = DMatrix::from_row_iterator(xs.len(), self.dim, xs.into_iter().flatten());
        let y = DMatrix::from_row_iterator(ys.len(), self.text_dim, ys.into_iter().flatten());
        let gram = x.transpose() * &x + DMatrix::identity(self.dim, self.dim) * RIDGE;
        let w = gram
            .cholesky()
            .ok_or_else(|| CxsError::InvalidSpec("singular projection system".into()))?
            .solve(&(x.transpose() * y));
        Ok(Tensor::new(
            [self.dim, self.text_dim],
            (0..self.dim)
                .flat_map(|r| (0..self.text_dim).map(move |c| (r, c)))
                .map(|(r, c)| w[(r, c)])
                .collect(),
        )?)
    }

    pub fn concepts(&self) -> usize {
        self.concept_table.shape()[0]
    }

    pub fn concept(&self, c: usize) -> Result<&[f64]> {
        if c >= self.concepts() {
            return Err(CxsError::UnknownConcept {
                concept: c,
                vocab: self.concepts(),
            });
        }
        Ok(self.concept_table.row(c))
    }

    /// Encode a `[1, H, W]` image with non-overlapping `patch` squares into
    /// `[H / patch, W / patch, d]` tokens.
    fn encode_patches(img: &Tensor, patch: usize, weights: &Tensor, bias: &Tensor, op: &str) -> Result<Tensor> {
        let (h, w) = match *img.shape() {
            [1, h, w] if h % patch == 0 && w % patch == 0 => (h, w),
            _ => {
                return Err(CxsError::Geometry(format!(
                    "{op}: image {:?} not tiled by {patch}px patches",
                    img.shape()
                )))
            }
        };
        let (rows, cols) = (h / patch, w / patch);
        let plen = patch * patch;
        let src = img.data();
        let mut patches = Vec::with_capacity(rows * cols * plen);
        for r in 0..rows {
            for c in 0..cols {
                for y in 0..patch {
                    let start = (r * patch + y) * w + c * patch;
                    patches.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
        let mut out = Tensor::new([rows * cols, plen], patches)?.matmul(weights)?;
        let d = weights.shape()[1];
        for row in out.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v = (*v + b).tanh();
            }
        }
        Ok(out.reshape([rows, cols, d])?)
    }

    /// `Ψ`: the dense `[2G, 2G, d]` target grid.
    pub fn encode_target(&self, hr_mosaic: &Tensor) -> Result<Tensor> {
        Self::encode_patches(hr_mosaic, self.patch_px, &self.target_patch_weights, &self.target_bias, "encode_target")
    }

    /// `ψ_h`: `[2, 2, d]` tokens of one tile.
    pub fn encode_tile(&self, tile: &Tensor) -> Result<Tensor> {
        if tile.shape() != [1, 2 * self.patch_px, 2 * self.patch_px] {
            return Err(CxsError::Geometry(format!(
                "encode_tile: expected [1, {0}, {0}], got {1:?}",
                2 * self.patch_px,
                tile.shape()
            )));
        }
        Self::encode_patches(tile, self.patch_px, &self.target_patch_weights, &self.target_bias, "encode_tile")
    }

    /// `ψ_g`: `[L, L, d]` LR tokens with `L = lr_px / 4`.
    pub fn encode_lr(&self, lr: &Tensor) -> Result<Tensor> {
        Self::encode_patches(lr, LR_PATCH_PX, &self.lr_patch_weights, &self.lr_bias, "encode_lr")
    }

    /// Mean-pooled vector projected into the concept space and normalised.
    pub fn project_pooled(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.dim {
            return Err(CxsError::LengthMismatch(format!(
                "pooled vector has {} dims, encoder has {}",
                pooled.len(),
                self.dim
            )));
        }
        let p = Tensor::new([1, self.dim], pooled.to_vec())?.matmul(&self.visual_projection)?;
        let mut v = p.into_data();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n >= numkernel::NORMALIZE_EPS {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(v)
    }

    /// Cosine in the shared space between mean-pooled `tokens` and concept `c`.
    pub fn shared_space_similarity(&self, tokens: &Tensor, concept: usize) -> Result<f64> {
        let text = self.concept(concept)?;
        let v = self.project_pooled(&mean_token(tokens))?;
        Ok(cosine(&v, text))
    }
}

/// Every tile's `[2, 2, d]` block of a `[2G, 2G, d]` grid, in tile order.
pub fn tile_blocks(grid_tokens: &Tensor, grid: usize) -> Result<Vec<Tensor>> {
    let (side, d) = match *grid_tokens.shape() {
        [h, w, d] if h == w && h == 2 * grid => (h, d),
        _ => {
            return Err(CxsError::Geometry(format!(
                "tile_blocks: expected [{0}, {0}, d], got {1:?}",
                2 * grid,
                grid_tokens.shape()
            )))
        }
    };
    let src = grid_tokens.data();
    Ok((0..grid * grid)
        .map(|p| {
            let (ty, tx) = (p / grid, p % grid);
            let mut out = Vec::with_capacity(4 * d);
            for dy in 0..2 {
                let start = ((2 * ty + dy) * side + 2 * tx) * d;
                out.extend_from_slice(&src[start..start + 2 * d]);
            }
            Tensor::new([2, 2, d], out).expect("block size")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, tessellate, stitch};

    fn setup() -> (SceneSpec, OracleEncoders) {
        let spec = SceneSpec::default();
        let enc = OracleEncoders::new(&spec, 32, 32, 11).unwrap();
        (spec, enc)
    }

    #[test]
    fn zero_mosaic_gives_tanh_bias() {
        let (spec, enc) = setup();
        let z = Tensor::zeros([1, spec.mosaic_px(), spec.mosaic_px()]);
        let h = enc.encode_target(&z).unwrap();
        assert_eq!(h.shape(), &[20, 20, 32]);
        for r in 0..400 {
            for (v, b) in h.row(r).iter().zip(enc.target_bias.data()) {
                assert_eq!(*v, b.tanh());
            }
        }
        let lr = enc.encode_lr(&Tensor::zeros([1, 20, 20])).unwrap();
        assert_eq!(lr.shape(), &[5, 5, 32]);
        assert!((1..25).all(|r| lr.row(r) == lr.row(0)));
    }

    #[test]
    fn tile_encoder_matches_target_blocks() {
        let (spec, enc) = setup();
        let scene = generate_scene(&spec, &spec.appearance(), 0, &mut RngStream::new(3, 0)).unwrap();
        let h = enc.encode_target(&scene.hr_mosaic).unwrap();
        let blocks = tile_blocks(&h, spec.grid).unwrap();
        for (p, tile) in tessellate(&scene.hr_mosaic, spec.grid).unwrap().iter().enumerate() {
            assert_eq!(enc.encode_tile(tile).unwrap(), blocks[p]);
        }
    }

    #[test]
    fn swapping_tiles_swaps_token_blocks() {
        let (spec, enc) = setup();
        let scene = generate_scene(&spec, &spec.appearance(), 0, &mut RngStream::new(4, 0)).unwrap();
        let mut tiles = tessellate(&scene.hr_mosaic, spec.grid).unwrap();
        let before = tile_blocks(&enc.encode_target(&scene.hr_mosaic).unwrap(), spec.grid).unwrap();
        tiles.swap(3, 57);
        let swapped = stitch(&tiles, spec.grid).unwrap();
        let after = tile_blocks(&enc.encode_target(&swapped).unwrap(), spec.grid).unwrap();
        for p in 0..spec.tiles() {
            let q = match p {
                3 => 57,
                57 => 3,
                _ => p,
            };
            assert_eq!(after[p], before[q]);
        }
    }

    #[test]
    fn concept_table_is_spread() {
        let (spec, enc) = setup();
        for a in 0..spec.concepts {
            let ra = enc.concept(a).unwrap();
            assert!((ra.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for b in 0..a {
                assert!(cosine(ra, enc.concept(b).unwrap()) < 0.5);
            }
        }
        assert!(matches!(enc.concept(8), Err(CxsError::UnknownConcept { .. })));
    }

    #[test]
    fn similarity_extremes() {
        let (_, mut enc) = setup();
        enc.visual_projection = Tensor::eye(32, 32);
        let c = enc.concept(2).unwrap().to_vec();
        let same = Tensor::new([1, 1, 32], c.clone()).unwrap();
        assert!((enc.shared_space_similarity(&same, 2).unwrap() - 1.0).abs() < 1e-12);
        let neg = Tensor::new([1, 1, 32], c.iter().map(|v| -v).collect()).unwrap();
        assert!((enc.shared_space_similarity(&neg, 2).unwrap() + 1.0).abs() < 1e-12);
        // Gram-Schmidt a vector orthogonal to the concept
        let mut o: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let dot: f64 = o.iter().zip(&c).map(|(a, b)| a * b).sum();
        o.iter_mut().zip(&c).for_each(|(a, b)| *a -= dot * b);
        let orth = Tensor::new([1, 1, 32], o).unwrap();
        assert!(enc.shared_space_similarity(&orth, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn prototypes_land_near_their_concepts() {
        let (spec, enc) = setup();
        let app = spec.appearance();
        let side = spec.tile_px;
        for c in 0..spec.concepts {
            let mut tile = Tensor::full([1, side, side], 0.1);
            for y in 0..side {
                for x in 0..side {
                    tile.data_mut()[y * side + x] += app.shifts[c] + app.motifs[c][(y % 2) * 2 + x % 2];
                }
            }
            let tokens = enc.encode_tile(&tile).unwrap();
            let best = (0..spec.concepts)
                .max_by(|&a, &b| {
                    let sa = enc.shared_space_similarity(&tokens, a).unwrap();
                    let sb = enc.shared_space_similarity(&tokens, b).unwrap();
                    sa.total_cmp(&sb)
                })
                .unwrap();
            assert_eq!(best, c);
        }
    }

    #[test]
    fn encoding_leaves_weights_untouched() {
        let (spec, enc) = setup();
        let copy = enc.clone();
        let scene = generate_scene(&spec, &spec.appearance(), 1, &mut RngStream::new(1, 1)).unwrap();
        enc.encode_target(&scene.hr_mosaic).unwrap();
        assert_eq!(enc, copy);
    }
}
