//! Patch tokenisation of posed images.
//!
//! A token is the flattened `P × P × 9` block of one patch, pixel-major: every
//! pixel contributes `[r, g, b, dx, dy, dz, mx, my, mz]` with RGB remapped from
//! `[0, 1]` to `[-1, 1]` and the Plücker direction/moment appended. Patches are
//! ordered row-major within a view.

use crate::error::{domain, Error, Result};
use crate::geometry::PluckerGrid;
use crate::imaging::{Image, PosedImage};
use crate::tensor::Mat;

/// Channels per pixel inside a token.
pub const CHANNELS: usize = 9;
pub const RGB: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Context,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub patch_size: usize,
    /// One row per token, `P²·9` wide.
    pub tokens: Mat,
    pub view_index: Vec<usize>,
    /// `(row, col)` of the patch within its view.
    pub patch_index: Vec<(usize, usize)>,
    pub mask_flag: Vec<bool>,
    pub role: Role,
}

/// The shared learnable embedding substituted for the RGB part of masked tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskToken {
    pub embedding: Vec<f64>,
}

#[inline]
pub fn to_signed(x: f64) -> f64 {
    2.0 * x - 1.0
}

#[inline]
pub fn to_unit(y: f64) -> f64 {
    (y + 1.0) / 2.0
}

pub fn token_dim(patch_size: usize) -> usize {
    patch_size * patch_size * CHANNELS
}

pub fn rgb_dim(patch_size: usize) -> usize {
    patch_size * patch_size * RGB
}

fn check_divisible(width: usize, height: usize, p: usize) -> Result<()> {
    if p == 0 || width % p != 0 || height % p != 0 {
        return Err(domain!("resolution {width}x{height} is not divisible by patch size {p}"));
    }
    Ok(())
}

/// Flatten a posed image and its Plücker grid into patch tokens.
pub fn tokenize(image: &PosedImage, plucker: &PluckerGrid, patch_size: usize) -> Result<TokenSequence> {
    let img = &image.image;
    if img.width != plucker.width || img.height != plucker.height {
        return Err(domain!(
            "image is {}x{} but Plücker grid is {}x{}",
            img.width,
            img.height,
            plucker.width,
            plucker.height
        ));
    }
    check_divisible(img.width, img.height, patch_size)?;
    let p = patch_size;
    let (rows, cols) = (img.height / p, img.width / p);
    let dim = token_dim(p);
    let mut tokens = Mat::zeros(rows * cols, dim);
    let mut patch_index = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let t = pr * cols + pc;
            let row = tokens.row_mut(t);
            for py in 0..p {
                for px in 0..p {
                    let (u, v) = (pc * p + px, pr * p + py);
                    let base = (py * p + px) * CHANNELS;
                    let rgb = img.pixel(u, v);
                    let (d, m) = plucker.at(u, v);
                    for c in 0..3 {
                        row[base + c] = to_signed(rgb[c]);
                        row[base + 3 + c] = d[c];
                        row[base + 6 + c] = m[c];
                    }
                }
            }
            patch_index.push((pr, pc));
        }
    }
    let n = rows * cols;
    Ok(TokenSequence {
        patch_size: p,
        tokens,
        view_index: vec![0; n],
        patch_index,
        mask_flag: vec![false; n],
        role: Role::Context,
    })
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_view(mut self, view: usize) -> Self {
        self.view_index.iter_mut().for_each(|v| *v = view);
        self
    }

    /// Concatenate sequences of the same role and patch size.
    pub fn concat(parts: &[TokenSequence]) -> Result<TokenSequence> {
        let first = parts.first().ok_or_else(|| domain!("cannot concatenate zero sequences"))?;
        if parts
            .iter()
            .any(|s| s.patch_size != first.patch_size || s.role != first.role)
        {
            return Err(domain!("sequences differ in patch size or role"));
        }
        let mats: Vec<&Mat> = parts.iter().map(|s| &s.tokens).collect();
        Ok(TokenSequence {
            patch_size: first.patch_size,
            tokens: Mat::vstack(&mats),
            view_index: parts.iter().flat_map(|s| s.view_index.iter().copied()).collect(),
            patch_index: parts.iter().flat_map(|s| s.patch_index.iter().copied()).collect(),
            mask_flag: parts.iter().flat_map(|s| s.mask_flag.iter().copied()).collect(),
            role: first.role,
        })
    }

    /// RGB sub-vector of token `i` (`P²·3`, pixel-major, in `[-1, 1]`).
    pub fn rgb(&self, i: usize) -> Vec<f64> {
        let row = self.tokens.row(i);
        row.chunks(CHANNELS).flat_map(|px| px[..RGB].iter().copied()).collect()
    }

    /// All RGB sub-vectors as a `T × P²·3` matrix.
    pub fn rgb_matrix(&self) -> Mat {
        let d = rgb_dim(self.patch_size);
        let mut out = Mat::zeros(self.len(), d);
        for i in 0..self.len() {
            out.row_mut(i).copy_from_slice(&self.rgb(i));
        }
        out
    }

    /// Overwrite the RGB part of token `i` and clear its mask flag.
    pub fn write_rgb(&mut self, i: usize, rgb: &[f64]) {
        let row = self.tokens.row_mut(i);
        for (px, src) in row.chunks_mut(CHANNELS).zip(rgb.chunks(RGB)) {
            px[..RGB].copy_from_slice(src);
        }
        self.mask_flag[i] = false;
    }

    /// Plücker sub-vector of token `i` (`P²·6`).
    pub fn plucker(&self, i: usize) -> Vec<f64> {
        let row = self.tokens.row(i);
        row.chunks(CHANNELS).flat_map(|px| px[RGB..].iter().copied()).collect()
    }
}

/// Replace the RGB channels of the selected target tokens with the mask embedding.
pub fn apply_mask(seq: &TokenSequence, mask: &[bool], mask_token: &MaskToken) -> Result<TokenSequence> {
    if seq.role != Role::Target {
        return Err(Error::Usage("only target sequences can be masked".into()));
    }
    if mask.len() != seq.len() {
        return Err(domain!("mask has {} entries for {} tokens", mask.len(), seq.len()));
    }
    if mask_token.embedding.len() != rgb_dim(seq.patch_size) {
        return Err(domain!(
            "mask embedding has {} values, expected {}",
            mask_token.embedding.len(),
            rgb_dim(seq.patch_size)
        ));
    }
    let mut out = seq.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.write_rgb(i, &mask_token.embedding);
            out.mask_flag[i] = true;
        }
    }
    Ok(out)
}

/// Reassemble an image from per-token RGB content in `[-1, 1]`.
///
/// Rows may be full tokens (`P²·9`) or bare RGB tokens (`P²·3`); patches are
/// taken in row-major order.
pub fn detokenize(tokens: &Mat, resolution: (usize, usize), patch_size: usize) -> Result<Image> {
    let (w, h) = resolution;
    check_divisible(w, h, patch_size)?;
    let p = patch_size;
    let (rows, cols) = (h / p, w / p);
    if tokens.rows != rows * cols {
        return Err(domain!("{} tokens cannot tile a {w}x{h} image at P={p}", tokens.rows));
    }
    let stride = if tokens.cols == token_dim(p) {
        CHANNELS
    } else if tokens.cols == rgb_dim(p) {
        RGB
    } else {
        return Err(domain!("token width {} matches neither P²·9 nor P²·3", tokens.cols));
    };
    let mut img = Image::new(w, h);
    for pr in 0..rows {
        for pc in 0..cols {
            let row = tokens.row(pr * cols + pc);
            for py in 0..p {
                for px in 0..p {
                    let base = (py * p + px) * stride;
                    img.set_pixel(
                        pc * p + px,
                        pr * p + py,
                        [to_unit(row[base]), to_unit(row[base + 1]), to_unit(row[base + 2])],
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Pixel index `(v·W + u)` of every pixel in token `t`, in token order.
pub fn token_pixels(t: usize, width: usize, patch_size: usize) -> impl Iterator<Item = usize> {
    let cols = width / patch_size;
    let (pr, pc) = (t / cols, t % cols);
    (0..patch_size * patch_size).map(move |k| {
        let (py, px) = (k / patch_size, k % patch_size);
        (pr * patch_size + py) * width + pc * patch_size + px
    })
}
