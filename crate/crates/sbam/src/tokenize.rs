//! Patch tokenization and reconstruction targets.
//!
//! An image becomes `L = grid_rows * grid_cols` tokens of dimension
//! `D = patch_side^2 * channels`. Token `j` covers the patch at grid position
//! `(j / cols, j % cols)`; within a patch, pixels flatten row-major with
//! channels interleaved.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Mat3;

/// A batch of token sequences plus the patch geometry they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    tokens: Mat3,
    patch_side: usize,
    grid: (usize, usize),
    channels: usize,
}

impl TokenBatch {
    /// Wraps raw tokens, enforcing `L == rows * cols` and
    /// `D == patch_side^2 * channels`.
    pub fn new(
        tokens: Mat3,
        patch_side: usize,
        grid: (usize, usize),
        channels: usize,
    ) -> Result<Self> {
        let (_, l, d) = tokens.dims();
        if l != grid.0 * grid.1 {
            return Err(Error::shape(
                "TokenBatch::new",
                format!("L = {l}"),
                format!("grid {}x{}", grid.0, grid.1),
            ));
        }
        if d != patch_side * patch_side * channels {
            return Err(Error::shape(
                "TokenBatch::new",
                format!("D = {d}"),
                format!("patch {patch_side}^2 x {channels} channels"),
            ));
        }
        Ok(TokenBatch {
            tokens,
            patch_side,
            grid,
            channels,
        })
    }

    pub fn tokens(&self) -> &Mat3 {
        &self.tokens
    }

    /// Batch size N.
    pub fn n(&self) -> usize {
        self.tokens.n()
    }

    /// Tokens per image L.
    pub fn len_tokens(&self) -> usize {
        self.tokens.rows()
    }

    /// Token dimensionality D.
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token(&self, n: usize, l: usize) -> &[f32] {
        self.tokens.row(n, l)
    }

    /// Copies samples `lo..hi` into a new batch.
    pub fn slice_samples(&self, lo: usize, hi: usize) -> TokenBatch {
        let (_, l, d) = self.tokens.dims();
        let stride = l * d;
        let data = self.tokens.data()[lo * stride..hi * stride].to_vec();
        TokenBatch {
            tokens: Mat3::new(hi - lo, l, d, data).expect("sliced buffer keeps shape"),
            patch_side: self.patch_side,
            grid: self.grid,
            channels: self.channels,
        }
    }

    /// Same geometry, different token values. Used for targets and gradients.
    pub fn with_tokens(&self, tokens: Mat3) -> Result<TokenBatch> {
        TokenBatch::new(tokens, self.patch_side, self.grid, self.channels)
    }
}

/// Cuts every image into `patch_side x patch_side` tokens.
///
/// All images must share dimensions and channel count, and width/height must
/// divide evenly by `patch_side`.
pub fn patchify(images: &[Image], patch_side: usize) -> Result<TokenBatch> {
    if images.is_empty() {
        return Err(Error::parameter("images", "need at least one image"));
    }
    if patch_side == 0 {
        return Err(Error::parameter("patch_side", "must be positive"));
    }
    let (w, h, c) = (images[0].width(), images[0].height(), images[0].channels());
    for img in images {
        if (img.width(), img.height(), img.channels()) != (w, h, c) {
            return Err(Error::shape(
                "patchify",
                format!("{w}x{h}x{c}"),
                format!("{}x{}x{}", img.width(), img.height(), img.channels()),
            ));
        }
    }
    if w % patch_side != 0 || h % patch_side != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {w}x{h}"),
            format!("patch side {patch_side} must divide both"),
        ));
    }
    let grid = (h / patch_side, w / patch_side);
    let l = grid.0 * grid.1;
    let d = patch_side * patch_side * c;
    let mut data = Vec::with_capacity(images.len() * l * d);
    for img in images {
        for gy in 0..grid.0 {
            for gx in 0..grid.1 {
                for py in 0..patch_side {
                    for px in 0..patch_side {
                        for ch in 0..c {
                            data.push(img.get(gx * patch_side + px, gy * patch_side + py, ch));
                        }
                    }
                }
            }
        }
    }
    TokenBatch::new(Mat3::new(images.len(), l, d, data)?, patch_side, grid, c)
}

/// Reassembles images from tokens; exact inverse of [`patchify`].
pub fn unpatchify(batch: &TokenBatch) -> Vec<Image> {
    let (rows, cols) = batch.grid();
    let p = batch.patch_side();
    let c = batch.channels();
    let (w, h) = (cols * p, rows * p);
    let mut out = Vec::with_capacity(batch.n());
    for k in 0..batch.n() {
        let mut pixels = vec![0.0f32; w * h * c];
        for l in 0..batch.len_tokens() {
            let (gy, gx) = (l / cols, l % cols);
            let tok = batch.token(k, l);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let v = tok[(py * p + px) * c + ch];
                        pixels[((gy * p + py) * w + gx * p + px) * c + ch] = v;
                    }
                }
            }
        }
        out.push(Image::new(w, h, c, pixels).expect("token values stay in [0,1]"));
    }
    out
}

/// Per-token normalized reconstruction targets.
///
/// Each token is centered by its own mean over the D values and divided by
/// its population standard deviation plus `eps`.
pub fn normalize_targets(x: &TokenBatch, eps: f32) -> TokenBatch {
    assert!(eps > 0.0, "eps must be positive, got {eps}");
    let (n, l, d) = x.tokens().dims();
    let mut data = Vec::with_capacity(n * l * d);
    for k in 0..n {
        for t in 0..l {
            let tok = x.token(k, t);
            let mean = tok.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = tok
                .iter()
                .map(|&v| {
                    let diff = v as f64 - mean;
                    diff * diff
                })
                .sum::<f64>()
                / d as f64;
            let denom = var.sqrt() + eps as f64;
            data.extend(tok.iter().map(|&v| ((v as f64 - mean) / denom) as f32));
        }
    }
    TokenBatch {
        tokens: Mat3::new(n, l, d, data).expect("same shape as input"),
        patch_side: x.patch_side(),
        grid: x.grid(),
        channels: x.channels(),
    }
}
