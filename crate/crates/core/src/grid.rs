//! Token containers and deterministic synthetic latents.
//!
//! All pseudo-random draws in this crate come from ChaCha8 (`rand_chacha`),
//! seeded through `SeedableRng::seed_from_u64`. The stream is specified by
//! the ChaCha algorithm itself, so a given seed produces the same values on
//! every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major index of grid cell `(row, col)` in a grid `width` cells wide.
#[inline]
pub fn grid_index(row: usize, col: usize, width: usize) -> usize {
    debug_assert!(col < width);
    row * width + col
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A dense `rows x channels` matrix of `f32` token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    rows: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tokens {
    pub fn zeros(rows: usize, channels: usize) -> Self {
        Self {
            rows,
            channels,
            data: vec![0.0; rows * channels],
        }
    }

    pub fn from_vec(rows: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{channels} tokens, got {}",
                rows * channels,
                data.len()
            )));
        }
        Ok(Self { rows, channels, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Shape("ragged token rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), channels, data)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and zero-channel matrices are legal here.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// An `H x W` grid of `C`-channel tokens; token `(row, col)` is row
/// `row * W + col` of the underlying matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    tokens: Tokens,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Tokens) -> Result<Self> {
        if height == 0 || width == 0 || tokens.channels() == 0 {
            return Err(Error::Shape("grid dimensions must be positive".into()));
        }
        if tokens.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} grid needs {} tokens, got {}",
                height * width,
                tokens.len()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::numeric("token grid"));
        }
        Ok(Self { height, width, tokens })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, Tokens::from_vec(height * width, channels, data)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.channels()
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> &Tokens {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tokens {
        self.tokens
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        self.tokens.row(grid_index(row, col, self.width))
    }

    /// Replaces the token values, keeping the grid geometry.
    pub(crate) fn with_tokens(&self, tokens: Tokens) -> Result<Self> {
        Self::new(self.height, self.width, tokens)
    }

    /// Averages non-overlapping `factor x factor` windows.
    pub fn avg_pool(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Dimension {
                height: self.height,
                width: self.width,
                stride_y: factor,
                stride_x: factor,
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w, c) = (self.height / factor, self.width / factor, self.channels());
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = Tokens::zeros(h * w, c);
        for row in 0..h {
            for col in 0..w {
                let dst = out.row_mut(grid_index(row, col, w));
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.token(row * factor + dy, col * factor + dx);
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        Self::new(h, w, out)
    }

    /// Nearest-neighbour upsampling, the inverse shape of [`TokenGrid::avg_pool`].
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Bounds("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Tokens::zeros(h * w, self.channels());
        for row in 0..h {
            for col in 0..w {
                out.row_mut(grid_index(row, col, w))
                    .copy_from_slice(self.token(row / factor, col / factor));
            }
        }
        Self::new(h, w, out)
    }
}

/// Parameters of the synthetic latent generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub seed: u64,
    /// Box-filter radius in cells; 0 disables smoothing.
    pub smoothing_radius: usize,
    pub amplitude: f32,
}

impl Default for RedundancyProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            smoothing_radius: 4,
            amplitude: 1.0,
        }
    }
}

/// Draws i.i.d. uniform values in `[-1, 1)` and box-filters each channel.
///
/// The filter window is clamped to the grid: a cell near the border averages
/// only the in-grid cells of its `(2r+1) x (2r+1)` window. The filter is
/// applied separably (rows, then columns), which is exact for rectangular
/// windows.
pub fn make_synthetic_grid(
    height: usize,
    width: usize,
    channels: usize,
    profile: &RedundancyProfile,
) -> Result<TokenGrid> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Bounds("grid dimensions must be at least 1".into()));
    }
    let radius = profile.smoothing_radius;
    if radius > height.min(width) {
        return Err(Error::Bounds(format!(
            "smoothing radius {radius} exceeds min grid dimension {}",
            height.min(width)
        )));
    }
    if !(profile.amplitude.is_finite() && profile.amplitude > 0.0) {
        return Err(Error::Bounds("amplitude must be positive and finite".into()));
    }

    let mut rng = rng_from_seed(profile.seed);
    let noise: Vec<f32> = (0..height * width * channels)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();

    let data = if radius == 0 {
        noise
    } else {
        let at = |row: usize, col: usize, ch: usize| (row * width + col) * channels + ch;
        let window = |center: usize, len: usize| (center.saturating_sub(radius), (center + radius).min(len - 1));

        let mut horiz = vec![0.0f32; noise.len()];
        for row in 0..height {
            for col in 0..width {
                let (lo, hi) = window(col, width);
                let inv = 1.0 / (hi - lo + 1) as f32;
                for ch in 0..channels {
                    let sum: f32 = (lo..=hi).map(|c| noise[at(row, c, ch)]).sum();
                    horiz[at(row, col, ch)] = sum * inv;
                }
            }
        }
        let mut out = vec![0.0f32; noise.len()];
        for row in 0..height {
            let (lo, hi) = window(row, height);
            let inv = 1.0 / (hi - lo + 1) as f32;
            for col in 0..width {
                for ch in 0..channels {
                    let sum: f32 = (lo..=hi).map(|r| horiz[at(r, col, ch)]).sum();
                    out[at(row, col, ch)] = sum * inv;
                }
            }
        }
        out
    };

    let data = data.into_iter().map(|v| v * profile.amplitude).collect();
    TokenGrid::from_vec(height, width, channels, data)
}

/// Mean cosine similarity over all horizontally and vertically adjacent
/// token pairs.
pub fn mean_adjacent_cosine(grid: &TokenGrid) -> f64 {
    let (h, w) = (grid.height(), grid.width());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for row in 0..h {
        for col in 0..w {
            let here = grid.token(row, col);
            if col + 1 < w {
                total += crate::matching::cosine_similarity_unchecked(here, grid.token(row, col + 1)) as f64;
                count += 1;
            }
            if row + 1 < h {
                total += crate::matching::cosine_similarity_unchecked(here, grid.token(row + 1, col)) as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
