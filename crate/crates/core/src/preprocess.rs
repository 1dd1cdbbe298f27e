//! Patch-aligned image resizing and raw pixel patch extraction.
//!
//! Images are kept near their native resolution and aspect ratio. Both sides
//! are snapped to multiples of the patch size `P`, the long side is capped at
//! `M`, and the result is cut into a `rows x cols` grid of `P x P x 3` blocks.
//!
//! Axis convention: `l1` is the width and `l2` the height. A grid has
//! `cols = width / P` and `rows = height / P`; patches are stored row-major.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("invalid preprocess config: patch size {patch_size}, max resolution {max_resolution}")]
    InvalidConfig { patch_size: u32, max_resolution: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("image {width}x{height} is not aligned to patch size {patch_size}")]
    NotAligned {
        width: u32,
        height: u32,
        patch_size: u32,
    },
}

/// Image size as `(width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, PreprocessError> {
        let dims = Self { width, height };
        dims.validate()?;
        Ok(dims)
    }

    fn validate(&self) -> Result<(), PreprocessError> {
        if self.width == 0 || self.height == 0 {
            return Err(PreprocessError::InvalidDims {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    patch_size: u32,
    max_resolution: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            max_resolution: 1024,
        }
    }
}

impl PreprocessConfig {
    /// `max_resolution` must be a positive multiple of `patch_size`.
    pub fn new(patch_size: u32, max_resolution: u32) -> Result<Self, PreprocessError> {
        if patch_size == 0 || max_resolution == 0 || !max_resolution.is_multiple_of(patch_size) {
            return Err(PreprocessError::InvalidConfig {
                patch_size,
                max_resolution,
            });
        }
        Ok(Self {
            patch_size,
            max_resolution,
        })
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn max_resolution(&self) -> u32 {
        self.max_resolution
    }

    /// Number of bytes in one `P x P x 3` patch.
    pub fn patch_len(&self) -> usize {
        let p = self.patch_size as usize;
        p * p * 3
    }
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    dims: ImageDims,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(dims: ImageDims, pixels: Vec<u8>) -> Result<Self, PreprocessError> {
        dims.validate()?;
        let expected = dims.pixel_count() * 3;
        if pixels.len() != expected {
            return Err(PreprocessError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self { dims, pixels })
    }

    /// Builds an RGB image from RGBA bytes by compositing over black.
    pub fn from_rgba8(dims: ImageDims, rgba: &[u8]) -> Result<Self, PreprocessError> {
        dims.validate()?;
        let expected = dims.pixel_count() * 4;
        if rgba.len() != expected {
            return Err(PreprocessError::PixelCount {
                expected,
                actual: rgba.len(),
            });
        }
        let pixels = rgba
            .chunks_exact(4)
            .flat_map(|px| {
                let a = px[3] as u32;
                [0, 1, 2].map(|c| ((px[c] as u32 * a + 127) / 255) as u8)
            })
            .collect();
        Ok(Self { dims, pixels })
    }

    pub fn solid(dims: ImageDims, rgb: [u8; 3]) -> Result<Self, PreprocessError> {
        dims.validate()?;
        let pixels = rgb.repeat(dims.pixel_count());
        Ok(Self { dims, pixels })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.dims.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// An aligned image cut into `rows x cols` patches of `P x P x 3` bytes.
///
/// Each patch is laid out as `(row, col, channel)` within the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: u32,
    rows: usize,
    cols: usize,
    patches: Vec<Vec<u8>>,
}

impl PatchGrid {
    pub fn new(
        patch_size: u32,
        rows: usize,
        cols: usize,
        patches: Vec<Vec<u8>>,
    ) -> Result<Self, PreprocessError> {
        let p = patch_size as usize;
        let bad_shape = patch_size == 0
            || rows == 0
            || cols == 0
            || patches.len() != rows * cols
            || patches.iter().any(|patch| patch.len() != p * p * 3);
        if bad_shape {
            return Err(PreprocessError::InvalidDims {
                width: (cols * p) as u32,
                height: (rows * p) as u32,
            });
        }
        Ok(Self {
            patch_size,
            rows,
            cols,
            patches,
        })
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Total patch count `N = rows * cols`.
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Vec<u8>] {
        &self.patches
    }

    pub fn patch(&self, row: usize, col: usize) -> &[u8] {
        &self.patches[row * self.cols + col]
    }

    pub fn into_patches(self) -> Vec<Vec<u8>> {
        self.patches
    }

    /// Stitches the patches back into the image they were cut from.
    pub fn reassemble(&self) -> RawImage {
        let p = self.patch_size as usize;
        let width = self.cols * p;
        let height = self.rows * p;
        let mut pixels = vec![0u8; width * height * 3];
        for (idx, patch) in self.patches.iter().enumerate() {
            let (r, c) = (idx / self.cols, idx % self.cols);
            for py in 0..p {
                let dst = ((r * p + py) * width + c * p) * 3;
                pixels[dst..dst + p * 3].copy_from_slice(&patch[py * p * 3..(py + 1) * p * 3]);
            }
        }
        RawImage {
            dims: ImageDims {
                width: width as u32,
                height: height as u32,
            },
            pixels,
        }
    }
}

/// Target size for an image before patch extraction.
///
/// The long side becomes `min((long / P + 1) * P, M)`, the short side is
/// scaled by the same ratio and then bumped to the next multiple of `P`.
/// Sides that are already aligned still move up one patch, and when the long
/// side is capped the short side can land at `M + P`. Both behaviours are kept
/// as-is. Axis order of the input is preserved.
pub fn resize_output_dims(
    dims: ImageDims,
    cfg: &PreprocessConfig,
) -> Result<ImageDims, PreprocessError> {
    dims.validate()?;
    let p = cfg.patch_size as u64;
    let m = cfg.max_resolution as u64;
    let (l1, l2) = (dims.width as u64, dims.height as u64);
    let (short, long) = if l2 <= l1 { (l2, l1) } else { (l1, l2) };

    let new_long = ((long / p + 1) * p).min(m);
    let scaled_short = new_long * short / long;
    let new_short = (scaled_short / p + 1) * p;

    let (w, h) = if l2 <= l1 {
        (new_long, new_short)
    } else {
        (new_short, new_long)
    };
    Ok(ImageDims {
        width: w as u32,
        height: h as u32,
    })
}

/// Resizes to `resize_output_dims` using bilinear sampling with clamped edges.
///
/// Sample positions are pixel-center aligned and evaluated in exact integer
/// arithmetic, so a mirrored input produces an exactly mirrored output.
pub fn resize_image(img: &RawImage, cfg: &PreprocessConfig) -> Result<RawImage, PreprocessError> {
    let out = resize_output_dims(img.dims, cfg)?;
    Ok(bilinear_resize(img, out))
}

/// Source tap for one output coordinate: two indices and the weight of the
/// second, expressed over `denom`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: u64,
}

fn axis_taps(in_len: u32, out_len: u32) -> (Vec<Tap>, u64) {
    let (in_len, out_len) = (in_len as i64, out_len as i64);
    // src = (x + 0.5) * in / out - 0.5, scaled by 2 * out
    let denom = 2 * out_len;
    let max_num = denom * (in_len - 1);
    let taps = (0..out_len)
        .map(|x| {
            let num = ((2 * x + 1) * in_len - out_len).clamp(0, max_num);
            let lo = num / denom;
            let frac = num % denom;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo: lo as usize,
                hi: hi as usize,
                frac: frac as u64,
            }
        })
        .collect();
    (taps, denom as u64)
}

fn bilinear_resize(img: &RawImage, out: ImageDims) -> RawImage {
    let src_w = img.dims.width as usize;
    let (xt, xd) = axis_taps(img.dims.width, out.width);
    let (yt, yd) = axis_taps(img.dims.height, out.height);
    let total = xd * yd;
    let mut pixels = Vec::with_capacity(out.pixel_count() * 3);
    let at = |x: usize, y: usize, c: usize| img.pixels[(y * src_w + x) * 3 + c] as u64;
    for ty in &yt {
        let (wy0, wy1) = (yd - ty.frac, ty.frac);
        for tx in &xt {
            let (wx0, wx1) = (xd - tx.frac, tx.frac);
            for c in 0..3 {
                let acc = at(tx.lo, ty.lo, c) * wx0 * wy0
                    + at(tx.hi, ty.lo, c) * wx1 * wy0
                    + at(tx.lo, ty.hi, c) * wx0 * wy1
                    + at(tx.hi, ty.hi, c) * wx1 * wy1;
                pixels.push(((acc + total / 2) / total).min(255) as u8);
            }
        }
    }
    RawImage { dims: out, pixels }
}

/// Cuts an aligned image into its patch grid.
pub fn extract_patches(img: &RawImage, cfg: &PreprocessConfig) -> Result<PatchGrid, PreprocessError> {
    let ImageDims { width, height } = img.dims;
    let p = cfg.patch_size;
    if width % p != 0 || height % p != 0 {
        return Err(PreprocessError::NotAligned {
            width,
            height,
            patch_size: p,
        });
    }
    let p = p as usize;
    let (cols, rows) = (width as usize / p, height as usize / p);
    let row_bytes = width as usize * 3;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut patch = Vec::with_capacity(p * p * 3);
            for py in 0..p {
                let start = (r * p + py) * row_bytes + c * p * 3;
                patch.extend_from_slice(&img.pixels[start..start + p * 3]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid {
        patch_size: cfg.patch_size,
        rows,
        cols,
        patches,
    })
}

/// Resize followed by patch extraction.
pub fn patchify(img: &RawImage, cfg: &PreprocessConfig) -> Result<PatchGrid, PreprocessError> {
    let resized = resize_image(img, cfg)?;
    extract_patches(&resized, cfg)
}
