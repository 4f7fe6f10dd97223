//! Frame loading, synthetic scenes, grayscale conversion and patch tokenization.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 14;
/// One camera token plus four register tokens.
pub const DEFAULT_NUM_SPECIALS: usize = 5;
/// Side length in pixels of one synthetic checkerboard square.
pub const CHECKER_BLOCK: usize = 7;

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// A decoded frame with interleaved 8-bit channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFrame {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    pub frame_index: usize,
}

impl ImageFrame {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
        frame_index: usize,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedFormat(format!("{channels} channels")));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("non-empty image", format!("{height}x{width}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                height * width * channels,
                format!("{} pixel bytes", pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            frame_index,
        })
    }

    /// Single-channel frame filled with `value`.
    pub fn filled(height: usize, width: usize, value: u8, frame_index: usize) -> Result<Self> {
        Self::new(height, width, 1, vec![value; height * width], frame_index)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn check_divisible(&self, patch_size: usize) -> Result<()> {
        if patch_size == 0 || !self.height.is_multiple_of(patch_size) || !self.width.is_multiple_of(patch_size) {
            return Err(Error::NotDivisible {
                height: self.height,
                width: self.width,
                patch_size,
            });
        }
        Ok(())
    }

    /// Replicates a gray frame into three channels; RGB frames are cloned.
    pub fn to_rgb(&self) -> ImageFrame {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        ImageFrame {
            height: self.height,
            width: self.width,
            channels: 3,
            pixels,
            frame_index: self.frame_index,
        }
    }
}

/// Reads a PNG or PGM/PPM file. Gray images load with one channel, everything
/// else is converted to RGB.
pub fn load_image(path: &Path, patch_size: usize, frame_index: usize) -> Result<ImageFrame> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => {
            return Err(Error::UnsupportedFormat(format!(
                "unrecognized file {}",
                path.display()
            )))
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let frame = match decoded {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            let gray = decoded.to_luma8();
            let (w, h) = gray.dimensions();
            ImageFrame::new(h as usize, w as usize, 1, gray.into_raw(), frame_index)?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            ImageFrame::new(h as usize, w as usize, 3, rgb.into_raw(), frame_index)?
        }
    };
    frame.check_divisible(patch_size)?;
    Ok(frame)
}

/// Loads every PNG/PGM/PPM file in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path, patch_size: usize) -> Result<Vec<ImageFrame>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .as_deref(),
                Some("png" | "pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_image(p, patch_size, i))
        .collect()
}

/// Writes a binary PGM (P5) or PPM (P6) depending on the channel count.
pub fn write_pnm(path: &Path, frame: &ImageFrame) -> Result<()> {
    let magic = if frame.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    bytes.extend_from_slice(&frame.pixels);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Intensity image in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub intensity: Array2<f64>,
}

impl GrayImage {
    pub fn height(&self) -> usize {
        self.intensity.nrows()
    }

    pub fn width(&self) -> usize {
        self.intensity.ncols()
    }
}

pub fn to_grayscale(frame: &ImageFrame) -> GrayImage {
    let intensity = Array2::from_shape_fn((frame.height, frame.width), |(y, x)| {
        let v = if frame.channels == 1 {
            f64::from(frame.pixel(y, x, 0)) / 255.0
        } else {
            let r = f64::from(frame.pixel(y, x, 0));
            let g = f64::from(frame.pixel(y, x, 1));
            let b = f64::from(frame.pixel(y, x, 2));
            (LUMA_R * r + LUMA_G * g + LUMA_B * b) / 255.0
        };
        v.clamp(0.0, 1.0)
    });
    GrayImage { intensity }
}

/// Seeded linear patch embedding plus the two special-token sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub seed: u64,
    /// `(patch_size² · channels) × embed_dim`.
    pub projection: Array2<f64>,
    /// Specials of the first frame, which anchors the world frame.
    pub first_specials: Array2<f64>,
    /// Specials shared by every later frame.
    pub shared_specials: Array2<f64>,
}

impl TokenizerParams {
    pub fn new(
        patch_size: usize,
        embed_dim: usize,
        channels: usize,
        num_specials: usize,
        seed: u64,
    ) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be positive".into()));
        }
        if embed_dim < 8 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be at least 8, got {embed_dim}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let in_dim = patch_size * patch_size * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (in_dim as f64).sqrt();
        let projection = random_normal(&mut rng, in_dim, embed_dim, std);
        let first_specials = random_normal(&mut rng, num_specials, embed_dim, 1.0);
        let shared_specials = random_normal(&mut rng, num_specials, embed_dim, 1.0);
        Ok(Self {
            patch_size,
            embed_dim,
            channels,
            seed,
            projection,
            first_specials,
            shared_specials,
        })
    }

    pub fn num_specials(&self) -> usize {
        self.first_specials.nrows()
    }

    pub fn specials_for(&self, frame_index: usize) -> &Array2<f64> {
        if frame_index == 0 {
            &self.first_specials
        } else {
            &self.shared_specials
        }
    }
}

pub(crate) fn random_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Patch tokens of one frame on its `grid_h × grid_w` lattice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub specials: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_index: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }
}

pub fn tokenize(frame: &ImageFrame, params: &TokenizerParams) -> Result<TokenGrid> {
    frame.check_divisible(params.patch_size)?;
    if frame.channels != params.channels {
        return Err(Error::shape(
            format!("{} channels", params.channels),
            format!("{} channels", frame.channels),
        ));
    }
    let p = params.patch_size;
    let c = frame.channels;
    let grid_h = frame.height / p;
    let grid_w = frame.width / p;
    let patch_len = p * p * c;
    let mut patches = Array2::<f64>::zeros((grid_h * grid_w, patch_len));
    for (t, mut row) in patches.rows_mut().into_iter().enumerate() {
        let (gr, gc) = (t / grid_w, t % grid_w);
        let mut k = 0;
        for dy in 0..p {
            let y = gr * p + dy;
            let start = (y * frame.width + gc * p) * c;
            for &v in &frame.pixels[start..start + p * c] {
                row[k] = f64::from(v) / 255.0;
                k += 1;
            }
        }
    }
    let tokens = patches.dot(&params.projection);
    Ok(TokenGrid {
        tokens,
        specials: params.specials_for(frame.frame_index).clone(),
        grid_h,
        grid_w,
        frame_index: frame.frame_index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Checker,
    Ramp,
    Flat,
    /// Checkerboard on the left half, flat on the right half.
    Mixed,
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "checker" => Ok(Texture::Checker),
            "ramp" => Ok(Texture::Ramp),
            "flat" => Ok(Texture::Flat),
            "mixed" => Ok(Texture::Mixed),
            other => Err(Error::InvalidConfig(format!("unknown texture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub overlap_shift_px: usize,
    pub texture: Texture,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_frames: 8,
            height: 112,
            width: 112,
            overlap_shift_px: 7,
            texture: Texture::Mixed,
        }
    }
}

/// Renders `spec.n_frames` RGB frames. Frame `k` is frame 0 translated left by
/// `k · overlap_shift_px` pixels with wrap-around, so consecutive frames share
/// most of their content.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<ImageFrame>> {
    let SceneSpec {
        n_frames,
        height,
        width,
        overlap_shift_px: shift,
        texture,
    } = *spec;
    if n_frames == 0 {
        return Err(Error::InfeasibleScene("n_frames must be at least 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::InfeasibleScene("empty frame".into()));
    }
    if shift * (n_frames - 1) >= width {
        return Err(Error::InfeasibleScene(format!(
            "shift {shift} over {n_frames} frames exceeds width {width}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light: [u8; 3] = std::array::from_fn(|_| rng.random_range(170..=255));
    let dark: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..=80));
    let flat: [u8; 3] = std::array::from_fn(|_| rng.random_range(60..=200));

    let base = |y: usize, x: usize| -> [u8; 3] {
        let checker = || {
            if ((y / CHECKER_BLOCK) + (x / CHECKER_BLOCK)).is_multiple_of(2) {
                light
            } else {
                dark
            }
        };
        match texture {
            Texture::Checker => checker(),
            Texture::Flat => flat,
            Texture::Ramp => {
                let v = if width > 1 {
                    (255.0 * x as f64 / (width - 1) as f64).round() as u8
                } else {
                    0
                };
                [v, v, v]
            }
            Texture::Mixed => {
                if x < width / 2 {
                    checker()
                } else {
                    flat
                }
            }
        }
    };

    let mut frame0 = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            frame0.extend_from_slice(&base(y, x));
        }
    }

    (0..n_frames)
        .map(|k| {
            let offset = (k * shift) % width;
            let mut pixels = Vec::with_capacity(frame0.len());
            for y in 0..height {
                for x in 0..width {
                    let sx = (x + offset) % width;
                    let i = (y * width + sx) * 3;
                    pixels.extend_from_slice(&frame0[i..i + 3]);
                }
            }
            ImageFrame::new(height, width, 3, pixels, k)
        })
        .collect()
}
