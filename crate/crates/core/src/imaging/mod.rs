//! Raster handling: the RGB image buffer, the sliding-window grid, crops,
//! bicubic resizing and mean-subtraction preprocessing.

mod grid;
mod resize;

pub use grid::{axis_positions, generate_windows, TileGrid};
pub use resize::{cubic_weight, resize};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An 8-bit RGB raster, row-major, three interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Image with every pixel set to `rgb`.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(width, height, pixels)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn as_raw_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    /// Size of the pixel payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// One row of interleaved RGB bytes.
    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * 3;
        let start = y as usize * stride;
        &self.pixels[start..start + stride]
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Loads a PNG or JPEG file, converting to RGB. No size limit is applied;
    /// orthomosaics routinely exceed the decoder's defaults.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = image::ImageReader::open(path.as_ref())?.with_guessed_format()?;
        reader.no_limits();
        let img = reader.decode()?;
        Ok(Self::from(img.into_rgb8()))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from(img.into_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path.as_ref(),
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }
}

impl From<image::RgbImage> for ImageBuffer {
    fn from(img: image::RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self {
            width,
            height,
            pixels: img.into_raw(),
        }
    }
}

/// Anything a square tile can be cut from: a whole image, or a horizontal strip
/// of one held in memory while the rest is streamed.
pub trait TileSource: Sync {
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    fn crop(&self, x: i64, y: i64, size: u32) -> Result<ImageBuffer>;
}

impl TileSource for ImageBuffer {
    fn width(&self) -> u32 {
        self.width
    }

    fn height(&self) -> u32 {
        self.height
    }

    fn crop(&self, x: i64, y: i64, size: u32) -> Result<ImageBuffer> {
        extract_crop(self, x, y, size)
    }
}

/// Copies the `size`×`size` window whose top-left corner is `(x, y)`.
pub fn extract_crop(image: &ImageBuffer, x: i64, y: i64, size: u32) -> Result<ImageBuffer> {
    check_window(image.width, image.height, x, y, size)?;
    let (x, y) = (x as usize, y as usize);
    let side = size as usize;
    let stride = image.width as usize * 3;
    let mut pixels = Vec::with_capacity(side * side * 3);
    for row in y..y + side {
        let start = row * stride + x * 3;
        pixels.extend_from_slice(&image.pixels[start..start + side * 3]);
    }
    ImageBuffer::new(size, size, pixels)
}

pub(crate) fn check_window(width: u32, height: u32, x: i64, y: i64, size: u32) -> Result<()> {
    let fits = size >= 1
        && x >= 0
        && y >= 0
        && x + size as i64 <= width as i64
        && y + size as i64 <= height as i64;
    if fits {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            x,
            y,
            size,
            width,
            height,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

impl ChannelOrder {
    /// Source channel index for each output slot.
    fn source_indices(self) -> [usize; 3] {
        match self {
            ChannelOrder::Rgb => [0, 1, 2],
            ChannelOrder::Bgr => [2, 1, 0],
        }
    }
}

/// ImageNet training-set channel means, RGB order.
pub const IMAGENET_MEANS_RGB: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_tile_size: u32,
    /// Means subtracted per channel, given in the backend's channel order.
    pub channel_means: [f32; 3],
    pub channel_order: ChannelOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_tile_size: 224,
            channel_means: IMAGENET_MEANS_RGB,
            channel_order: ChannelOrder::Rgb,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_tile_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "tile size must be at least 8, got {}",
                self.target_tile_size
            )));
        }
        Ok(())
    }
}

/// A preprocessed tile: `size`×`size`×3 reals, height-width-channel order,
/// channels already permuted into the backend's order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTensor {
    size: u32,
    data: Vec<f32>,
}

impl TileTensor {
    pub fn new(size: u32, data: Vec<f32>) -> Result<Self> {
        let expected = size as usize * size as usize * 3;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "{size}x{size}x3 tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Subtracts the per-channel means after reordering channels for the backend.
pub fn preprocess(image: &ImageBuffer, config: &PreprocessConfig) -> Result<TileTensor> {
    config.validate()?;
    let size = config.target_tile_size;
    if image.width != size || image.height != size {
        return Err(Error::Dimension(format!(
            "preprocess expects a {size}x{size} tile, got {}x{}",
            image.width, image.height
        )));
    }
    let order = config.channel_order.source_indices();
    let means = config.channel_means;
    let mut data = Vec::with_capacity(image.pixels.len());
    for px in image.pixels.chunks_exact(3) {
        for (slot, &src) in order.iter().enumerate() {
            data.push(px[src] as f32 - means[slot]);
        }
    }
    TileTensor::new(size, data)
}

/// Crop, resize to the backend tile size and preprocess in one step, so only the
/// final tensor outlives the call.
pub fn prepare_tile(
    source: &dyn TileSource,
    x: u32,
    y: u32,
    window: u32,
    config: &PreprocessConfig,
) -> Result<TileTensor> {
    let crop = source.crop(x as i64, y as i64, window)?;
    if window == config.target_tile_size {
        preprocess(&crop, config)
    } else {
        let resized = resize(&crop, config.target_tile_size)?;
        drop(crop);
        preprocess(&resized, config)
    }
}
