//! Detection over images too large to hold in memory.
//!
//! Rows are pulled from a [`RowSource`] into a strip exactly one window tall.
//! The strip slides down the grid rows, so resident pixels never exceed
//! `window × width × 3` bytes plus one batch of tiles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::mask::BBox;
use super::overlay::overlay_row;
use super::{
    check_compatible, classify_windows, physical_window, DetectionConfig, DetectionResult,
};
use crate::backend::FeatureBackend;
use crate::error::{Error, Result};
use crate::imaging::{check_window, generate_windows, ImageBuffer, TileSource};
use crate::trainer::LogRegModel;

/// Sequential top-to-bottom access to 8-bit RGB rows.
pub trait RowSource {
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    /// Fills `row` (`width × 3` bytes) with the next row.
    fn read_row(&mut self, row: &mut [u8]) -> Result<()>;
}

/// Rows decoded one at a time from a non-interlaced PNG.
pub struct PngRowSource {
    reader: png::Reader<BufReader<File>>,
    width: u32,
    height: u32,
    color: png::ColorType,
}

fn png_decode_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(e) => Error::Io(e),
        other => Error::Format(other.to_string()),
    }
}

impl PngRowSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = BufReader::new(File::open(path.as_ref())?);
        let mut decoder = png::Decoder::new(file);
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let reader = decoder.read_info().map_err(png_decode_err)?;
        let info = reader.info();
        if info.interlaced {
            return Err(Error::Format("interlaced PNGs cannot be streamed".into()));
        }
        let (width, height) = (info.width, info.height);
        let (color, _) = reader.output_color_type();
        Ok(Self {
            reader,
            width,
            height,
            color,
        })
    }
}

impl RowSource for PngRowSource {
    fn width(&self) -> u32 {
        self.width
    }

    fn height(&self) -> u32 {
        self.height
    }

    fn read_row(&mut self, out: &mut [u8]) -> Result<()> {
        let color = self.color;
        let row = self
            .reader
            .next_row()
            .map_err(png_decode_err)?
            .ok_or_else(|| Error::Corrupt("PNG ended before its last row".into()))?;
        let data = row.data();
        let channels = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::Format("unexpanded palette".into())),
        };
        for (px, src) in out.chunks_exact_mut(3).zip(data.chunks_exact(channels)) {
            if channels < 3 {
                px.fill(src[0]);
            } else {
                px.copy_from_slice(&src[..3]);
            }
        }
        Ok(())
    }
}

/// Rows produced by a closure `f(y, row)`; handy for synthetic images.
pub struct FnRows<F> {
    width: u32,
    height: u32,
    next: u32,
    f: F,
}

impl<F: FnMut(u32, &mut [u8])> FnRows<F> {
    pub fn new(width: u32, height: u32, f: F) -> Self {
        Self {
            width,
            height,
            next: 0,
            f,
        }
    }
}

impl<F: FnMut(u32, &mut [u8])> RowSource for FnRows<F> {
    fn width(&self) -> u32 {
        self.width
    }

    fn height(&self) -> u32 {
        self.height
    }

    fn read_row(&mut self, row: &mut [u8]) -> Result<()> {
        if self.next >= self.height {
            return Err(Error::State("read past the last row".into()));
        }
        (self.f)(self.next, row);
        self.next += 1;
        Ok(())
    }
}

/// Rows `[top, top + rows)` of a taller image.
struct Strip {
    width: u32,
    height: u32,
    top: u32,
    rows: u32,
    data: Vec<u8>,
}

impl Strip {
    fn stride(&self) -> usize {
        self.width as usize * 3
    }

    /// Slides the strip so it starts at `top` and holds `rows` rows, reading
    /// whatever is missing from `source`. Only moves downward.
    fn advance(
        &mut self,
        source: &mut dyn RowSource,
        top: u32,
        rows: u32,
        next_row: &mut u32,
    ) -> Result<()> {
        let stride = self.stride();
        let keep = (self.top + self.rows).saturating_sub(top).min(self.rows);
        let drop = self.rows - keep;
        self.data
            .copy_within(drop as usize * stride..self.rows as usize * stride, 0);
        self.top = top;
        self.rows = keep;
        while *next_row < top {
            source.read_row(&mut self.data[..stride])?;
            *next_row += 1;
        }
        while self.rows < rows {
            let at = self.rows as usize * stride;
            source.read_row(&mut self.data[at..at + stride])?;
            *next_row += 1;
            self.rows += 1;
        }
        Ok(())
    }
}

impl TileSource for Strip {
    fn width(&self) -> u32 {
        self.width
    }

    fn height(&self) -> u32 {
        self.height
    }

    fn crop(&self, x: i64, y: i64, size: u32) -> Result<ImageBuffer> {
        check_window(self.width, self.height, x, y, size)?;
        if y < self.top as i64 || y + size as i64 > (self.top + self.rows) as i64 {
            return Err(Error::State(format!(
                "window at row {y} is outside the resident strip {}..{}",
                self.top,
                self.top + self.rows
            )));
        }
        let stride = self.stride();
        let side = size as usize * 3;
        let mut pixels = Vec::with_capacity(side * size as usize);
        for row in 0..size as usize {
            let start = (y as usize - self.top as usize + row) * stride + x as usize * 3;
            pixels.extend_from_slice(&self.data[start..start + side]);
        }
        ImageBuffer::new(size, size, pixels)
    }
}

/// Same result as [`super::detect`], reading the image once from top to bottom.
pub fn detect_streaming(
    source: &mut dyn RowSource,
    model: &LogRegModel,
    backend: &dyn FeatureBackend,
    config: &DetectionConfig,
) -> Result<DetectionResult> {
    config.validate(model.num_classes())?;
    check_compatible(model, backend)?;
    let (width, height) = (source.width(), source.height());
    let window = physical_window(model, width, height)?;
    let grid = generate_windows(width, height, window, config.step_fraction)?;
    let mut strip = Strip {
        width,
        height,
        top: 0,
        rows: 0,
        data: vec![0; window as usize * width as usize * 3],
    };
    let mut next_row = 0;
    let mut windows = Vec::with_capacity(grid.len());
    for &gy in grid.rows() {
        strip.advance(source, gy, window, &mut next_row)?;
        let positions: Vec<(u32, u32)> = grid.columns().iter().map(|&x| (x, gy)).collect();
        windows.extend(classify_windows(
            &strip,
            &positions,
            window,
            model,
            backend,
            config.batch_size,
        )?);
    }
    Ok(DetectionResult::from_windows(
        width,
        height,
        window,
        &model.label_names,
        config.confidence_threshold,
        windows,
    ))
}

/// Writes `source` with the boxes outlined to an RGB PNG, one row at a time.
pub fn overlay_streaming(
    source: &mut dyn RowSource,
    boxes: &[BBox],
    color: [u8; 3],
    stroke: u32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => Error::Io(e),
        other => Error::Format(other.to_string()),
    };
    let (width, height) = (source.width(), source.height());
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = png::Encoder::new(file, width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(err)?;
    let mut stream = writer.stream_writer().map_err(err)?;
    let mut row = vec![0u8; width as usize * 3];
    for y in 0..height {
        source.read_row(&mut row)?;
        overlay_row(&mut row, y, boxes, color, stroke);
        stream.write_all(&row)?;
    }
    stream.finish().map_err(err)?;
    Ok(())
}
