use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::overlay::{render_overlay, RED};
use super::DetectionResult;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

/// Files written for one detection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionOutputs {
    pub masks: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
    pub predictions: PathBuf,
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(e) => Error::Io(e),
        other => Error::Format(other.to_string()),
    }
}

/// Writes the mask as an 8-bit grayscale PNG (0 or 255), one row at a time.
pub fn write_mask_png(mask: &super::ClassMask, path: impl AsRef<Path>) -> Result<()> {
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = png::Encoder::new(file, mask.width(), mask.height());
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    let mut stream = writer.stream_writer().map_err(png_err)?;
    let mut row = vec![0u8; mask.width() as usize];
    for y in 0..mask.height() {
        mask.to_gray_row(y, &mut row);
        stream.write_all(&row)?;
    }
    stream.finish().map_err(png_err)?;
    Ok(())
}

/// `x,y,label,probability` for every window that stamped a mask.
pub fn write_predictions_csv(result: &DetectionResult, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "x,y,label,probability")?;
    for (win, class, p) in result.accepted() {
        writeln!(
            w,
            "{},{},{},{}",
            win.x, win.y, result.classes[class].label, p
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<label>_mask.png`, `<label>_out.png` for every class and
/// `predictions.csv` into `dir`. With `image` absent the overlays are skipped.
pub fn write_outputs(
    dir: impl AsRef<Path>,
    image: Option<&ImageBuffer>,
    result: &DetectionResult,
) -> Result<DetectionOutputs> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut outputs = DetectionOutputs {
        predictions: dir.join("predictions.csv"),
        ..Default::default()
    };
    for class in &result.classes {
        let mask_path = dir.join(format!("{}_mask.png", class.label));
        write_mask_png(&class.mask, &mask_path)?;
        outputs.masks.push(mask_path);
        if let Some(image) = image {
            let out_path = dir.join(format!("{}_out.png", class.label));
            render_overlay(image, &class.boxes, RED, 2).save_png(&out_path)?;
            outputs.overlays.push(out_path);
        }
    }
    write_predictions_csv(result, &outputs.predictions)?;
    Ok(outputs)
}
