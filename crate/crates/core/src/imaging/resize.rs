use super::ImageBuffer;
use crate::error::{Error, Result};

/// Keys cubic convolution parameter (Catmull-Rom).
const CUBIC_A: f32 = -0.5;

/// The cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f32) -> f32 {
    let t = t.abs();
    let a = CUBIC_A;
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four source taps and weights per destination coordinate. Pixel centers are
/// aligned (`src = (dst + 0.5) * scale - 0.5`) and borders are replicated.
fn taps(src_len: u32, dst_len: u32) -> Vec<([usize; 4], [f32; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    let max = src_len as i64 - 1;
    (0..dst_len)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = (s - base) as f32;
            let base = base as i64;
            let mut idx = [0usize; 4];
            let mut w = [0f32; 4];
            for k in 0..4 {
                idx[k] = (base + k as i64 - 1).clamp(0, max) as usize;
                w[k] = cubic_weight(frac - (k as f32 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resize to a `target`×`target` square.
pub fn resize(image: &ImageBuffer, target: u32) -> Result<ImageBuffer> {
    if target == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let (sw, sh) = (image.width(), image.height());
    if sw == target && sh == target {
        return Ok(image.clone());
    }
    let src = image.as_raw();
    let dst_w = target as usize;
    let xt = taps(sw, target);
    let yt = taps(sh, target);

    // Horizontal pass into a float buffer of sh rows × target columns.
    let mut horiz = vec![0f32; sh as usize * dst_w * 3];
    for y in 0..sh as usize {
        let row = &src[y * sw as usize * 3..(y + 1) * sw as usize * 3];
        let out = &mut horiz[y * dst_w * 3..(y + 1) * dst_w * 3];
        for (dx, (idx, w)) in xt.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0f32;
                for k in 0..4 {
                    acc += w[k] * row[idx[k] * 3 + c] as f32;
                }
                out[dx * 3 + c] = acc;
            }
        }
    }

    let mut pixels = vec![0u8; dst_w * dst_w * 3];
    let stride = dst_w * 3;
    for (dy, (idx, w)) in yt.iter().enumerate() {
        let out = &mut pixels[dy * stride..(dy + 1) * stride];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0f32;
            for k in 0..4 {
                acc += w[k] * horiz[idx[k] * stride + i];
            }
            *o = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageBuffer::new(target, target, pixels)
}
