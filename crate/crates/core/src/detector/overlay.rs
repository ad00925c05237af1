use super::mask::BBox;
use crate::imaging::ImageBuffer;

pub const RED: [u8; 3] = [255, 0, 0];

/// Recolors, in one RGB row at height `y`, the outline band of every box.
///
/// The band lies inside the box: pixels less than `stroke` away from its edge.
/// Boxes are drawn in list order, so later ones win where bands cross.
pub fn overlay_row(row: &mut [u8], y: u32, boxes: &[BBox], color: [u8; 3], stroke: u32) {
    let width = (row.len() / 3) as u32;
    let mut paint = |x0: u32, x1: u32| {
        for x in x0..x1.min(width) {
            row[x as usize * 3..x as usize * 3 + 3].copy_from_slice(&color);
        }
    };
    for b in boxes {
        if y < b.y || y >= b.y + b.h || b.w == 0 {
            continue;
        }
        let s_h = stroke.min(b.w);
        let s_v = stroke.min(b.h);
        if y < b.y + s_v || y >= b.y + b.h - s_v {
            paint(b.x, b.x + b.w);
        } else {
            paint(b.x, b.x + s_h);
            paint(b.x + b.w - s_h, b.x + b.w);
        }
    }
}

/// Copy of `image` with each box outlined.
pub fn render_overlay(
    image: &ImageBuffer,
    boxes: &[BBox],
    color: [u8; 3],
    stroke: u32,
) -> ImageBuffer {
    let mut out = image.clone();
    let (w, h) = (image.width() as usize, image.height());
    let stride = w * 3;
    for y in 0..h {
        let row = &mut out.as_raw_mut()[y as usize * stride..(y as usize + 1) * stride];
        overlay_row(row, y, boxes, color, stroke);
    }
    out
}
