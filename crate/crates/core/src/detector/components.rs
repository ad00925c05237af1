use super::mask::{BBox, ClassMask};

struct Run {
    start: u32,
    end: u32,
    y: u32,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Tight bounding boxes of the 8-connected components of `mask`, sorted by
/// `(y, x)`.
///
/// Works on horizontal runs: two runs on adjacent rows touch (8-connected)
/// when their column ranges overlap after widening one of them by a pixel.
pub fn mask_to_bboxes(mask: &ClassMask) -> Vec<BBox> {
    let mut runs: Vec<Run> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut prev: std::ops::Range<usize> = 0..0;

    for y in 0..mask.height() {
        let row_start = runs.len();
        for (start, end) in mask.row_runs(y) {
            let id = runs.len();
            runs.push(Run { start, end, y });
            parent.push(id);
            // Runs in a row are sorted, so a moving cursor over the previous row suffices.
            for p in prev.clone() {
                let (ps, pe) = (runs[p].start, runs[p].end);
                if pe + 1 <= start {
                    continue;
                }
                if ps > end {
                    break;
                }
                union(&mut parent, id, p);
            }
        }
        prev = row_start..runs.len();
    }

    let mut boxes: Vec<Option<(u32, u32, u32, u32)>> = vec![None; runs.len()];
    for i in 0..runs.len() {
        let r = find(&mut parent, i);
        let run = &runs[i];
        let b = boxes[r].get_or_insert((run.start, run.y, run.end, run.y + 1));
        b.0 = b.0.min(run.start);
        b.1 = b.1.min(run.y);
        b.2 = b.2.max(run.end);
        b.3 = b.3.max(run.y + 1);
    }
    let mut out: Vec<BBox> = boxes
        .into_iter()
        .flatten()
        .map(|(x0, y0, x1, y1)| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
        .collect();
    out.sort_by_key(|b| (b.y, b.x, b.w, b.h));
    out
}
