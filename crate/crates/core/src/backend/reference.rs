use rayon::prelude::*;

use super::{check_batch, BackendDescriptor, FeatureBackend, FeatureMatrix};
use crate::error::{Error, Result};
use crate::imaging::TileTensor;

/// Blocks per tile side.
pub const REFERENCE_BLOCKS: usize = 8;
/// 8 × 8 blocks × 3 channels × (mean, std).
pub const REFERENCE_DIM: usize = REFERENCE_BLOCKS * REFERENCE_BLOCKS * 3 * 2;

/// Block statistics as features.
///
/// Each channel of the tile is cut into an 8×8 grid of equal square blocks. A
/// block contributes, per channel, its mean followed by its population standard
/// deviation. Blocks are visited row-major; channels in tensor order within a
/// block. On a 224 px tile the blocks are 28 px wide.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    descriptor: BackendDescriptor,
}

impl ReferenceBackend {
    pub const NAME: &'static str = "reference";

    pub fn new(descriptor: BackendDescriptor) -> Result<Self> {
        if descriptor.output_dim != REFERENCE_DIM {
            return Err(Error::Descriptor {
                what: "reference backend output dim",
                expected: REFERENCE_DIM.to_string(),
                found: descriptor.output_dim.to_string(),
            });
        }
        if descriptor.input_size as usize % REFERENCE_BLOCKS != 0 {
            return Err(Error::Descriptor {
                what: "reference backend input size",
                expected: format!("a multiple of {REFERENCE_BLOCKS}"),
                found: descriptor.input_size.to_string(),
            });
        }
        Ok(Self { descriptor })
    }

    fn embed(&self, tile: &TileTensor, out: &mut [f32]) {
        let size = tile.size() as usize;
        let block = size / REFERENCE_BLOCKS;
        let n = (block * block) as f64;
        let data = tile.data();
        let mut k = 0;
        for by in 0..REFERENCE_BLOCKS {
            for bx in 0..REFERENCE_BLOCKS {
                let mut sum = [0f64; 3];
                let mut sq = [0f64; 3];
                for y in by * block..(by + 1) * block {
                    let row = &data[(y * size + bx * block) * 3..(y * size + (bx + 1) * block) * 3];
                    for px in row.chunks_exact(3) {
                        for c in 0..3 {
                            let v = px[c] as f64;
                            sum[c] += v;
                            sq[c] += v * v;
                        }
                    }
                }
                for c in 0..3 {
                    let mean = sum[c] / n;
                    let var = (sq[c] / n - mean * mean).max(0.0);
                    out[k] = mean as f32;
                    out[k + 1] = var.sqrt() as f32;
                    k += 2;
                }
            }
        }
    }
}

impl FeatureBackend for ReferenceBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn extract_features(&self, batch: &[TileTensor]) -> Result<FeatureMatrix> {
        check_batch(&self.descriptor, batch)?;
        let mut values = vec![0f32; batch.len() * REFERENCE_DIM];
        values
            .par_chunks_mut(REFERENCE_DIM)
            .zip(batch.par_iter())
            .for_each(|(out, tile)| self.embed(tile, out));
        FeatureMatrix::new(REFERENCE_DIM, values)
    }
}
