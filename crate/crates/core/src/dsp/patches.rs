//! Non-overlapping raster patches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Spec,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Spec => "spec",
        }
    }
}

/// Patches in frame-major, then row-major order.
///
/// Each patch is flattened as `(row, col, channel)` with channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `N × (patch_h · patch_w · channels)`.
    pub patches: Tensor,
    /// `[frames, rows, cols]`; `frames` is 1 for 2-D inputs.
    pub grid_shape: [usize; 3],
    pub patch: (usize, usize),
    pub channels: usize,
    /// Top-left corner of the center crop inside the original grid.
    pub crop_origin: (usize, usize),
    pub modality: Modality,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Cropped input as `[frames, H, W, C]`.
    pub fn reassemble(&self) -> Tensor {
        let [f, gh, gw] = self.grid_shape;
        let (ph, pw) = self.patch;
        let c = self.channels;
        let (h, w) = (gh * ph, gw * pw);
        let mut out = vec![0.0; f * h * w * c];
        let pd = self.patch_dim();
        for (n, patch) in self.patches.data().chunks_exact(pd).enumerate() {
            let (fi, rest) = (n / (gh * gw), n % (gh * gw));
            let (r0, c0) = ((rest / gw) * ph, (rest % gw) * pw);
            for i in 0..ph {
                let dst = ((fi * h + r0 + i) * w + c0) * c;
                out[dst..dst + pw * c].copy_from_slice(&patch[i * pw * c..(i + 1) * pw * c]);
            }
        }
        Tensor::from_parts(vec![f, h, w, c], out)
    }
}

/// Patches from a `[H, W]`, `[H, W, C]` or `[F, H, W, C]` grid.
///
/// Extents not divisible by the patch are center-cropped.
pub fn extract_patches(
    grid: &Tensor,
    patch_h: usize,
    patch_w: usize,
    modality: Modality,
) -> Result<PatchSequence> {
    let (f, h, w, c) = match *grid.shape() {
        [h, w] => (1, h, w, 1),
        [h, w, c] => (1, h, w, c),
        [f, h, w, c] => (f, h, w, c),
        _ => {
            return Err(Error::invalid(
                "extract_patches",
                format!("expected rank 2, 3 or 4 input, got shape {:?}", grid.shape()),
            ))
        }
    };
    if patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w {
        return Err(Error::shape(
            "extract_patches",
            &[patch_h, patch_w],
            &[h, w],
        ));
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let (oy, ox) = ((h - gh * patch_h) / 2, (w - gw * patch_w) / 2);
    let pd = patch_h * patch_w * c;
    let n = f * gh * gw;
    let mut data = Vec::with_capacity(n * pd);
    let src = grid.data();
    for fi in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                for i in 0..patch_h {
                    let row = oy + gy * patch_h + i;
                    let start = ((fi * h + row) * w + ox + gx * patch_w) * c;
                    data.extend_from_slice(&src[start..start + patch_w * c]);
                }
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::from_parts(vec![n, pd], data),
        grid_shape: [f, gh, gw],
        patch: (patch_h, patch_w),
        channels: c,
        crop_origin: (oy, ox),
        modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_token_counts() {
        let video = Tensor::zeros(&[8, 224, 224, 3]);
        let p = extract_patches(&video, 16, 16, Modality::Rgb).unwrap();
        assert_eq!(p.len(), 1568);
        assert_eq!(p.patch_dim(), 768);
        let spec = Tensor::zeros(&[128, 800]);
        let p = extract_patches(&spec, 16, 16, Modality::Spec).unwrap();
        assert_eq!(p.len(), 400);
        assert_eq!(p.grid_shape, [1, 8, 50]);
    }

    #[test]
    fn single_patch_is_flattened_grid() {
        let g = Tensor::from_fn(&[16, 16], |i| i as f64);
        let p = extract_patches(&g, 16, 16, Modality::Spec).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.patches.data(), g.data());
    }

    #[test]
    fn raster_order() {
        // 4×4 grid, 2×2 patches: patch 1 is the top-right block.
        let g = Tensor::from_fn(&[4, 4], |i| i as f64);
        let p = extract_patches(&g, 2, 2, Modality::Spec).unwrap();
        assert_eq!(p.patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.patches.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn center_crop_and_reassemble() {
        let g = Tensor::from_fn(&[2, 7, 9, 3], |i| i as f64 * 0.5);
        let p = extract_patches(&g, 3, 4, Modality::Rgb).unwrap();
        assert_eq!(p.grid_shape, [2, 2, 2]);
        assert_eq!(p.crop_origin, (0, 0));
        let back = p.reassemble();
        assert_eq!(back.shape(), &[2, 6, 8, 3]);
        for f in 0..2 {
            for y in 0..6 {
                for x in 0..8 {
                    for c in 0..3 {
                        assert_eq!(back.at(&[f, y, x, c]), g.at(&[f, y, x, c]));
                    }
                }
            }
        }
        let g = Tensor::from_fn(&[10, 10], |i| i as f64);
        let p = extract_patches(&g, 4, 4, Modality::Spec).unwrap();
        assert_eq!(p.crop_origin, (1, 1));
        assert_eq!(p.patches.at(&[0, 0]), g.at(&[1, 1]));
    }

    #[test]
    fn oversize_patch_rejected() {
        let g = Tensor::zeros(&[8, 8]);
        assert!(extract_patches(&g, 9, 4, Modality::Spec).is_err());
    }
}
