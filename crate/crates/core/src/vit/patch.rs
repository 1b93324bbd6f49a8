use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Splits an image into a `⌊H/patch⌋ x ⌊W/patch⌋` grid of flattened patches.
///
/// Patches are ordered row-major over the grid; each patch vector is
/// channel-major (`c, y, x`). Rows and columns beyond the last full patch are
/// cropped.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor<f32>> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if patch > image.height().min(image.width()) {
        return Err(Error::invalid(format!(
            "patch {patch} larger than image {}x{}",
            image.height(),
            image.width()
        )));
    }
    let (gh, gw, ch) = (image.height() / patch, image.width() / patch, image.channels());
    let dim = patch * patch * ch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..ch {
                for y in 0..patch {
                    let row = gy * patch + y;
                    for x in 0..patch {
                        data.push(image.get(c, row, gx * patch + x));
                    }
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], data)
}
