use std::fs;
use std::path::Path;

use super::augment::resize_region;
use super::image::Image;
use super::{DataSource, Dataset};
use crate::error::{Error, Result};

/// Loads `path/<class>/<image>` files (PNG or binary PPM), resized to
/// `side x side` RGB with values in `[0, 1]`.
///
/// Classes are the subdirectories in lexicographic order. Files that fail to
/// decode are skipped with a warning; a class without any usable image is an
/// error.
pub fn load_directory(path: &Path, side: usize) -> Result<(Dataset, Vec<String>)> {
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let mut classes: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    classes.sort_by_key(|e| e.file_name());
    if classes.is_empty() {
        return Err(Error::invalid(format!("{} has no class subdirectories", path.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = class.path();
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = images.len();
        for file in files {
            match decode(&file, side) {
                Ok(img) => {
                    images.push(img);
                    labels.push(label);
                }
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
        let name = class.file_name().to_string_lossy().into_owned();
        if images.len() == before {
            return Err(Error::invalid(format!("class '{name}' in {} has no readable images", path.display())));
        }
        names.push(name);
    }
    let source = DataSource::Directory { path: path.to_path_buf(), side };
    Ok((Dataset::new(images, labels, names.len(), source)?, names))
}

fn decode(file: &Path, side: usize) -> std::result::Result<Image, String> {
    let rgb = image::open(file).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    let mut img = Image::zeros(h, w, 3);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
        }
    }
    if (h, w) == (side, side) {
        return Ok(img);
    }
    Ok(resize_region(&img, 0, 0, h, w, side, side))
}
