//! Datasets laid out as one folder per class, resizing into per-size
//! variants (`folder_64`, `folder_96`, ...), and a synthetic stand-in for
//! the gesture photographs.

mod codec;
mod synth;

pub use codec::{decode_image, encode_image};
pub use synth::{synthesize, Nuisance, SynthConfig, GESTURE_NAMES};

use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// 8-bit RGB image stored row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image extents must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Images with class indices. All images share one extent.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    items: Vec<(Image, usize)>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(items: Vec<(Image, usize)>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::config("dataset has no classes"));
        }
        if let Some((first, _)) = items.first() {
            let ext = (first.width(), first.height());
            if let Some((img, _)) = items.iter().find(|(i, _)| (i.width(), i.height()) != ext) {
                return Err(Error::config(format!(
                    "mixed image extents: {}x{} and {}x{}",
                    ext.0,
                    ext.1,
                    img.width(),
                    img.height()
                )));
            }
        }
        if let Some((_, c)) = items.iter().find(|(_, c)| *c >= class_names.len()) {
            return Err(Error::config(format!(
                "class index {c} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(LabeledDataset { items, class_names })
    }

    pub fn items(&self) -> &[(Image, usize)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(width, height)` of the images, if any.
    pub fn extent(&self) -> Option<(usize, usize)> {
        self.items.first().map(|(i, _)| (i.width(), i.height()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for (_, c) in &self.items {
            counts[*c] += 1;
        }
        counts
    }

    /// New dataset holding the items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Every image resized to `size x size`.
    pub fn resized(&self, size: usize) -> LabeledDataset {
        LabeledDataset {
            items: self
                .items
                .iter()
                .map(|(img, c)| (resize(img, size), *c))
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Writes `<root>/<class>/<NNNNN>.ppm` for every item.
    pub fn write_class_folders(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, (img, c)) in self.items.iter().enumerate() {
            let path = root.join(&self.class_names[*c]).join(format!("{i:05}.ppm"));
            fs::write(&path, encode_image(img)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Bilinear resize to `size x size`.
pub fn resize(img: &Image, size: usize) -> Image {
    resize_to(img, size, size)
}

/// Bilinear resize with pixel-centre sampling (`align_corners = false`):
/// output pixel `x` samples source coordinate `(x + 0.5) * sw / tw - 0.5`,
/// clamped to the image. Each output is a convex combination of at most
/// four source pixels, rounded to nearest.
pub fn resize_to(img: &Image, width: usize, height: usize) -> Image {
    assert!(width > 0 && height > 0, "resize target must be positive");
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(width, img.width);
    let ys = axis(height, img.height);
    let mut out = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (p00, p01, p10, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = (1.0 - fx) * p00[ch] as f64 + fx * p01[ch] as f64;
                let bottom = (1.0 - fx) * p10[ch] as f64 + fx * p11[ch] as f64;
                let v = (1.0 - fy) * top + fy * bottom;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image {
        width,
        height,
        data: out,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Class folders under `root` (sorted by name) with their files (sorted).
pub fn scan_class_files(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let mut classes = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::config(format!("class folder {} is not UTF-8", entry.display())))?
            .to_string();
        let files: Vec<PathBuf> = sorted_entries(&entry)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::config(format!("class folder '{name}' is empty")));
        }
        classes.push((name, files));
    }
    if classes.is_empty() {
        return Err(Error::config(format!("no class folders under {}", root.display())));
    }
    Ok(classes)
}

fn decode_or_skip(path: &Path) -> Result<Option<Image>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_image(&bytes) {
        Ok(img) => Ok(Some(img)),
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            Ok(None)
        }
    }
}

/// Loads a one-folder-per-class tree. Class names are the sorted folder
/// names; files load in lexicographic order. Undecodable files are skipped
/// with a warning.
pub fn scan_class_folders(root: impl AsRef<Path>) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let classes = scan_class_files(root)?;
    let mut items = Vec::new();
    let mut names = Vec::with_capacity(classes.len());
    for (idx, (name, files)) in classes.into_iter().enumerate() {
        let before = items.len();
        for f in files {
            if let Some(img) = decode_or_skip(&f)? {
                items.push((img, idx));
            }
        }
        if items.len() == before {
            return Err(Error::config(format!("class '{name}' has no decodable images")));
        }
        names.push(name);
    }
    LabeledDataset::new(items, names)
}

/// For every size, writes `<out>/folder_<size>/<class>/<stem>.ppm` holding
/// the source image resized to `size x size`. Returns the created roots.
pub fn build_size_variants(
    source: impl AsRef<Path>,
    out: impl AsRef<Path>,
    sizes: &[usize],
) -> Result<Vec<PathBuf>> {
    let (source, out) = (source.as_ref(), out.as_ref());
    if sizes.contains(&0) {
        return Err(Error::config("target size must be positive"));
    }
    let classes = scan_class_files(source)?;
    let roots: Vec<PathBuf> = sizes.iter().map(|s| out.join(format!("folder_{s}"))).collect();
    for (name, files) in &classes {
        for root in &roots {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut written = 0;
        for f in files {
            let Some(img) = decode_or_skip(f)? else { continue };
            let stem = f
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::config(format!("bad file name {}", f.display())))?;
            for (&size, root) in sizes.iter().zip(&roots) {
                let path = root.join(name).join(format!("{stem}.ppm"));
                fs::write(&path, encode_image(&resize(&img, size))).map_err(|e| Error::io(&path, e))?;
            }
            written += 1;
        }
        if written == 0 {
            return Err(Error::config(format!("class '{name}' has no decodable images")));
        }
    }
    Ok(roots)
}
