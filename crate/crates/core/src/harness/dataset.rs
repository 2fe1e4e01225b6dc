use std::path::{Path, PathBuf};

use crate::classifier::LabeledImage;
use crate::error::{Error, Result};
use crate::image::Image;

/// A labelled image set read from a class-per-directory tree.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Directory names, sorted; the label of a class is its index here.
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledImage>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm")
    )
}

/// Loads PNG/PPM files from `root/<class>/`; labels follow the lexicographic
/// order of class directory names and files are visited in name order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let mut ds = Dataset {
        class_names: Vec::new(),
        samples: Vec::new(),
        paths: Vec::new(),
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class '{name}' has no images")));
        }
        for f in files {
            ds.samples.push(LabeledImage {
                image: Image::load(&f)?,
                label,
            });
            ds.paths.push(f);
        }
        ds.class_names.push(name);
    }
    Ok(ds)
}
