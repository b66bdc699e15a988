//! MVTec-AD style directory datasets.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect_type>/*.png        (good = normal)
//! <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::INPUT_SIZE;
use crate::image::{load_mask_png, resize_mask, RgbImage};
use crate::math::Grid2D;

pub const NORMAL_DIR: &str = "good";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestItem {
    /// `<category>/<defect_type>/<stem>`.
    pub id: String,
    pub path: PathBuf,
    pub defect_type: String,
    pub is_anomalous: bool,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryData {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub root: PathBuf,
    pub categories: Vec<CategoryData>,
}

impl LabeledDataset {
    pub fn category(&self, name: &str) -> Option<&CategoryData> {
        self.categories.iter().find(|c| c.name == name)
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(bad(path, "expected directory is missing"))
    }
}

/// Sorted visible subdirectories.
fn subdirs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if p.is_dir() && !name.starts_with('.') {
            out.push((name, p));
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted `*.png` files.
fn pngs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_category(name: &str, dir: &Path) -> Result<CategoryData> {
    let train_dir = dir.join("train").join(NORMAL_DIR);
    require_dir(&train_dir)?;
    let train = pngs(&train_dir)?;
    if train.is_empty() {
        return Err(bad(&train_dir, "no training images"));
    }
    let test_dir = dir.join("test");
    require_dir(&test_dir)?;
    let mut test = Vec::new();
    for (defect, ddir) in subdirs(&test_dir)? {
        let is_anomalous = defect != NORMAL_DIR;
        let gt_dir = dir.join("ground_truth").join(&defect);
        if is_anomalous {
            require_dir(&gt_dir)?;
        }
        for path in pngs(&ddir)? {
            let s = stem(&path);
            let mask_path = if is_anomalous {
                let m = gt_dir.join(format!("{s}_mask.png"));
                if !m.is_file() {
                    return Err(bad(&m, format!("missing mask for {}", path.display())));
                }
                Some(m)
            } else {
                None
            };
            test.push(TestItem {
                id: format!("{name}/{defect}/{s}"),
                path,
                defect_type: defect.clone(),
                is_anomalous,
                mask_path,
            });
        }
    }
    if test.is_empty() {
        return Err(bad(&test_dir, "no test images"));
    }
    Ok(CategoryData {
        name: name.to_string(),
        train,
        test,
    })
}

/// Reads the directory tree; images are loaded later, on demand. Every
/// visible subdirectory of `root` is a category.
pub fn load_mvtec_layout(root: &Path) -> Result<LabeledDataset> {
    require_dir(root)?;
    let categories = subdirs(root)?
        .into_iter()
        .map(|(name, dir)| load_category(&name, &dir))
        .collect::<Result<Vec<_>>>()?;
    if categories.is_empty() {
        return Err(bad(root, "no category directories"));
    }
    Ok(LabeledDataset {
        root: root.to_path_buf(),
        categories,
    })
}

/// Loads an image at the model input resolution.
pub fn load_input_image(path: &Path) -> Result<RgbImage> {
    let img = RgbImage::load_png(path)?;
    if img.dims() == (INPUT_SIZE, INPUT_SIZE) {
        Ok(img)
    } else {
        img.resize(INPUT_SIZE, INPUT_SIZE)
    }
}

/// Image and ground-truth mask at input resolution (all-zero mask for
/// normal items). The mask must match the original image size.
pub fn load_test_item(item: &TestItem) -> Result<(RgbImage, Grid2D)> {
    let img = RgbImage::load_png(&item.path)?;
    let mask = match &item.mask_path {
        Some(p) => {
            let m = load_mask_png(p)?;
            if m.dims() != img.dims() {
                return Err(bad(
                    p,
                    format!("mask is {:?} but image is {:?}", m.dims(), img.dims()),
                ));
            }
            resize_mask(&m, INPUT_SIZE, INPUT_SIZE)
        }
        None => Grid2D::zeros(INPUT_SIZE, INPUT_SIZE),
    };
    let img = if img.dims() == (INPUT_SIZE, INPUT_SIZE) {
        img
    } else {
        img.resize(INPUT_SIZE, INPUT_SIZE)?
    };
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_mask_png;

    fn fixture(root: &Path) {
        let img = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let mask = Grid2D::from_fn(16, 16, |r, _| (r < 4) as u8 as f64);
        for cat in ["alpha", "beta"] {
            let d = root.join(cat);
            fs::create_dir_all(d.join("train/good")).unwrap();
            fs::create_dir_all(d.join("test/good")).unwrap();
            fs::create_dir_all(d.join("test/crack")).unwrap();
            fs::create_dir_all(d.join("ground_truth/crack")).unwrap();
            for i in 0..3 {
                img.save_png(&d.join(format!("train/good/{i:03}.png"))).unwrap();
            }
            for i in 0..2 {
                img.save_png(&d.join(format!("test/good/{i:03}.png"))).unwrap();
                img.save_png(&d.join(format!("test/crack/{i:03}.png"))).unwrap();
                save_mask_png(&mask, &d.join(format!("ground_truth/crack/{i:03}_mask.png"))).unwrap();
            }
        }
        fs::write(root.join("readme.txt"), "not a category").unwrap();
    }

    #[test]
    fn loads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_mvtec_layout(dir.path()).unwrap();
        assert_eq!(ds.categories.len(), 2);
        for c in &ds.categories {
            assert_eq!(c.train.len(), 3);
            assert_eq!(c.test.len(), 4);
            assert_eq!(c.test.iter().filter(|t| t.is_anomalous).count(), 2);
            for t in &c.test {
                assert_eq!(t.is_anomalous, t.defect_type != "good");
                assert_eq!(t.mask_path.is_some(), t.is_anomalous);
            }
        }
        let crack = ds.category("beta").unwrap().test.iter().find(|t| t.is_anomalous).unwrap();
        assert_eq!(crack.id, "beta/crack/000");
        let (img, mask) = load_test_item(crack).unwrap();
        assert_eq!(img.dims(), (INPUT_SIZE, INPUT_SIZE));
        assert_eq!(mask.dims(), (INPUT_SIZE, INPUT_SIZE));
        assert_eq!(mask.get(0, 100), 1.0);
        assert_eq!(mask.get(200, 100), 0.0);
    }

    #[test]
    fn names_the_missing_ground_truth_dir() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let gt = dir.path().join("alpha/ground_truth/crack");
        fs::remove_dir_all(&gt).unwrap();
        match load_mvtec_layout(dir.path()) {
            Err(Error::Dataset { path, .. }) => assert_eq!(path, gt),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn names_the_missing_mask_file() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let m = dir.path().join("beta/ground_truth/crack/001_mask.png");
        fs::remove_file(&m).unwrap();
        let err = load_mvtec_layout(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Dataset { path, .. } if *path == m));
        assert!(err.to_string().contains("001.png"));
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_mvtec_layout(&dir.path().join("nope")).is_err());
        assert!(load_mvtec_layout(dir.path()).is_err());
        fs::create_dir_all(dir.path().join("gamma/test/good")).unwrap();
        let err = load_mvtec_layout(dir.path()).unwrap_err();
        assert!(err.to_string().contains("train"));
    }

    #[test]
    fn mismatched_mask_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let m = dir.path().join("alpha/ground_truth/crack/000_mask.png");
        save_mask_png(&Grid2D::zeros(8, 8), &m).unwrap();
        let ds = load_mvtec_layout(dir.path()).unwrap();
        let item = ds.categories[0].test.iter().find(|t| t.mask_path.as_deref() == Some(&m)).unwrap();
        assert!(load_test_item(item).is_err());
    }
}
