//! On-disk dataset layout.
//!
//! ```text
//! <root>/<class>/<split>/<defect>/rgb/<stem>.{png,ppm}
//! <root>/<class>/<split>/<defect>/xyz/<stem>.pgrid
//! <root>/<class>/<split>/<defect>/gt/<stem>.{png,pgm}     (optional)
//! ```
//!
//! `split` is `train` or `test`; the defect directory `good` holds normal samples.
//! Samples are ordered by path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloudGrid;
use crate::inference::TestSample;
use crate::io::images::{load_mask, load_rgb};
use crate::io::pointgrid::{read_point_grid, resize_point_grid};
use crate::training::ShotSample;
use crate::{ColorImage, Mask};

/// Default dataset root when `--data` is not given.
pub const DATA_ROOT_ENV: &str = "CLIP3D_DATA_ROOT";
pub const NORMAL_DEFECT: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub rgb: PathBuf,
    pub points: PathBuf,
    pub mask: Option<PathBuf>,
    pub class_name: String,
    pub split: Split,
    pub defect: String,
}

impl DatasetSample {
    pub fn is_anomalous(&self) -> bool {
        self.defect != NORMAL_DEFECT
    }

    pub fn name(&self) -> String {
        let stem = self
            .rgb
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}", self.defect, stem)
    }
}

pub fn data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::invalid(format!("no dataset root given and {DATA_ROOT_ENV} is unset")))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn with_any_extension(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// Lists the samples of one class and split.
pub fn discover(root: &Path, class_name: &str, split: Split) -> Result<Vec<DatasetSample>> {
    let split_dir = root.join(class_name).join(split.dir());
    let mut out = Vec::new();
    for defect_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect = defect_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rgb_dir = defect_dir.join("rgb");
        for rgb in sorted_entries(&rgb_dir)? {
            let ext = rgb.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("png" | "ppm")) {
                continue;
            }
            let stem = rgb
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let points = defect_dir.join("xyz").join(format!("{stem}.pgrid"));
            if !points.is_file() {
                return Err(Error::io(
                    &points,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "point grid for this image is missing"),
                ));
            }
            out.push(DatasetSample {
                mask: with_any_extension(&defect_dir.join("gt"), &stem, &["png", "pgm"]),
                rgb,
                points,
                class_name: class_name.to_string(),
                split,
                defect: defect.clone(),
            });
        }
    }
    Ok(out)
}

/// Image, point grid and optional mask, all resized to `size×size`.
pub fn load_sample(sample: &DatasetSample, size: usize) -> Result<(ColorImage, PointCloudGrid, Option<Mask>)> {
    let native = load_rgb(&sample.rgb, None)?;
    let cloud = read_point_grid(&sample.points)?;
    let (h, w, _) = native.dim();
    if (cloud.height(), cloud.width()) != (h, w) {
        return Err(Error::format(
            &sample.points,
            8,
            format!(
                "point grid is {}x{} but {} is {h}x{w}",
                cloud.height(),
                cloud.width(),
                sample.rgb.display()
            ),
        ));
    }
    let image = if (h, w) == (size, size) {
        native
    } else {
        load_rgb(&sample.rgb, Some((size, size)))?
    };
    let cloud = resize_point_grid(&cloud, size, size)?;
    let mask = sample
        .mask
        .as_deref()
        .map(|p| load_mask(p, Some((size, size))))
        .transpose()?;
    Ok((image, cloud, mask))
}

pub fn load_train(root: &Path, class_name: &str, size: usize) -> Result<Vec<ShotSample>> {
    discover(root, class_name, Split::Train)?
        .iter()
        .filter(|s| !s.is_anomalous())
        .map(|s| {
            let (image, cloud, _) = load_sample(s, size)?;
            Ok(ShotSample { image, cloud })
        })
        .collect()
}

pub fn load_test(root: &Path, class_name: &str, size: usize) -> Result<Vec<TestSample>> {
    discover(root, class_name, Split::Test)?
        .iter()
        .map(|s| {
            let (image, cloud, mask) = load_sample(s, size)?;
            Ok(TestSample {
                name: s.name(),
                image,
                cloud,
                mask,
                label: s.is_anomalous(),
            })
        })
        .collect()
}

/// Directory holding one defect type of a class and split.
pub fn sample_dir(root: &Path, class_name: &str, split: Split, defect: &str) -> PathBuf {
    root.join(class_name).join(split.dir()).join(defect)
}

/// Writes a sample under `dir` (see [`sample_dir`]) in the layout [`discover`] reads.
pub fn write_sample(
    dir: &Path,
    stem: &str,
    image: &ColorImage,
    cloud: &PointCloudGrid,
    mask: Option<&Mask>,
) -> Result<()> {
    let sub = |name: &str| -> Result<PathBuf> {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    };
    crate::io::images::save_rgb(&sub("rgb")?.join(format!("{stem}.png")), image)?;
    crate::io::pointgrid::write_point_grid(&sub("xyz")?.join(format!("{stem}.pgrid")), cloud)?;
    if let Some(m) = mask {
        crate::io::images::save_mask(&sub("gt")?.join(format!("{stem}.png")), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::toy_object;

    #[test]
    fn layout_round_trip_and_resizing() {
        let dir = tempfile::tempdir().unwrap();
        let obj = toy_object(32, 1);
        let mask = Mask::from_shape_fn((32, 32), |(r, c)| r < 8 && c < 8);
        write_sample(
            &sample_dir(dir.path(), "widget", Split::Train, "good"),
            "001",
            &obj.image,
            &obj.cloud,
            None,
        )
        .unwrap();
        write_sample(
            &sample_dir(dir.path(), "widget", Split::Train, "good"),
            "000",
            &obj.image,
            &obj.cloud,
            None,
        )
        .unwrap();
        write_sample(
            &sample_dir(dir.path(), "widget", Split::Test, "crack"),
            "000",
            &obj.image,
            &obj.cloud,
            Some(&mask),
        )
        .unwrap();

        let train = discover(dir.path(), "widget", Split::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert!(train[0].rgb < train[1].rgb);
        assert!(train.iter().all(|s| s.mask.is_none()));

        let test = load_test(dir.path(), "widget", 64).unwrap();
        assert_eq!(test.len(), 1);
        assert!(test[0].label);
        assert_eq!(test[0].image.dim(), (64, 64, 3));
        assert_eq!(test[0].cloud.height(), 64);
        let m = test[0].mask.as_ref().unwrap();
        assert_eq!(m.dim(), (64, 64));
        assert_eq!(m.iter().filter(|v| **v).count(), 256);
    }

    #[test]
    fn mismatched_grid_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let a = toy_object(16, 1);
        let b = toy_object(20, 1);
        write_sample(
            &sample_dir(dir.path(), "w", Split::Train, "good"),
            "000",
            &a.image,
            &b.cloud,
            None,
        )
        .unwrap();
        let err = load_train(dir.path(), "w", 16).unwrap_err().to_string();
        assert!(err.contains("000.pgrid"), "{err}");
    }
}
