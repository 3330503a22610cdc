//! Python bindings. Images and point grids cross the boundary as nested
//! `H×W×3` lists of floats, maps and masks as `H×W` lists.

use std::path::PathBuf;

use clip3d_ad::error::Error;
use clip3d_ad::geometry::{rotation_matrix as rotation, view_grid as grid, PointCloudGrid, RotationAngles};
use clip3d_ad::inference::Scorer;
use clip3d_ad::io::{load_checkpoint, save_checkpoint, Checkpoint as CoreCheckpoint, PipelineConfig};
use clip3d_ad::metrics;
use clip3d_ad::model::{Clip3dModel, TextEmbeddings};
use clip3d_ad::synth::{procedural_source, synthesize_anomaly, SynthParams};
use clip3d_ad::training::Trainer;
use clip3d_ad::{ColorImage, Mask};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Nested3 = Vec<Vec<Vec<f64>>>;
type Nested2 = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dims<T>(rows: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular array"));
    }
    Ok((h, w))
}

fn to_image(v: &Nested3) -> PyResult<ColorImage> {
    let (h, w) = dims(v)?;
    if v.iter().flatten().any(|p| p.len() != 3) {
        return Err(PyValueError::new_err("expected 3 channels per pixel"));
    }
    Ok(ColorImage::from_shape_fn((h, w, 3), |(r, c, ch)| v[r][c][ch]))
}

fn from_image(img: &ColorImage) -> Nested3 {
    let (h, w, _) = img.dim();
    (0..h)
        .map(|r| (0..w).map(|c| (0..3).map(|ch| img[[r, c, ch]]).collect()).collect())
        .collect()
}

fn to_cloud(v: &Nested3) -> PyResult<PointCloudGrid> {
    let (h, w) = dims(v)?;
    let mut points = Vec::with_capacity(h * w);
    for p in v.iter().flatten() {
        let [x, y, z] = p[..] else {
            return Err(PyValueError::new_err("expected (x, y, z) per cell"));
        };
        points.push([x, y, z]);
    }
    PointCloudGrid::from_points(h, w, points).map_err(err)
}

fn from_cloud(cloud: &PointCloudGrid) -> Nested3 {
    cloud
        .points()
        .chunks(cloud.width())
        .map(|row| row.iter().map(|p| p.to_vec()).collect())
        .collect()
}

fn to_map(v: &Nested2) -> PyResult<Array2<f64>> {
    let (h, w) = dims(v)?;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| v[r][c]))
}

fn to_mask(v: &[Vec<bool>]) -> PyResult<Mask> {
    let (h, w) = dims(v)?;
    Ok(Mask::from_shape_fn((h, w), |(r, c)| v[r][c]))
}

fn from_map(m: &Array2<f64>) -> Nested2 {
    m.outer_iter().map(|row| row.to_vec()).collect()
}

fn config_from(json: Option<&str>) -> PyResult<PipelineConfig> {
    let cfg: PipelineConfig = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// `R = Rz·Ry·Rx` for angles in radians, as a 3×3 nested list.
#[pyfunction]
fn rotation_matrix(theta_x: f64, theta_y: f64, theta_z: f64) -> PyResult<Vec<Vec<f64>>> {
    let r = rotation(RotationAngles::new(theta_x, theta_y, theta_z)).map_err(err)?;
    Ok(r.matrix().iter().map(|row| row.to_vec()).collect())
}

/// Every `(θx, θy, θz)` combination of the given per-axis angles, θx outermost.
#[pyfunction]
fn view_grid(angles: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
    Ok(grid(&angles)
        .map_err(err)?
        .into_iter()
        .map(|a| (a.theta_x, a.theta_y, a.theta_z))
        .collect())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn aupr(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::aupr(&scores, &labels).map_err(err)
}

fn maps_and_masks(maps: &[Nested2], masks: &[Vec<Vec<bool>>]) -> PyResult<(Vec<Array2<f64>>, Vec<Mask>)> {
    let maps = maps.iter().map(to_map).collect::<PyResult<Vec<_>>>()?;
    let masks = masks.iter().map(|m| to_mask(m)).collect::<PyResult<Vec<_>>>()?;
    Ok((maps, masks))
}

#[pyfunction]
fn p_auroc(maps: Vec<Nested2>, masks: Vec<Vec<Vec<bool>>>) -> PyResult<f64> {
    let (maps, masks) = maps_and_masks(&maps, &masks)?;
    metrics::p_auroc(&maps, &masks).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (maps, masks, fpr_limit = 0.3))]
fn aupro(maps: Vec<Nested2>, masks: Vec<Vec<Vec<bool>>>, fpr_limit: f64) -> PyResult<f64> {
    let (maps, masks) = maps_and_masks(&maps, &masks)?;
    metrics::aupro(&maps, &masks, fpr_limit).map_err(err)
}

/// A procedural toy object as `(image, points)`.
#[pyfunction]
#[pyo3(signature = (size = 240, seed = 0))]
fn toy_object(size: usize, seed: u64) -> (Nested3, Nested3) {
    let s = clip3d_ad::toy::toy_object(size, seed);
    (from_image(&s.image), from_cloud(&s.cloud))
}

/// Pastes a Perlin-shaped blend of a procedural texture onto the object.
/// Returns `(anomalous_image, mask, beta)`.
#[pyfunction]
#[pyo3(signature = (image, points, seed = 0))]
fn synthesize(image: Nested3, points: Nested3, seed: u64) -> PyResult<(Nested3, Vec<Vec<bool>>, f64)> {
    let image = to_image(&image)?;
    let cloud = to_cloud(&points)?;
    let (h, w, _) = image.dim();
    let source = procedural_source(h, w, seed ^ 0x5eed);
    let s = synthesize_anomaly(&image, &cloud.depth_map(), &source, &SynthParams::default(), seed).map_err(err)?;
    let mask = s.mask.outer_iter().map(|r| r.to_vec()).collect();
    Ok((from_image(&s.x_minus), mask, s.beta))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    clip3d_ad::cli::run_command(std::iter::once("clip3d".to_string()).chain(args))
}

/// A trained model together with its encoder and render settings.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn class_name(&self) -> &str {
        &self.inner.header.class_name
    }

    #[getter]
    fn multiview(&self) -> bool {
        self.inner.header.render.is_some()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.header.model.encoder.image_size
    }

    /// Number of trainable scalars.
    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.data.iter().map(Vec::len).sum()
    }

    fn header_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.header).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Scores one sample. Returns `(score, anomaly_map)`.
    fn predict(&self, py: Python<'_>, image: Nested3, points: Nested3) -> PyResult<(f64, Nested2)> {
        let image = to_image(&image)?;
        let cloud = to_cloud(&points)?;
        let ck = &self.inner;
        let p = py
            .detach(|| {
                let model = ck.to_model()?;
                let encoder = ck.encoder()?;
                let text = TextEmbeddings::default_for(&encoder, &ck.header.class_name)?;
                Scorer {
                    model: &model,
                    encoder: &encoder,
                    render: ck.header.render.as_ref(),
                    text: &text,
                }
                .predict(&image, &cloud)
            })
            .map_err(err)?;
        Ok((p.score.a_score, from_map(&p.map.values)))
    }

    /// Evaluates on the procedural held-out split described by the config's
    /// `toy` section and returns the report as a JSON string.
    #[pyo3(signature = (config_json = None))]
    fn evaluate_toy(&self, py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
        let cfg = config_from(config_json)?;
        let ck = &self.inner;
        let report = py
            .detach(|| {
                let samples = cfg.toy.test_samples()?;
                let model = ck.to_model()?;
                let encoder = ck.encoder()?;
                let text = TextEmbeddings::default_for(&encoder, &ck.header.class_name)?;
                let scorer = Scorer {
                    model: &model,
                    encoder: &encoder,
                    render: ck.header.render.as_ref(),
                    text: &text,
                };
                let (report, _) = scorer.evaluate(&samples, cfg.fpr_limit, serde_json::Value::Null)?;
                Ok::<_, Error>(report)
            })
            .map_err(err)?;
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Trains on `k_shot` procedural toy objects. `config_json` is a partial
/// pipeline configuration; missing fields take their defaults.
#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn train_toy(py: Python<'_>, config_json: Option<&str>) -> PyResult<Checkpoint> {
    let cfg = config_from(config_json)?;
    let inner = py
        .detach(|| {
            let encoder = clip3d_ad::encoder::FrozenEncoder::new(cfg.model.encoder.clone())?;
            let samples = cfg.toy.train_samples(cfg.train.k_shot);
            let text = TextEmbeddings::default_for(&encoder, &cfg.class_name)?;
            let trainer = Trainer::new(&encoder, cfg.render(), text, cfg.train.clone(), &samples)?;
            let mut model = Clip3dModel::new(cfg.model.clone())?;
            trainer.run(&mut model, |_| {})?;
            Ok::<_, Error>(CoreCheckpoint::from_model(
                &model,
                &encoder,
                &cfg.class_name,
                cfg.render(),
                Some(&cfg.train),
            ))
        })
        .map_err(err)?;
    Ok(Checkpoint { inner })
}

#[pymodule]
fn clip3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(rotation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(view_grid, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupr, m)?)?;
    m.add_function(wrap_pyfunction!(p_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupro, m)?)?;
    m.add_function(wrap_pyfunction!(toy_object, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
