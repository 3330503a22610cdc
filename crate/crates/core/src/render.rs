//! Point splatting rasterizer producing multi-view images of a textured point grid.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    default_view_angles, rotate_cloud, rotation_matrix, view_grid, CameraModel, PointCloudGrid, Rot3, RotationAngles,
};
use crate::ColorImage;

/// The five views fed to the fusion module, 1-based into the 27-view grid.
pub const DEFAULT_SELECTED_VIEWS: [usize; 5] = [5, 9, 14, 19, 27];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: ColorImage,
    pub coverage: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSet {
    pub views: Vec<RenderedView>,
    pub source_tag: SourceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub background: [f64; 3],
    /// Per-axis angles (radians) whose 3×3×3 product forms the view grid.
    pub view_angles: [f64; 3],
    pub selected_views: Vec<usize>,
    /// Focal length in pixels of the default centred camera.
    pub focal: f64,
    /// Distance from the camera to the object centroid.
    pub distance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            canvas_height: 240,
            canvas_width: 240,
            background: [0.0; 3],
            view_angles: default_view_angles(),
            selected_views: DEFAULT_SELECTED_VIEWS.to_vec(),
            focal: 240.0,
            distance: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::centered(self.canvas_height, self.canvas_width, self.focal, self.distance)
    }

    pub fn grid(&self) -> Result<Vec<RotationAngles>> {
        view_grid(&self.view_angles)
    }
}

struct Splat {
    pixel: usize,
    source: usize,
}

/// Resolves which source point lands on each pixel. Nearest depth wins and
/// equal depths go to the lower row-major source index, so the result does not
/// depend on traversal order.
fn rasterize(cloud: &PointCloudGrid, rot: &Rot3, cam: &CameraModel, height: usize, width: usize) -> Vec<Splat> {
    let rotated = rotate_cloud(cloud, rot);
    let mut depth = vec![f64::INFINITY; height * width];
    let mut owner = vec![usize::MAX; height * width];
    for (idx, (p, &ok)) in rotated.points().iter().zip(rotated.valid()).enumerate() {
        if !ok {
            continue;
        }
        let proj = cam.project_point(*p);
        if !proj.visible {
            continue;
        }
        let col = proj.u.round();
        let row = proj.v.round();
        if !(col >= 0.0 && row >= 0.0 && col < width as f64 && row < height as f64) {
            continue;
        }
        let pix = row as usize * width + col as usize;
        let d = proj.depth;
        if d < depth[pix] || (d == depth[pix] && idx < owner[pix]) {
            depth[pix] = d;
            owner[pix] = idx;
        }
    }
    owner
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s != usize::MAX)
        .map(|(pixel, source)| Splat { pixel, source })
        .collect()
}

fn check_texture(cloud: &PointCloudGrid, texture: &ColorImage) -> Result<()> {
    let (h, w, c) = texture.dim();
    if h != cloud.height() || w != cloud.width() || c != 3 {
        return Err(Error::invalid(format!(
            "texture is {h}x{w}x{c} but the point grid is {}x{}",
            cloud.height(),
            cloud.width()
        )));
    }
    Ok(())
}

fn paint(
    splats: &[Splat],
    texture: &ColorImage,
    grid_width: usize,
    height: usize,
    width: usize,
    background: [f64; 3],
) -> RenderedView {
    let mut image = Array3::from_shape_fn((height, width, 3), |(_, _, c)| background[c]);
    let mut coverage = Array2::from_elem((height, width), false);
    for s in splats {
        let (r, c) = (s.pixel / width, s.pixel % width);
        let (sr, sc) = (s.source / grid_width, s.source % grid_width);
        for ch in 0..3 {
            image[[r, c, ch]] = texture[[sr, sc, ch]].clamp(0.0, 1.0);
        }
        coverage[[r, c]] = true;
    }
    RenderedView { image, coverage }
}

/// Rotates the grid, projects it through `cam` and splats each visible point's
/// co-located texture colour onto an `canvas.0`×`canvas.1` canvas.
pub fn render_view(
    cloud: &PointCloudGrid,
    texture: &ColorImage,
    rot: &Rot3,
    cam: &CameraModel,
    canvas: (usize, usize),
    background: [f64; 3],
) -> Result<RenderedView> {
    check_texture(cloud, texture)?;
    let splats = rasterize(cloud, rot, cam, canvas.0, canvas.1);
    Ok(paint(&splats, texture, cloud.width(), canvas.0, canvas.1, background))
}

/// Renders each rotation in `angles` with both textures, sharing one
/// rasterization per view so the two sets have identical coverage.
pub fn render_pair(
    cloud: &PointCloudGrid,
    texture_normal: &ColorImage,
    texture_anom: &ColorImage,
    angles: &[RotationAngles],
    cam: &CameraModel,
    config: &RenderConfig,
) -> Result<(Vec<RenderedView>, Vec<RenderedView>)> {
    check_texture(cloud, texture_normal)?;
    check_texture(cloud, texture_anom)?;
    let (h, w) = (config.canvas_height, config.canvas_width);
    let rendered: Vec<(RenderedView, RenderedView)> = angles
        .par_iter()
        .map(|a| {
            let rot = rotation_matrix(*a)?;
            let splats = rasterize(cloud, &rot, cam, h, w);
            Ok((
                paint(&splats, texture_normal, cloud.width(), h, w, config.background),
                paint(&splats, texture_anom, cloud.width(), h, w, config.background),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(rendered.into_iter().unzip())
}

/// Renders the full view grid once per texture.
pub fn render_multiview(
    cloud: &PointCloudGrid,
    texture_normal: &ColorImage,
    texture_anom: &ColorImage,
    grid: &[RotationAngles],
    cam: &CameraModel,
    config: &RenderConfig,
) -> Result<(MultiViewSet, MultiViewSet)> {
    let (normal, anom) = render_pair(cloud, texture_normal, texture_anom, grid, cam, config)?;
    Ok((
        MultiViewSet {
            views: normal,
            source_tag: SourceTag::Normal,
        },
        MultiViewSet {
            views: anom,
            source_tag: SourceTag::Anomalous,
        },
    ))
}

/// Renders a single texture at the given 1-based grid indices only.
pub fn render_selected(
    cloud: &PointCloudGrid,
    texture: &ColorImage,
    grid: &[RotationAngles],
    indices: &[usize],
    cam: &CameraModel,
    config: &RenderConfig,
) -> Result<Vec<RenderedView>> {
    check_indices(grid.len(), indices)?;
    check_texture(cloud, texture)?;
    let (h, w) = (config.canvas_height, config.canvas_width);
    indices
        .par_iter()
        .map(|&i| {
            let rot = rotation_matrix(grid[i - 1])?;
            let splats = rasterize(cloud, &rot, cam, h, w);
            Ok(paint(&splats, texture, cloud.width(), h, w, config.background))
        })
        .collect()
}

fn check_indices(len: usize, indices: &[usize]) -> Result<()> {
    for (k, &i) in indices.iter().enumerate() {
        if i == 0 || i > len {
            return Err(Error::invalid(format!("view index {i} outside 1..={len}")));
        }
        if indices[..k].contains(&i) {
            return Err(Error::invalid(format!("duplicate view index {i}")));
        }
    }
    Ok(())
}

/// Picks views by 1-based index, in the order given.
pub fn select_views(set: &MultiViewSet, indices: &[usize]) -> Result<Vec<RenderedView>> {
    check_indices(set.views.len(), indices)?;
    Ok(indices.iter().map(|&i| set.views[i - 1].clone()).collect())
}
