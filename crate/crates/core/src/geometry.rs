//! Rotations, rigid transforms and pinhole projection for organized point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Rotation angles in radians about the three coordinate axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationAngles {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

impl RotationAngles {
    pub const ZERO: RotationAngles = RotationAngles {
        theta_x: 0.0,
        theta_y: 0.0,
        theta_z: 0.0,
    };

    pub fn new(theta_x: f64, theta_y: f64, theta_z: f64) -> Self {
        Self {
            theta_x,
            theta_y,
            theta_z,
        }
    }

    fn is_finite(&self) -> bool {
        self.theta_x.is_finite() && self.theta_y.is_finite() && self.theta_z.is_finite()
    }
}

/// A proper rotation: orthogonal with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot3([[f64; 3]; 3]);

impl Rot3 {
    pub const IDENTITY: Rot3 = Rot3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Wraps a matrix after checking `RᵀR = I` and `det R = 1` to within 1e-9.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Rot3(m);
        let err = r.orthogonality_error();
        if !err.is_finite() || err > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "matrix is not orthogonal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    pub fn compose(&self, rhs: &Rot3) -> Rot3 {
        Rot3(mat_mul(&self.0, &rhs.0))
    }

    pub fn transpose(&self) -> Rot3 {
        let m = &self.0;
        let mut t = [[0.0; 3]; 3];
        for (i, row) in t.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Rot3(t)
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = mat_mul(&self.transpose().0, &self.0);
        let mut worst = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Builds the rotation as the product of three elementary factors, multiplied
/// left to right: a rotation in the xy-plane by `theta_x`, one in the xz-plane by
/// `theta_y`, then one in the yz-plane by `theta_z`.
///
/// Note the first factor acts on the xy-plane even though it is driven by `theta_x`.
pub fn rotation_matrix(angles: RotationAngles) -> Result<Rot3> {
    if !angles.is_finite() {
        return Err(Error::invalid(format!("non-finite rotation angle: {angles:?}")));
    }
    let (sx, cx) = angles.theta_x.sin_cos();
    let (sy, cy) = angles.theta_y.sin_cos();
    let (sz, cz) = angles.theta_z.sin_cos();
    let first = [[cx, sx, 0.0], [-sx, cx, 0.0], [0.0, 0.0, 1.0]];
    let second = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let third = [[1.0, 0.0, 0.0], [0.0, cz, sz], [0.0, -sz, cz]];
    Ok(Rot3(mat_mul(&mat_mul(&first, &second), &third)))
}

/// Enumerates all 27 angle triples drawn from `per_axis`, with `theta_x` varying
/// slowest and `theta_z` fastest. Callers index the result 1-based.
pub fn view_grid(per_axis: &[f64]) -> Result<Vec<RotationAngles>> {
    if per_axis.len() != 3 {
        return Err(Error::invalid(format!(
            "view grid needs exactly 3 angles per axis, got {}",
            per_axis.len()
        )));
    }
    if per_axis.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("view grid angles must be finite"));
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            if per_axis[i] == per_axis[j] {
                return Err(Error::invalid(format!("duplicate view grid angle {}", per_axis[i])));
            }
        }
    }
    let mut grid = Vec::with_capacity(27);
    for &x in per_axis {
        for &y in per_axis {
            for &z in per_axis {
                grid.push(RotationAngles::new(x, y, z));
            }
        }
    }
    Ok(grid)
}

/// The default symmetric grid `{-π/6, 0, π/6}` on every axis.
pub fn default_view_angles() -> [f64; 3] {
    let a = std::f64::consts::FRAC_PI_6;
    [-a, 0.0, a]
}

/// An organized H×W grid of 3D points. Cells with `valid == false` carry no
/// measurement and are skipped by every consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudGrid {
    height: usize,
    width: usize,
    points: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl PointCloudGrid {
    pub fn new(height: usize, width: usize, points: Vec<[f64; 3]>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if points.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "point grid {height}x{width} needs {n} points and flags, got {} and {}",
                points.len(),
                valid.len()
            )));
        }
        for (p, &ok) in points.iter().zip(&valid) {
            if ok && !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid("valid point with non-finite coordinate"));
            }
        }
        Ok(Self {
            height,
            width,
            points,
            valid,
        })
    }

    /// Marks cells valid where the z coordinate is positive.
    pub fn from_points(height: usize, width: usize, points: Vec<[f64; 3]>) -> Result<Self> {
        let valid = points
            .iter()
            .map(|p| p[2] > 0.0 && p.iter().all(|c| c.is_finite()))
            .collect();
        Self::new(height, width, points, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn point(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.points[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        let n = self.valid_count();
        if n == 0 {
            return None;
        }
        let mut c = [0.0; 3];
        for (p, _) in self.points.iter().zip(&self.valid).filter(|(_, v)| **v) {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        Some(c.map(|v| v / n as f64))
    }

    /// Translates valid points so their centroid sits at the origin.
    pub fn centered(&self) -> Self {
        let Some(c) = self.centroid() else {
            return self.clone();
        };
        let points = self
            .points
            .iter()
            .zip(&self.valid)
            .map(|(p, &ok)| {
                if ok {
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                } else {
                    *p
                }
            })
            .collect();
        Self { points, ..self.clone() }
    }

    /// The z coordinate of valid cells with positive depth, zero elsewhere.
    pub fn depth_map(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            let i = r * self.width + c;
            let z = self.points[i][2];
            if self.valid[i] && z > 0.0 {
                z
            } else {
                0.0
            }
        })
    }

    /// Centres the cloud and scales it uniformly so the farthest valid point
    /// lies `radius` from the origin.
    pub fn normalized(&self, radius: f64) -> Self {
        let centered = self.centered();
        let far = centered
            .points
            .iter()
            .zip(&centered.valid)
            .filter(|(_, ok)| **ok)
            .map(|(p, _)| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        if far == 0.0 {
            return centered;
        }
        let k = radius / far;
        let points = centered
            .points
            .iter()
            .zip(&centered.valid)
            .map(|(p, &ok)| if ok { [p[0] * k, p[1] * k, p[2] * k] } else { *p })
            .collect();
        Self { points, ..centered }
    }
}

/// Applies `r` to every valid point; the validity mask is carried over unchanged.
pub fn rotate_cloud(cloud: &PointCloudGrid, r: &Rot3) -> PointCloudGrid {
    let points = cloud
        .points
        .iter()
        .zip(&cloud.valid)
        .map(|(p, &ok)| if ok { r.apply(*p) } else { *p })
        .collect();
    PointCloudGrid {
        points,
        ..cloud.clone()
    }
}

/// Rotation followed by translation, mapping object coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rot3,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rot3::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Rot3::IDENTITY,
            translation: t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation.apply(p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }
}

/// How the homogeneous scale `Z_c` of the projection is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthNormalization {
    /// Divide by the camera-frame depth of each point.
    #[default]
    CameraDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: RigidTransform,
    #[serde(default)]
    pub z_c_mode: DepthNormalization,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: RigidTransform) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            z_c_mode: DepthNormalization::CameraDepth,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Rot3::new(*self.extrinsic.rotation.matrix()).map(|_| ())
    }

    /// Camera looking down +z at an object centred `distance` units ahead, with the
    /// principal point in the middle of a `height`×`width` canvas.
    pub fn centered(height: usize, width: usize, focal: f64, distance: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width / 2) as f64,
            (height / 2) as f64,
            RigidTransform::translation([0.0, 0.0, distance]),
        )
    }

    pub fn project_point(&self, p: [f64; 3]) -> Projection {
        let q = self.extrinsic.apply(p);
        let z = q[2];
        if !(z > 0.0) {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: z,
                visible: false,
            };
        }
        Projection {
            u: self.fx * q[0] / z + self.cx,
            v: self.fy * q[1] / z + self.cy,
            depth: z,
            visible: true,
        }
    }
}

/// Pixel coordinates of a projected point (`u` is the column, `v` the row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Projects every grid cell. Invalid cells and points at or behind the camera
/// plane come back with `visible == false`.
pub fn project_points(cloud: &PointCloudGrid, cam: &CameraModel) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .zip(&cloud.valid)
        .map(|(p, &ok)| {
            if ok {
                cam.project_point(*p)
            } else {
                Projection {
                    u: f64::NAN,
                    v: f64::NAN,
                    depth: f64::NAN,
                    visible: false,
                }
            }
        })
        .collect()
}
