//! Shared domain types: task modes, embodiments, camera rigs and patch grids.

use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of patches produced by the vision encoders for one frame (24×24).
pub const PATCHES_PER_FRAME: usize = 576;
/// Side length of the square patch layout.
pub const PATCH_GRID_SIDE: usize = 24;

/// Azimuths closer than this are treated as the same viewpoint.
const AZIMUTH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Navigation,
    VideoQa,
    ImageQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbodimentKind {
    IndoorRobot,
    Uav,
    Car,
}

impl EmbodimentKind {
    pub const ALL: [EmbodimentKind; 3] = [Self::IndoorRobot, Self::Uav, Self::Car];

    /// Only aerial platforms predict altitude.
    pub fn has_z(self) -> bool {
        matches!(self, Self::Uav)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::IndoorRobot => "indoor_robot",
            Self::Uav => "uav",
            Self::Car => "car",
        }
    }
}

impl fmt::Display for EmbodimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One camera on the rig. Azimuth 0 looks straight ahead and grows
/// counterclockwise seen from above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub azimuth: f64,
    #[serde(default = "default_hfov")]
    pub hfov: f64,
    #[serde(default = "default_height")]
    pub height: f64,
}

fn default_hfov() -> f64 {
    90f64.to_radians()
}

fn default_height() -> f64 {
    1.0
}

impl CameraSpec {
    pub fn new(azimuth: f64) -> Self {
        Self { azimuth, hfov: default_hfov(), height: default_height() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RigViolation {
    #[error("rig has no cameras")]
    EmptyRig,
    #[error("cameras {first} and {second} share azimuth {azimuth}")]
    DuplicateAzimuth { first: usize, second: usize, azimuth: String },
    #[error("camera {camera}: {field} = {value} outside {range}")]
    FieldOutOfRange { camera: usize, field: &'static str, value: String, range: &'static str },
}

/// All invariants a rig violated, in camera order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid camera rig: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct RigError {
    pub violations: Vec<RigViolation>,
}

impl RigError {
    pub fn has_duplicate(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, RigViolation::DuplicateAzimuth { .. }))
    }
}

/// Ordered set of cameras. Construct through [`CameraRig::new`] or
/// [`validate_rig`]; both return the canonical ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CameraSpec>", into = "Vec<CameraSpec>")]
pub struct CameraRig {
    cameras: Vec<CameraSpec>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraSpec>) -> Result<Self, RigError> {
        validate_rig(Self { cameras })
    }

    /// `n` cameras evenly spread around the vertical axis, front camera first.
    pub fn evenly_spaced(n: usize) -> Result<Self, RigError> {
        Self::new((0..n).map(|i| CameraSpec::new(TAU * i as f64 / n as f64)).collect())
    }

    /// Front, left, back, right.
    pub fn four_view() -> Self {
        Self::evenly_spaced(4).expect("four evenly spaced cameras are valid")
    }

    pub fn cameras(&self) -> &[CameraSpec] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn azimuth(&self, camera: usize) -> Option<f64> {
        self.cameras.get(camera).map(|c| c.azimuth)
    }
}

impl TryFrom<Vec<CameraSpec>> for CameraRig {
    type Error = RigError;

    fn try_from(cameras: Vec<CameraSpec>) -> Result<Self, Self::Error> {
        Self::new(cameras)
    }
}

impl From<CameraRig> for Vec<CameraSpec> {
    fn from(rig: CameraRig) -> Self {
        rig.cameras
    }
}

/// Checks every rig invariant and returns the rig sorted by ascending azimuth.
pub fn validate_rig(rig: CameraRig) -> Result<CameraRig, RigError> {
    let mut violations = Vec::new();
    let cams = rig.cameras;
    if cams.is_empty() {
        violations.push(RigViolation::EmptyRig);
    }
    for (i, c) in cams.iter().enumerate() {
        if !(c.azimuth.is_finite() && (0.0..TAU).contains(&c.azimuth)) {
            violations.push(RigViolation::FieldOutOfRange {
                camera: i,
                field: "azimuth",
                value: c.azimuth.to_string(),
                range: "[0, 2pi)",
            });
        }
        if !(c.hfov > 0.0 && c.hfov <= PI) {
            violations.push(RigViolation::FieldOutOfRange {
                camera: i,
                field: "hfov",
                value: c.hfov.to_string(),
                range: "(0, pi]",
            });
        }
        if !(c.height > 0.0 && c.height.is_finite()) {
            violations.push(RigViolation::FieldOutOfRange {
                camera: i,
                field: "height",
                value: c.height.to_string(),
                range: "(0, inf)",
            });
        }
    }
    for i in 0..cams.len() {
        for j in i + 1..cams.len() {
            if (cams[i].azimuth - cams[j].azimuth).abs() <= AZIMUTH_EPS {
                violations.push(RigViolation::DuplicateAzimuth {
                    first: i,
                    second: j,
                    azimuth: cams[i].azimuth.to_string(),
                });
            }
        }
    }
    if !violations.is_empty() {
        return Err(RigError { violations });
    }
    let mut cameras = cams;
    cameras.sort_by(|a, b| a.azimuth.total_cmp(&b.azimuth));
    Ok(CameraRig { cameras })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("expected {expected} patches, got {got}")]
    BadPatchCount { expected: usize, got: usize },
    #[error("grid data length {len} is not a multiple of {channels} channels")]
    Ragged { len: usize, channels: usize },
    #[error("non-finite value at patch {patch}, channel {channel}")]
    NonFinite { patch: usize, channel: usize },
}

/// Row-major `patches × channels` matrix of f32 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, GridError> {
        if data.len() != rows * cols {
            return Err(GridError::Ragged { len: data.len(), channels: cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        (0..self.rows).map(move |r| self.row(r))
    }
}

/// Encoder output for one camera at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    pub t: u32,
    pub camera: usize,
    grid: FeatureMatrix,
}

impl PatchFeatureGrid {
    pub fn new(t: u32, camera: usize, grid: FeatureMatrix) -> Result<Self, GridError> {
        if grid.rows() != PATCHES_PER_FRAME {
            return Err(GridError::BadPatchCount { expected: PATCHES_PER_FRAME, got: grid.rows() });
        }
        for (p, row) in grid.iter_rows().enumerate() {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(GridError::NonFinite { patch: p, channel: c });
            }
        }
        Ok(Self { t, camera, grid })
    }

    pub fn grid(&self) -> &FeatureMatrix {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.cols()
    }
}
