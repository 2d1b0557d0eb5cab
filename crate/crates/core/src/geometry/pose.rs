use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::{fmt_f64, Error, Result};

/// Wraps an angle into (−π, π].
pub fn wrap_yaw(psi: f64) -> Result<f64> {
    if !psi.is_finite() {
        return Err(Error::arg(format!("cannot wrap non-finite angle {psi}")));
    }
    Ok(wrap(psi))
}

pub(crate) fn wrap(psi: f64) -> f64 {
    let r = psi.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Full 6-DoF LiDAR pose in the world frame (world-from-LiDAR).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose6 {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    /// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler(translation: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        let rotation = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        Self {
            translation: Vector3::from(translation),
            rotation,
        }
    }

    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::from_euler([x, y, z], yaw, 0.0, 0.0)
    }

    /// Heading of the sensor x-axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// (roll, pitch, yaw) of the ZYX decomposition.
    pub fn euler(&self) -> (f64, f64, f64) {
        Rotation3::from_matrix_unchecked(self.rotation).euler_angles()
    }

    /// BEV plane normal: the sensor z-axis in the world frame.
    pub fn plane_normal(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.translation.x, self.translation.y]
    }

    pub fn is_valid(&self) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        ortho <= 1e-9 && (self.rotation.determinant() - 1.0).abs() <= 1e-9 && self.translation.iter().all(|v| v.is_finite())
    }

    /// Rotation about the world z-axis through the world origin.
    pub fn rotated_world(&self, phi: f64) -> Self {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), phi).into_inner();
        Self {
            translation: rz * self.translation,
            rotation: rz * self.rotation,
        }
    }

    /// Rotation of the sensor frame about its own z-axis.
    pub fn rotated_local(&self, theta: f64) -> Self {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta).into_inner();
        Self {
            translation: self.translation,
            rotation: self.rotation * rz,
        }
    }

    pub fn to_record(&self) -> [f64; 12] {
        let t = self.translation;
        let r = self.rotation;
        [
            t.x,
            t.y,
            t.z,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_record(v: &[f64; 12]) -> Self {
        Self {
            translation: Vector3::new(v[0], v[1], v[2]),
            rotation: Matrix3::new(v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11]),
        }
    }
}

/// Horizontal offset (dx, dy) in the pose's heading frame plus a yaw change.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseOffset3 {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

impl PoseOffset3 {
    pub const ZERO: PoseOffset3 = PoseOffset3 {
        dx: 0.0,
        dy: 0.0,
        dpsi: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dpsi: f64) -> Self {
        Self { dx, dy, dpsi }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dpsi]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// The offset `o⁻¹` with `compose(compose(p, o), o⁻¹) == p`.
    pub fn inverse(self) -> Self {
        let (s, c) = self.dpsi.sin_cos();
        Self {
            dx: -(c * self.dx + s * self.dy),
            dy: -(-s * self.dx + c * self.dy),
            dpsi: -self.dpsi,
        }
    }
}

impl std::ops::Add for PoseOffset3 {
    type Output = PoseOffset3;

    fn add(self, o: PoseOffset3) -> PoseOffset3 {
        PoseOffset3::new(self.dx + o.dx, self.dy + o.dy, self.dpsi + o.dpsi)
    }
}

/// `pose ⊕ offset`: translate in the pose's heading frame, then rotate the
/// heading about the world vertical. Roll, pitch and z are untouched.
pub fn compose(pose: &Pose6, offset: PoseOffset3) -> Pose6 {
    let (s, c) = pose.yaw().sin_cos();
    let shift = Vector3::new(c * offset.dx - s * offset.dy, s * offset.dx + c * offset.dy, 0.0);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), offset.dpsi).into_inner();
    Pose6 {
        translation: pose.translation + shift,
        rotation: rz * pose.rotation,
    }
}

/// The offset `o` with `compose(from, o) == to`, assuming both poses share
/// z, roll and pitch.
pub fn relative_offset(from: &Pose6, to: &Pose6) -> PoseOffset3 {
    let (s, c) = from.yaw().sin_cos();
    let d = to.translation - from.translation;
    PoseOffset3 {
        dx: c * d.x + s * d.y,
        dy: -s * d.x + c * d.y,
        dpsi: wrap(to.yaw() - from.yaw()),
    }
}

const POSES_MAGIC: &str = "poses 1";

pub fn write_poses(poses: &[Pose6]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POSES_MAGIC}");
    for p in poses {
        let rec: Vec<String> = p.to_record().iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", rec.join(" "));
    }
    out
}

pub fn parse_poses(text: &str) -> Result<Vec<Pose6>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == POSES_MAGIC => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected `{POSES_MAGIC}` header"),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let rec: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
                line: i + 1,
                message: format!("expected 12 numbers, found {}", v.len()),
            })?;
            Ok(Pose6::from_record(&rec))
        })
        .collect()
}

pub fn save_poses(poses: &[Pose6], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_poses(poses)).map_err(|e| Error::io(path, e))
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<Pose6>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}
