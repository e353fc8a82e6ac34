//! Synthetic shape populations with analytic ground truth.
//!
//! Every sample places particle `j` at the same spherical parameter
//! `(θ_j, φ_j)` (a Fibonacci lattice), so indices correspond across samples.
//! Volumes hold a smoothed occupancy: a logistic of the signed distance whose
//! 10%-90% transition spans one voxel.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream_rng;
use crate::shape::{CorrespondenceSet, Point};
use crate::surface::{ellipsoid_normal, ellipsoid_signed_distance, Surface, TriMesh};
use crate::volume::{Grid, Volume};

/// Parametric mesh resolution used for non-ellipsoidal ground-truth surfaces.
pub const MESH_RINGS: usize = 96;
pub const MESH_SEGMENTS: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Axis-aligned ellipsoids; particles depend linearly on radii and centre.
    EllipsoidLinear,
    /// Ellipsoids carrying a localized outward bump (the pathological cohort).
    EllipsoidBump,
    /// Ellipsoids yawed and twisted about the z axis; particles depend nonlinearly on both angles.
    Twisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Control,
    Pathological,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BumpSpec {
    /// Bump centre direction as spherical angles `[θ, φ]`.
    pub direction: [f64; 2],
    /// Angular radius of the compact support (radians).
    pub angular_radius: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
}

impl Default for BumpSpec {
    fn default() -> Self {
        Self { direction: [PI / 2.0, PI / 4.0], angular_radius: 0.6, amplitude_min: 3.0, amplitude_max: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFamily {
    pub kind: FamilyKind,
    pub num_particles: usize,
    pub grid: Grid,
    pub radii_min: [f64; 3],
    pub radii_max: [f64; 3],
    /// Uniform centre offset range (mm) per axis.
    pub center_jitter: f64,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise: f64,
    pub bump: BumpSpec,
    /// Share of bump-family samples that carry the bump.
    pub pathological_fraction: f64,
    /// Maximum twist rate (radians per mm along z).
    pub twist_max: f64,
    /// Maximum rigid yaw about z (radians).
    pub yaw_max: f64,
    pub seed: u64,
}

impl Default for SyntheticFamily {
    fn default() -> Self {
        Self {
            kind: FamilyKind::EllipsoidLinear,
            num_particles: 128,
            grid: Grid::centered(32, 2.0).expect("valid default grid"),
            radii_min: [14.0, 10.0, 8.0],
            radii_max: [22.0, 16.0, 14.0],
            center_jitter: 4.0,
            noise: 0.0,
            bump: BumpSpec::default(),
            pathological_fraction: 1.0,
            twist_max: 0.08,
            yaw_max: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub center: Point,
    pub radii: [f64; 3],
    pub yaw: f64,
    pub twist: f64,
    pub bump_amplitude: f64,
    pub bump_direction: [f64; 2],
    pub bump_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSample {
    pub id: String,
    pub kind: FamilyKind,
    pub label: Label,
    pub params: SampleParams,
    pub volume: Volume,
    pub correspondences: CorrespondenceSet,
}

/// Fibonacci-lattice spherical parameters `(θ_j, φ_j)` for `m` particles.
pub fn particle_parameters(m: usize) -> Vec<(f64, f64)> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..m)
        .map(|j| {
            let phi = (1.0 - 2.0 * (j as f64 + 0.5) / m as f64).asin();
            let theta = (golden * j as f64).rem_euclid(2.0 * PI);
            (theta, phi)
        })
        .collect()
}

fn unit(theta: f64, phi: f64) -> Point {
    [theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin()]
}

/// Point of the axis-aligned ellipsoid at spherical parameter `(θ, φ)`.
pub fn ellipsoid_point(center: Point, radii: [f64; 3], theta: f64, phi: f64) -> Point {
    let u = unit(theta, phi);
    [0, 1, 2].map(|a| center[a] + radii[a] * u[a])
}

fn rotate_z(v: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl SampleParams {
    fn bump_weight(&self, dir: Point) -> f64 {
        if self.bump_amplitude == 0.0 {
            return 0.0;
        }
        let b = unit(self.bump_direction[0], self.bump_direction[1]);
        let cos = (dir[0] * b[0] + dir[1] * b[1] + dir[2] * b[2]) / norm(dir);
        let psi = cos.clamp(-1.0, 1.0).acos();
        if psi >= self.bump_radius {
            0.0
        } else {
            (0.5 * PI * psi / self.bump_radius).cos().powi(2)
        }
    }

    fn twist_angle(&self, z: f64) -> f64 {
        self.yaw + self.twist * (z - self.center[2])
    }

    /// Surface point at spherical parameter `(θ, φ)`.
    pub fn point(&self, theta: f64, phi: f64) -> Point {
        let q = ellipsoid_point(self.center, self.radii, theta, phi);
        let mut rel = [0, 1, 2].map(|a| q[a] - self.center[a]);
        let w = self.bump_weight(rel);
        if w > 0.0 {
            let r = norm(rel);
            rel = rel.map(|v| v * (r + self.bump_amplitude * w) / r);
        }
        let rel = rotate_z(rel, self.twist_angle(q[2]));
        [0, 1, 2].map(|a| self.center[a] + rel[a])
    }

    /// Signed distance (negative inside); exact for plain ellipsoids, approximate
    /// inside a bump's support and for twisted shapes.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let rel = rotate_z([0, 1, 2].map(|a| p[a] - self.center[a]), -self.twist_angle(p[2]));
        let q = [0, 1, 2].map(|a| self.center[a] + rel[a]);
        let d = ellipsoid_signed_distance(self.center, self.radii, q);
        if rel == [0.0; 3] {
            return d;
        }
        d - self.bump_amplitude * self.bump_weight(rel)
    }

    pub fn is_plain_ellipsoid(&self) -> bool {
        self.yaw == 0.0 && self.twist == 0.0 && self.bump_amplitude == 0.0
    }

    /// Ground-truth surface: exact ellipsoid when possible, otherwise a fine parametric mesh.
    pub fn surface(&self) -> Result<Surface> {
        if self.is_plain_ellipsoid() {
            return Ok(Surface::Ellipsoid { center: self.center, radii: self.radii });
        }
        Ok(Surface::Mesh(TriMesh::from_parametric(MESH_RINGS, MESH_SEGMENTS, |t, p| self.point(t, p))?))
    }

    /// Outward normal at a point near the underlying ellipsoid (ignores bump and twist).
    pub fn ellipsoid_normal(&self, p: Point) -> Point {
        ellipsoid_normal(self.center, self.radii, p)
    }

    pub fn correspondences(&self, id: &str, m: usize) -> Result<CorrespondenceSet> {
        CorrespondenceSet::new(id, particle_parameters(m).into_iter().map(|(t, p)| self.point(t, p)).collect())
    }
}

/// Logistic scale giving a one-voxel 10%-90% transition.
fn logistic_scale(spacing: f64) -> f64 {
    spacing / (2.0 * 9f64.ln())
}

pub fn occupancy(signed_distance: f64, scale: f64) -> f64 {
    let t = signed_distance / scale;
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

impl SyntheticFamily {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.num_particles < 12 {
            return Err(CoreError::Invalid(format!("need >= 12 particles, got {}", self.num_particles)));
        }
        for a in 0..3 {
            if !(self.radii_min[a] > 0.0 && self.radii_min[a] <= self.radii_max[a]) {
                return Err(CoreError::Invalid(format!("radius bounds {a} must satisfy 0 < min <= max")));
            }
        }
        if self.center_jitter < 0.0 || self.noise < 0.0 || self.twist_max < 0.0 || self.yaw_max < 0.0 {
            return Err(CoreError::Invalid("jitter, noise, twist and yaw ranges must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pathological_fraction) {
            return Err(CoreError::Invalid("pathological_fraction must be in [0, 1]".into()));
        }
        let b = &self.bump;
        if self.kind == FamilyKind::EllipsoidBump
            && !(b.angular_radius > 0.0 && b.amplitude_min >= 0.0 && b.amplitude_min <= b.amplitude_max)
        {
            return Err(CoreError::Invalid("bump needs a positive radius and 0 <= amplitude_min <= max".into()));
        }
        // the largest shape must stay one voxel inside the field of view
        let bump = if self.kind == FamilyKind::EllipsoidBump { b.amplitude_max } else { 0.0 };
        let rmax = self.radii_max;
        let reach = match self.kind {
            FamilyKind::Twisted => {
                let xy = rmax[0].max(rmax[1]);
                [xy, xy, rmax[2]]
            }
            _ => rmax,
        };
        let (lo, hi) = self.grid.bounds();
        for a in 0..3 {
            let need = reach[a] + bump + self.center_jitter + self.grid.spacing[a];
            if -need < lo[a] || need > hi[a] {
                return Err(CoreError::Invalid(format!(
                    "shapes reach ±{need:.2} mm on axis {a}, beyond the field of view [{:.2}, {:.2}]",
                    lo[a], hi[a]
                )));
            }
        }
        Ok(())
    }

    fn draw(&self, index: usize) -> (SampleParams, Label, u64) {
        let mut rng = stream_rng(self.seed, index as u64);
        let radii = [0, 1, 2].map(|a| rng.gen_range(self.radii_min[a]..=self.radii_max[a]));
        let j = self.center_jitter;
        let center = [0, 1, 2].map(|_| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 });
        let mut p = SampleParams {
            center,
            radii,
            yaw: 0.0,
            twist: 0.0,
            bump_amplitude: 0.0,
            bump_direction: self.bump.direction,
            bump_radius: self.bump.angular_radius,
        };
        let mut label = Label::Control;
        match self.kind {
            FamilyKind::EllipsoidLinear => {}
            FamilyKind::EllipsoidBump => {
                if rng.gen::<f64>() < self.pathological_fraction {
                    label = Label::Pathological;
                    p.bump_amplitude = rng.gen_range(self.bump.amplitude_min..=self.bump.amplitude_max);
                }
            }
            FamilyKind::Twisted => {
                if self.yaw_max > 0.0 {
                    p.yaw = rng.gen_range(-self.yaw_max..=self.yaw_max);
                }
                if self.twist_max > 0.0 {
                    p.twist = rng.gen_range(-self.twist_max..=self.twist_max);
                }
            }
        }
        (p, label, rng.gen())
    }

    pub fn render(&self, params: &SampleParams, noise_seed: u64) -> Result<Volume> {
        let scale = logistic_scale(self.grid.min_spacing());
        let mut v = Volume::from_fn(self.grid, |x| occupancy(params.signed_distance(x), scale))?;
        if self.noise > 0.0 {
            let mut rng = stream_rng(noise_seed, 0);
            for x in v.data.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *x += self.noise * e;
            }
        }
        Ok(v)
    }

    pub fn sample(&self, index: usize) -> Result<GroundTruthSample> {
        let (params, label, noise_seed) = self.draw(index);
        let id = format!("sample_{index:04}");
        let correspondences = params.correspondences(&id, self.num_particles)?;
        let volume = self.render(&params, noise_seed)?;
        Ok(GroundTruthSample { id, kind: self.kind, label, params, volume, correspondences })
    }

    /// Samples `0..n`, each from its own random stream.
    pub fn generate(&self, n: usize) -> Result<Vec<GroundTruthSample>> {
        if n < 2 {
            return Err(CoreError::Invalid(format!("population size must be >= 2, got {n}")));
        }
        self.validate()?;
        (0..n).into_par_iter().map(|i| self.sample(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parametrization_origin() {
        let p = ellipsoid_point([1.0, 2.0, 3.0], [5.0, 4.0, 3.0], 0.0, 0.0);
        assert_eq!(p, [6.0, 2.0, 3.0]);
    }

    #[test]
    fn field_of_view_is_checked() {
        let f = SyntheticFamily { radii_max: [40.0, 16.0, 14.0], ..Default::default() };
        assert!(f.generate(2).is_err());
        assert!(SyntheticFamily::default().generate(1).is_err());
    }

    #[test]
    fn particles_lie_on_surface() {
        let f = SyntheticFamily::default();
        let s = f.sample(3).unwrap();
        let surf = s.params.surface().unwrap();
        for p in &s.correspondences.points {
            assert!(surf.distance(*p) < 1e-8);
            assert!(s.params.signed_distance(*p).abs() < 1e-8);
        }
    }
}
