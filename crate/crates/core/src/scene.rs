//! Constellation geometry, user layout and sparse delay-angle channels.
//!
//! Satellites sit on the circumcircle of an equilateral ground triangle (for
//! three satellites, exactly at its vertices) at a common altitude; users are
//! dropped uniformly inside the triangle. Angles of arrival are derived from
//! geometry so that nearby users see nearby angles.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::linalg::{CMat, CVec, C64, ZERO};
use crate::rng::{complex_normal, derive_seed, rng_from_seed, tags};

/// Array element spacing in wavelengths.
pub const ELEMENT_SPACING: f64 = 0.5;

/// Pointing of the planar array normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Boresight {
    /// Normal points from each satellite to the triangle centroid.
    #[default]
    Centroid,
    /// Normal points straight down.
    Nadir,
}

/// Where per-link angles of arrival come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AngleSource {
    #[default]
    Geometry,
    /// Independent uniform azimuth and elevation in `[0, max_elevation)`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub num_satellites: usize,
    pub altitude_km: f64,
    pub triangle_side_km: f64,
    pub num_users: usize,
    pub array_x: usize,
    pub array_y: usize,
    #[serde(default)]
    pub boresight: Boresight,
    #[serde(default)]
    pub angle_source: AngleSource,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            num_satellites: 3,
            altitude_km: 550.0,
            triangle_side_km: 500.0,
            num_users: 100,
            array_x: 10,
            array_y: 10,
            boresight: Boresight::Centroid,
            angle_source: AngleSource::Geometry,
        }
    }
}

impl GeometryConfig {
    pub fn num_antennas(&self) -> usize {
        self.array_x * self.array_y
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_satellites == 0 {
            return Err(config_err("num_satellites must be >= 1"));
        }
        if self.num_users == 0 {
            return Err(config_err("num_users must be >= 1"));
        }
        if self.array_x == 0 || self.array_y == 0 {
            return Err(config_err("array dimensions must be >= 1"));
        }
        if !(self.altitude_km > 0.0) || !(self.triangle_side_km > 0.0) {
            return Err(config_err("altitude and triangle side must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub num_active: usize,
    pub num_paths: usize,
    /// Power ratio between the LOS tap and the NLOS taps (linear).
    pub rice_factor: f64,
    pub max_delay: usize,
}

impl ChannelParams {
    pub fn validate(&self, num_users: usize) -> Result<()> {
        if self.num_active > num_users {
            return Err(config_err(format!(
                "num_active {} exceeds num_users {}",
                self.num_active, num_users
            )));
        }
        if self.num_paths == 0 || self.num_paths > self.max_delay {
            return Err(config_err("need 1 <= num_paths <= max_delay"));
        }
        if !(self.rice_factor > 0.0) {
            return Err(config_err("rice_factor must be positive"));
        }
        Ok(())
    }
}

/// Azimuth and elevation (off the array normal) in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AnglePair {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Spatial frequencies `(mu_x, mu_y)` seen by the array.
    pub fn spatial_frequencies(&self) -> (f64, f64) {
        let k = 2.0 * PI * ELEMENT_SPACING;
        let s = self.elevation.sin();
        (k * self.azimuth.cos() * s, k * self.azimuth.sin() * s)
    }
}

/// Steering vector `v_y ⊗ v_x` with `v_s[n] = exp(-j n mu_s)`; the x index
/// runs fastest.
pub fn steering_vector(angles: AnglePair, nx: usize, ny: usize) -> CVec {
    let (mx, my) = angles.spatial_frequencies();
    steering_from_frequencies(mx, my, nx, ny)
}

pub fn steering_from_frequencies(mu_x: f64, mu_y: f64, nx: usize, ny: usize) -> CVec {
    DVector::from_fn(nx * ny, |i, _| {
        let (ix, iy) = (i % nx, i / nx);
        C64::from_polar(1.0, -(ix as f64 * mu_x + iy as f64 * mu_y))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub geometry: GeometryConfig,
    /// Satellite positions in km (x, y, z).
    pub satellites: Vec<[f64; 3]>,
    /// Ground user positions in km.
    pub users: Vec<[f64; 3]>,
    /// `angles[k][q]` for user `k` seen from satellite `q`.
    pub angles: Vec<Vec<AnglePair>>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Ground triangle vertices, centred on the origin.
pub fn triangle_vertices(side_km: f64) -> [[f64; 3]; 3] {
    let r = side_km / 3f64.sqrt();
    let mut v = [[0.0; 3]; 3];
    for (i, p) in v.iter_mut().enumerate() {
        let a = PI / 2.0 + 2.0 * PI * i as f64 / 3.0;
        *p = [r * a.cos(), r * a.sin(), 0.0];
    }
    v
}

/// Angle of arrival of `target` at an array located at `sat`.
pub fn angle_of_arrival(sat: [f64; 3], target: [f64; 3], boresight: Boresight) -> AnglePair {
    let normal = match boresight {
        Boresight::Centroid => unit(sub([0.0, 0.0, 0.0], sat)),
        Boresight::Nadir => [0.0, 0.0, -1.0],
    };
    // array x axis: global x projected onto the array plane
    let gx = [1.0, 0.0, 0.0];
    let proj = dot(gx, normal);
    let ex = unit([gx[0] - proj * normal[0], gx[1] - proj * normal[1], gx[2] - proj * normal[2]]);
    let ey = cross(normal, ex);
    let d = unit(sub(target, sat));
    let elevation = dot(d, normal).clamp(-1.0, 1.0).acos();
    let azimuth = dot(d, ey).atan2(dot(d, ex));
    AnglePair { azimuth, elevation }
}

pub fn sample_scene<R: Rng + ?Sized>(geom: &GeometryConfig, rng: &mut R) -> Scene {
    let tri = triangle_vertices(geom.triangle_side_km);
    let q = geom.num_satellites;
    let r = geom.triangle_side_km / 3f64.sqrt();
    let satellites: Vec<[f64; 3]> = (0..q)
        .map(|i| {
            let a = PI / 2.0 + 2.0 * PI * i as f64 / q as f64;
            [r * a.cos(), r * a.sin(), geom.altitude_km]
        })
        .collect();
    let users: Vec<[f64; 3]> = (0..geom.num_users)
        .map(|_| {
            // uniform point in a triangle by reflecting the unit square
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let mut p = [0.0; 3];
            for d in 0..2 {
                p[d] = tri[0][d] + u * (tri[1][d] - tri[0][d]) + v * (tri[2][d] - tri[0][d]);
            }
            p
        })
        .collect();
    let angles = match geom.angle_source {
        AngleSource::Geometry => users
            .iter()
            .map(|&u| satellites.iter().map(|&s| angle_of_arrival(s, u, geom.boresight)).collect())
            .collect(),
        AngleSource::Random => (0..geom.num_users)
            .map(|_| {
                (0..q)
                    .map(|_| AnglePair {
                        azimuth: rng.random_range(-PI..PI),
                        elevation: rng.random_range(0.0..PI / 3.0),
                    })
                    .collect()
            })
            .collect(),
    };
    Scene { geometry: geom.clone(), satellites, users, angles }
}

/// Activity vector with exactly `num_active` ones on a uniformly random support.
pub fn sample_activity<R: Rng + ?Sized>(num_users: usize, num_active: usize, rng: &mut R) -> Result<Vec<bool>> {
    if num_active > num_users {
        return Err(config_err(format!("num_active {num_active} exceeds num_users {num_users}")));
    }
    let mut alpha = vec![false; num_users];
    for k in sample(rng, num_users, num_active) {
        alpha[k] = true;
    }
    Ok(alpha)
}

/// Delay-domain response of one link at the reference antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct Cir {
    /// Occupied delays, LOS first.
    pub taps: Vec<usize>,
    pub gains: Vec<C64>,
    /// Length-`L` response.
    pub response: Vec<C64>,
}

pub fn sample_cir<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Cir {
    let l = params.max_delay;
    let p = params.num_paths;
    let los = rng.random_range(0..=l - p);
    let mut taps = vec![los];
    let mut gains = Vec::with_capacity(p);
    if p == 1 {
        gains.push(C64::new(1.0, 0.0));
    } else {
        let kf = params.rice_factor;
        gains.push(C64::new((kf / (kf + 1.0)).sqrt(), 0.0));
        let later = l - 1 - los;
        let mut nlos: Vec<usize> = sample(rng, later, p - 1).into_iter().map(|i| los + 1 + i).collect();
        nlos.sort_unstable();
        let var = 1.0 / ((kf + 1.0) * (p - 1) as f64);
        for d in nlos {
            taps.push(d);
            gains.push(complex_normal(rng, var));
        }
    }
    let mut response = vec![ZERO; l];
    for (&t, &g) in taps.iter().zip(&gains) {
        response[t] += g;
    }
    Cir { taps, gains, response }
}

/// Ground-truth channels for every satellite.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub activity: Vec<bool>,
    pub active_set: Vec<usize>,
    /// Stacked CIR matrices `[K L x N_r]`, one per satellite.
    pub cirm: Vec<CMat>,
    /// `angles[k][q]`.
    pub angles: Vec<Vec<AnglePair>>,
    /// `cirs[k][q]`; inactive users still carry a (unused) draw.
    pub cirs: Vec<Vec<Cir>>,
    pub max_delay: usize,
}

impl ChannelRealization {
    pub fn num_users(&self) -> usize {
        self.activity.len()
    }

    /// Row indices of `cirm[q]` that are nonzero.
    pub fn row_support(&self, q: usize) -> Vec<usize> {
        let l = self.max_delay;
        let mut rows = Vec::new();
        for &k in &self.active_set {
            let mut taps = self.cirs[k][q].taps.clone();
            taps.sort_unstable();
            taps.dedup();
            rows.extend(taps.into_iter().filter(|&t| self.cirs[k][q].response[t] != ZERO).map(|t| k * l + t));
        }
        rows.sort_unstable();
        rows
    }
}

/// Stack `H_{k,q} = alpha_k h_{k,q} ∘ a_r(theta, phi)` into per-satellite matrices.
pub fn build_cirm(scene: &Scene, activity: &[bool], cirs: Vec<Vec<Cir>>, max_delay: usize) -> ChannelRealization {
    let g = &scene.geometry;
    let nr = g.num_antennas();
    let k_users = activity.len();
    let mut cirm = vec![CMat::zeros(k_users * max_delay, nr); g.num_satellites];
    for (k, &active) in activity.iter().enumerate() {
        if !active {
            continue;
        }
        for (q, h) in cirm.iter_mut().enumerate() {
            let a = steering_vector(scene.angles[k][q], g.array_x, g.array_y);
            for (l, &tap) in cirs[k][q].response.iter().enumerate() {
                if tap == ZERO {
                    continue;
                }
                for j in 0..nr {
                    h[(k * max_delay + l, j)] = tap * a[j];
                }
            }
        }
    }
    let active_set = activity.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k).collect();
    ChannelRealization {
        activity: activity.to_vec(),
        active_set,
        cirm,
        angles: scene.angles.clone(),
        cirs,
        max_delay,
    }
}

/// Draw activity and all link responses from a trial seed.
pub fn sample_realization(scene: &Scene, params: &ChannelParams, seed: u64) -> Result<ChannelRealization> {
    let k_users = scene.geometry.num_users;
    params.validate(k_users)?;
    let mut arng = rng_from_seed(derive_seed(seed, &[tags::ACTIVITY]));
    let activity = sample_activity(k_users, params.num_active, &mut arng)?;
    let cirs = (0..k_users)
        .map(|k| {
            (0..scene.geometry.num_satellites)
                .map(|q| {
                    let mut crng = rng_from_seed(derive_seed(seed, &[tags::CHANNEL, k as u64, q as u64]));
                    sample_cir(params, &mut crng)
                })
                .collect()
        })
        .collect();
    Ok(build_cirm(scene, &activity, cirs, params.max_delay))
}
