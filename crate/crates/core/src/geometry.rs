//! Cell-free deployment: AP and user placement on a disc, three-slope
//! large-scale fading and integer propagation offsets.
//!
//! Offsets are measured per user relative to its nearest AP, so for each
//! user exactly one AP (the lowest-index argmin of distance) has `tau = 0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Three-slope path-loss law with a COST-231 Hata path-loss constant.
///
/// Below `d0` the loss is flat, between `d0` and `d1` it decays with
/// exponent 1.5 + 2.0 referenced to `d1`/`d`, beyond `d1` with exponent 3.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreeSlopeModel {
    /// Inner breakpoint (m).
    pub d0_m: f64,
    /// Outer breakpoint (m).
    pub d1_m: f64,
    pub carrier_mhz: f64,
    pub ap_height_m: f64,
    pub user_height_m: f64,
}

impl Default for ThreeSlopeModel {
    fn default() -> Self {
        Self {
            d0_m: 10.0,
            d1_m: 50.0,
            carrier_mhz: 1900.0,
            ap_height_m: 15.0,
            user_height_m: 1.65,
        }
    }
}

impl ThreeSlopeModel {
    /// COST-231 Hata constant `L` in dB.
    pub fn path_loss_constant_db(&self) -> f64 {
        let lf = self.carrier_mhz.log10();
        46.3 + 33.9 * lf - 13.82 * self.ap_height_m.log10()
            - (1.1 * lf - 0.7) * self.user_height_m
            + (1.56 * lf - 0.8)
    }

    /// Path gain in dB (negative) at distance `d` metres.
    pub fn gain_db(&self, d: f64) -> f64 {
        let l = self.path_loss_constant_db();
        // the law is written with distances in km
        let d_km = d.max(self.d0_m) / 1e3;
        let d0 = self.d0_m / 1e3;
        let d1 = self.d1_m / 1e3;
        if d_km > d1 {
            -l - 35.0 * d_km.log10()
        } else if d_km > d0 {
            -l - 15.0 * d1.log10() - 20.0 * d_km.log10()
        } else {
            -l - 15.0 * d1.log10() - 20.0 * d0.log10()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0_m > 0.0 && self.d1_m > self.d0_m) {
            return Err(Error::InvalidConfig(format!(
                "breakpoints must satisfy 0 < d0 < d1 (got d0={}, d1={})",
                self.d0_m, self.d1_m
            )));
        }
        if !(self.carrier_mhz > 0.0 && self.ap_height_m > 0.0 && self.user_height_m > 0.0) {
            return Err(Error::InvalidConfig(
                "carrier and antenna heights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear large-scale power gain at distance `d` metres.
///
/// `d <= d0` (including co-location) evaluates to the flat inner value.
pub fn large_scale_gain(d: f64, model: &ThreeSlopeModel) -> f64 {
    10f64.powf(model.gain_db(d) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub radius_m: f64,
    pub num_aps: usize,
    pub num_users: usize,
    pub path_loss: ThreeSlopeModel,
    /// Log-normal shadowing standard deviation in dB; `None` disables it.
    pub shadowing_db: Option<f64>,
    /// Floor applied to AP-user distances before evaluating path loss.
    pub min_distance_m: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            radius_m: 1000.0,
            num_aps: 8,
            num_users: 4,
            path_loss: ThreeSlopeModel::default(),
            shadowing_db: None,
            min_distance_m: 1.0,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_aps == 0 || self.num_users == 0 {
            return Err(Error::InvalidConfig("K and U must be at least 1".into()));
        }
        if !(self.radius_m > 0.0) {
            return Err(Error::InvalidConfig("area radius must be positive".into()));
        }
        if let Some(s) = self.shadowing_db {
            if !(s >= 0.0) {
                return Err(Error::InvalidConfig("shadowing std must be >= 0".into()));
            }
        }
        self.path_loss.validate()
    }
}

/// Sample interval `T_s = 1 / (M * spacing)`.
pub fn sample_interval(num_subcarriers: usize, spacing_hz: f64) -> f64 {
    1.0 / (num_subcarriers as f64 * spacing_hz)
}

/// Largest offset attainable on a disc of radius `radius_m`: two points are
/// at most `2R` apart, and offsets keep only the integer part.
pub fn max_time_offset(radius_m: f64, sample_interval_s: f64) -> usize {
    (2.0 * radius_m / (SPEED_OF_LIGHT * sample_interval_s)).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub ap_positions: Vec<Point>,
    pub user_positions: Vec<Point>,
    /// `[k][u]`, metres.
    pub distances: Vec<Vec<f64>>,
    /// `[k][u]`, linear power gain.
    pub beta: Vec<Vec<f64>>,
    /// `[k][u]`, samples.
    pub tau: Vec<Vec<usize>>,
    pub radius_m: f64,
    pub sample_interval_s: f64,
}

impl NetworkLayout {
    /// Builds a layout from explicit positions; shadowing terms (dB, `[k][u]`)
    /// are optional.
    pub fn from_positions(
        ap_positions: Vec<Point>,
        user_positions: Vec<Point>,
        cfg: &GeometryConfig,
        sample_interval_s: f64,
        shadowing_db: Option<&[Vec<f64>]>,
    ) -> Self {
        let distances: Vec<Vec<f64>> = ap_positions
            .iter()
            .map(|ap| {
                user_positions
                    .iter()
                    .map(|ue| ap.distance(ue).max(cfg.min_distance_m))
                    .collect()
            })
            .collect();
        let beta = distances
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(u, &d)| {
                        let shadow = shadowing_db.map_or(0.0, |s| s[k][u]);
                        10f64.powf((cfg.path_loss.gain_db(d) + shadow) / 10.0)
                    })
                    .collect()
            })
            .collect();
        let tau = time_offsets(&distances, sample_interval_s);
        Self {
            ap_positions,
            user_positions,
            distances,
            beta,
            tau,
            radius_m: cfg.radius_m,
            sample_interval_s,
        }
    }

    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_positions.len()
    }

    /// Largest offset present for user `u` over all APs.
    pub fn max_tau_for_user(&self, u: usize) -> usize {
        self.tau.iter().map(|row| row[u]).max().unwrap_or(0)
    }

    pub fn max_tau(&self) -> usize {
        (0..self.num_users())
            .map(|u| self.max_tau_for_user(u))
            .max()
            .unwrap_or(0)
    }

    /// Audit dump, one row per (AP, user) link.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,u,ap_x,ap_y,user_x,user_y,d,beta,tau\n");
        for (k, ap) in self.ap_positions.iter().enumerate() {
            for (u, ue) in self.user_positions.iter().enumerate() {
                out.push_str(&format!(
                    "{k},{u},{},{},{},{},{},{:e},{}\n",
                    ap.x, ap.y, ue.x, ue.y, self.distances[k][u], self.beta[k][u], self.tau[k][u]
                ));
            }
        }
        out
    }
}

fn uniform_in_disc<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Point {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    Point::new(r * phi.cos(), r * phi.sin())
}

/// Drops `K` APs and `U` users independently and uniformly over the disc.
pub fn place_network<R: Rng + ?Sized>(
    cfg: &GeometryConfig,
    sample_interval_s: f64,
    rng: &mut R,
) -> NetworkLayout {
    let aps: Vec<Point> = (0..cfg.num_aps)
        .map(|_| uniform_in_disc(cfg.radius_m, rng))
        .collect();
    let users: Vec<Point> = (0..cfg.num_users)
        .map(|_| uniform_in_disc(cfg.radius_m, rng))
        .collect();
    let shadow = cfg.shadowing_db.filter(|&s| s > 0.0).map(|s| {
        let normal = Normal::new(0.0, s).expect("finite std");
        (0..cfg.num_aps)
            .map(|_| (0..cfg.num_users).map(|_| normal.sample(rng)).collect())
            .collect::<Vec<Vec<f64>>>()
    });
    NetworkLayout::from_positions(aps, users, cfg, sample_interval_s, shadow.as_deref())
}

/// `tau[k][u] = floor((d[k][u] - min_k d[k][u]) / (c * T_s))`.
pub fn time_offsets(distances: &[Vec<f64>], sample_interval_s: f64) -> Vec<Vec<usize>> {
    let num_aps = distances.len();
    if num_aps == 0 {
        return Vec::new();
    }
    let num_users = distances[0].len();
    let mut tau = vec![vec![0usize; num_users]; num_aps];
    for u in 0..num_users {
        // ties go to the lowest AP index, which then gets tau = 0 exactly
        let mut nearest = 0;
        for k in 1..num_aps {
            if distances[k][u] < distances[nearest][u] {
                nearest = k;
            }
        }
        let d_min = distances[nearest][u];
        for k in 0..num_aps {
            tau[k][u] = if k == nearest {
                0
            } else {
                ((distances[k][u] - d_min) / (SPEED_OF_LIGHT * sample_interval_s)).floor() as usize
            };
        }
    }
    tau
}
