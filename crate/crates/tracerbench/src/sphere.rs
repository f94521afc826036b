//! Spherical grid geometry, hybrid vertical levels, and mass bookkeeping.
//!
//! Everything downstream (the reference solver, the emulator stepper, the mass
//! ledger) leans on three facts established here:
//!
//! * cell areas are exact integrals   A = r²·Δλ·(sin φ_top − sin φ_bot),
//!   so they sum to the sphere area 4πr² to roundoff;
//! * the air mass of a grid cell is   m = A·Δp/g   with Δp the pressure
//!   thickness of its hybrid layer (hydrostatic column weight);
//! * tracer mass is mixing ratio (ppm, mass basis) times air mass times 1e-6.
//!
//! Latitude index 0 is the southernmost row; level index 0 is the lowest
//! (surface) layer. All angles in the public API are degrees.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::csum;

/// Standard gravity [m/s²].
pub const GRAVITY: f64 = 9.80665;
/// Mean planetary radius [m].
pub const EARTH_RADIUS_M: f64 = 6.371e6;
/// kg per petagram.
pub const KG_PER_PG: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SphereError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid hybrid levels: {0}")]
    InvalidLevels(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Regular latitude–longitude grid with equiangular cell-center spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Planetary radius [m].
    pub radius_m: f64,
}

impl Grid {
    /// Equiangular grid: `n_lat` rows of height 180°/n_lat spanning pole to
    /// pole, `n_lon` columns of width 360°/n_lon.
    pub fn equiangular(n_lat: usize, n_lon: usize) -> Result<Self, SphereError> {
        if n_lat < 2 || n_lon < 4 {
            return Err(SphereError::InvalidGrid(format!(
                "grid {n_lat}x{n_lon} too small (need n_lat >= 2, n_lon >= 4)"
            )));
        }
        Ok(Self { n_lat, n_lon, radius_m: EARTH_RADIUS_M })
    }

    /// Longitude spacing [deg]; n_lon·Δλ = 360 by construction.
    pub fn d_lon_deg(&self) -> f64 {
        360.0 / self.n_lon as f64
    }

    /// Latitude spacing [deg].
    pub fn d_lat_deg(&self) -> f64 {
        180.0 / self.n_lat as f64
    }

    /// Latitude of cell edge `i` (0 ..= n_lat), strictly increasing −90 → +90.
    pub fn lat_edge_deg(&self, i: usize) -> f64 {
        -90.0 + 180.0 * i as f64 / self.n_lat as f64
    }

    /// Latitude of the center of row `i`.
    pub fn lat_center_deg(&self, i: usize) -> f64 {
        -90.0 + 180.0 * (i as f64 + 0.5) / self.n_lat as f64
    }

    /// Longitude of the center of column `j`, in [0, 360).
    pub fn lon_center_deg(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.d_lon_deg()
    }

    /// Exact area of one cell in row `i` [m²]: r²·Δλ·(sin φ_top − sin φ_bot).
    /// Every cell in a row has the same area; polar rows get the exact
    /// spherical-cap wedge.
    pub fn cell_area_row(&self, i: usize) -> f64 {
        let dlon_rad = self.d_lon_deg().to_radians();
        let s_top = self.lat_edge_deg(i + 1).to_radians().sin();
        let s_bot = self.lat_edge_deg(i).to_radians().sin();
        self.radius_m * self.radius_m * dlon_rad * (s_top - s_bot)
    }

    /// Per-row cell areas [m²], length n_lat.
    pub fn cell_areas_per_row(&self) -> Array1<f64> {
        Array1::from_iter((0..self.n_lat).map(|i| self.cell_area_row(i)))
    }

    /// Full [lat, lon] area field [m²].
    pub fn cell_areas(&self) -> Array2<f64> {
        let rows = self.cell_areas_per_row();
        Array2::from_shape_fn((self.n_lat, self.n_lon), |(i, _)| rows[i])
    }

    /// Total sphere surface area 4πr² [m²].
    pub fn sphere_area(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.radius_m * self.radius_m
    }

    /// Great-circle distance between two (lat, lon) points in degrees [m].
    pub fn great_circle_m(&self, lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        let (p1, l1) = (lat1.to_radians(), lon1.to_radians());
        let (p2, l2) = (lat2.to_radians(), lon2.to_radians());
        let dl = l2 - l1;
        // Vincenty form of the central angle: stable at small separations.
        let num = ((p2.cos() * dl.sin()).powi(2)
            + (p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos()).powi(2))
        .sqrt();
        let den = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        self.radius_m * num.atan2(den)
    }
}

/// Hybrid sigma-pressure vertical coordinate.
///
/// Interface pressures are `p_k = a_k + b_k·p_surf` in hPa, with `n_lev + 1`
/// interfaces indexed bottom-up: interface 0 is the surface (b = 1), interface
/// `n_lev` the model top (b = 0). Layer `k` lies between interfaces `k` and
/// `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridLevels {
    /// Pressure offsets per interface [hPa].
    pub a_hpa: Vec<f64>,
    /// Surface-pressure weights per interface, 1 → 0 bottom-up.
    pub b: Vec<f64>,
}

impl HybridLevels {
    pub fn new(a_hpa: Vec<f64>, b: Vec<f64>) -> Result<Self, SphereError> {
        if a_hpa.len() != b.len() || a_hpa.len() < 2 {
            return Err(SphereError::InvalidLevels(
                "need matching a/b with at least two interfaces".into(),
            ));
        }
        if (b[0] - 1.0).abs() > 1e-12 || b[b.len() - 1].abs() > 1e-12 {
            return Err(SphereError::InvalidLevels(
                "b must run from 1 at the surface to 0 at the top".into(),
            ));
        }
        let lv = Self { a_hpa, b };
        // Monotonic decreasing interface pressure at a reference surface pressure.
        let p = lv.interface_pressures_hpa(1013.25);
        if !p.windows(2).all(|w| w[0] > w[1]) {
            return Err(SphereError::InvalidLevels(
                "interface pressures must decrease monotonically upward".into(),
            ));
        }
        Ok(lv)
    }

    /// Pure sigma levels with `n_lev` equal-thickness layers: a = 0, b evenly
    /// spaced from 1 (surface) to 0 (top).
    pub fn uniform_sigma(n_lev: usize) -> Result<Self, SphereError> {
        if n_lev == 0 {
            return Err(SphereError::InvalidLevels("need at least one layer".into()));
        }
        let b: Vec<f64> = (0..=n_lev).map(|k| 1.0 - k as f64 / n_lev as f64).collect();
        Self::new(vec![0.0; n_lev + 1], b)
    }

    pub fn n_lev(&self) -> usize {
        self.a_hpa.len() - 1
    }

    /// Interface pressures [hPa] for a given surface pressure [hPa], bottom-up.
    pub fn interface_pressures_hpa(&self, p_surf_hpa: f64) -> Vec<f64> {
        self.a_hpa
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a + b * p_surf_hpa)
            .collect()
    }

    /// Mid-layer pressures [hPa], bottom-up, length n_lev.
    pub fn mid_pressures_hpa(&self, p_surf_hpa: f64) -> Vec<f64> {
        let p = self.interface_pressures_hpa(p_surf_hpa);
        p.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Merge groups of adjacent layers by dropping interior interfaces.
    /// `groups` lists the number of fine layers per merged layer, bottom-up,
    /// and must sum to `n_lev()`. Air mass is conserved exactly because the
    /// surviving interfaces are untouched.
    pub fn merge_layers(&self, groups: &[usize]) -> Result<Self, SphereError> {
        let total: usize = groups.iter().sum();
        if total != self.n_lev() || groups.iter().any(|&g| g == 0) {
            return Err(SphereError::InvalidLevels(format!(
                "groups {groups:?} do not partition {} layers",
                self.n_lev()
            )));
        }
        let mut a = vec![self.a_hpa[0]];
        let mut b = vec![self.b[0]];
        let mut k = 0;
        for &g in groups {
            k += g;
            a.push(self.a_hpa[k]);
            b.push(self.b[k]);
        }
        Self::new(a, b)
    }
}

/// Air mass per cell [kg] as a [lev, lat, lon] field.
///
/// m = A·(p_lower − p_upper)·100/g, the hydrostatic weight of the layer
/// (hPa → Pa gives the factor 100).
pub fn air_mass(
    grid: &Grid,
    levels: &HybridLevels,
    p_surf_hpa: &Array2<f64>,
) -> Result<Array3<f64>, SphereError> {
    if p_surf_hpa.dim() != (grid.n_lat, grid.n_lon) {
        return Err(SphereError::ShapeMismatch(format!(
            "p_surf {:?} vs grid {}x{}",
            p_surf_hpa.dim(),
            grid.n_lat,
            grid.n_lon
        )));
    }
    if p_surf_hpa.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(SphereError::InvalidGrid("p_surf must be finite and positive".into()));
    }
    let areas = grid.cell_areas_per_row();
    let n_lev = levels.n_lev();
    let mut m = Array3::zeros((n_lev, grid.n_lat, grid.n_lon));
    for k in 0..n_lev {
        let da = levels.a_hpa[k] - levels.a_hpa[k + 1];
        let db = levels.b[k] - levels.b[k + 1];
        for i in 0..grid.n_lat {
            for j in 0..grid.n_lon {
                let dp_hpa = da + db * p_surf_hpa[(i, j)];
                m[(k, i, j)] = areas[i] * dp_hpa * 100.0 / GRAVITY;
            }
        }
    }
    Ok(m)
}

/// Total tracer mass [kg] of a mixing-ratio field (ppm, mass basis):
/// M = Σ μ·1e-6·m_air, accumulated with compensated summation.
pub fn tracer_mass_kg(mu_ppm: &Array3<f64>, air_mass_kg: &Array3<f64>) -> Result<f64, SphereError> {
    if mu_ppm.dim() != air_mass_kg.dim() {
        return Err(SphereError::ShapeMismatch(format!(
            "mu {:?} vs air mass {:?}",
            mu_ppm.dim(),
            air_mass_kg.dim()
        )));
    }
    Ok(csum(
        mu_ppm
            .iter()
            .zip(air_mass_kg.iter())
            .map(|(mu, m)| mu * 1e-6 * m),
    ))
}

/// Total air mass [kg].
pub fn total_air_mass_kg(air_mass_kg: &Array3<f64>) -> f64 {
    csum(air_mass_kg.iter().copied())
}

pub fn kg_to_pg(kg: f64) -> f64 {
    kg / KG_PER_PG
}

/// One atmospheric snapshot: tracer + meteorology on a fixed grid.
///
/// 3D fields are [lev, lat, lon]; `mu_ppm` is the CO₂ mass mixing ratio in
/// ppm, meteorology follows the dataset variable registry (winds in m/s,
/// pressure velocity in Pa/s, temperature in K, specific humidity in kg/kg,
/// geopotential height in m).
#[derive(Debug, Clone)]
pub struct AtmosState {
    pub time: chrono::NaiveDateTime,
    pub mu_ppm: Array3<f64>,
    pub u: Array3<f64>,
    pub v: Array3<f64>,
    pub omega: Array3<f64>,
    pub t: Array3<f64>,
    pub q: Array3<f64>,
    pub z: Array3<f64>,
    pub p_surf_hpa: Array2<f64>,
}

impl AtmosState {
    /// All-field finiteness check (debug validation for store round trips).
    pub fn is_finite(&self) -> bool {
        let f3 = |a: &Array3<f64>| a.iter().all(|x| x.is_finite());
        f3(&self.mu_ppm)
            && f3(&self.u)
            && f3(&self.v)
            && f3(&self.omega)
            && f3(&self.t)
            && f3(&self.q)
            && f3(&self.z)
            && self.p_surf_hpa.iter().all(|x| x.is_finite())
    }
}

/// Surface CO₂ fluxes [kg/m²/s], valid over one timestep interval [t, t+Δt).
/// Sign convention: positive into the atmosphere.
#[derive(Debug, Clone)]
pub struct FluxField {
    pub land: Array2<f64>,
    pub ocean: Array2<f64>,
    pub anth: Array2<f64>,
}

impl FluxField {
    pub fn zeros(n_lat: usize, n_lon: usize) -> Self {
        Self {
            land: Array2::zeros((n_lat, n_lon)),
            ocean: Array2::zeros((n_lat, n_lon)),
            anth: Array2::zeros((n_lat, n_lon)),
        }
    }

    /// Elementwise total flux.
    pub fn total(&self) -> Array2<f64> {
        &self.land + &self.ocean + &self.anth
    }

    /// Globally integrated injected tracer mass over one interval [kg]:
    /// Σ F·A·Δt with compensated summation.
    pub fn mass_kg(&self, grid: &Grid, dt_seconds: f64) -> f64 {
        let areas = grid.cell_areas_per_row();
        let mut terms = Vec::with_capacity(grid.n_lat * grid.n_lon);
        for i in 0..grid.n_lat {
            for j in 0..grid.n_lon {
                let f = self.land[(i, j)] + self.ocean[(i, j)] + self.anth[(i, j)];
                terms.push(f * areas[i] * dt_seconds);
            }
        }
        csum(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn areas_sum_to_sphere_area() {
        for (nlat, nlon) in [(4, 8), (32, 64), (45, 72)] {
            let g = Grid::equiangular(nlat, nlon).unwrap();
            let total = csum(g.cell_areas().iter().copied());
            assert_relative_eq!(total, g.sphere_area(), max_relative = 1e-12);
        }
    }

    #[test]
    fn sphere_area_matches_handbook_value() {
        let g = Grid::equiangular(32, 64).unwrap();
        // 4π·(6.371e6)² ≈ 5.10064e14 m²
        assert_relative_eq!(g.sphere_area(), 5.10064e14, max_relative = 1e-5);
    }

    #[test]
    fn areas_positive_and_equal_within_row() {
        let g = Grid::equiangular(7, 12).unwrap();
        let a = g.cell_areas();
        for i in 0..7 {
            for j in 0..12 {
                assert!(a[(i, j)] > 0.0);
                assert_eq!(a[(i, j)], a[(i, 0)]);
            }
        }
    }

    #[test]
    fn polar_row_area_is_exact_cap_wedge() {
        let g = Grid::equiangular(32, 64).unwrap();
        // Exact cap area above the last interior edge, divided into n_lon wedges.
        let cap = 2.0 * std::f64::consts::PI
            * g.radius_m
            * g.radius_m
            * (1.0 - g.lat_edge_deg(31).to_radians().sin());
        assert_relative_eq!(g.cell_area_row(31), cap / 64.0, max_relative = 1e-13);
    }

    #[test]
    fn lat_edges_monotone_and_bounded() {
        let g = Grid::equiangular(15, 16).unwrap();
        for i in 0..15 {
            assert!(g.lat_edge_deg(i) < g.lat_edge_deg(i + 1));
        }
        assert_eq!(g.lat_edge_deg(0), -90.0);
        assert_eq!(g.lat_edge_deg(15), 90.0);
        assert_eq!(g.d_lon_deg() * 16.0, 360.0);
    }

    #[test]
    fn uniform_sigma_levels_partition_column() {
        let lv = HybridLevels::uniform_sigma(5).unwrap();
        assert_eq!(lv.n_lev(), 5);
        assert_eq!(lv.b[0], 1.0);
        assert_eq!(lv.b[5], 0.0);
        let p = lv.interface_pressures_hpa(1000.0);
        assert_relative_eq!(p[0], 1000.0);
        assert_relative_eq!(p[5], 0.0);
        // Equal thickness layers.
        for w in p.windows(2) {
            assert_relative_eq!(w[0] - w[1], 200.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn total_air_mass_at_standard_pressure() {
        // Uniform 1013.25 hPa column over the whole sphere ≈ 5.27e18 kg.
        let g = Grid::equiangular(32, 64).unwrap();
        let lv = HybridLevels::uniform_sigma(5).unwrap();
        let ps = Array2::from_elem((32, 64), 1013.25);
        let m = air_mass(&g, &lv, &ps).unwrap();
        let total = total_air_mass_kg(&m);
        let expect = g.sphere_area() * 101325.0 / GRAVITY;
        assert_relative_eq!(total, expect, max_relative = 1e-12);
        assert_relative_eq!(total, 5.27e18, max_relative = 1e-3);
    }

    #[test]
    fn air_mass_positive_and_level_sums_match_column_weight() {
        let g = Grid::equiangular(8, 16).unwrap();
        let lv = HybridLevels::new(vec![10.0, 5.0, 0.0], vec![1.0, 0.4, 0.0]).unwrap();
        let ps = Array2::from_shape_fn((8, 16), |(i, j)| 950.0 + i as f64 + 0.1 * j as f64);
        let m = air_mass(&g, &lv, &ps).unwrap();
        assert!(m.iter().all(|&x| x > 0.0));
        for i in 0..8 {
            for j in 0..16 {
                let col: f64 = (0..2).map(|k| m[(k, i, j)]).sum();
                let expect = g.cell_area_row(i) * (10.0 + ps[(i, j)]) * 100.0 / GRAVITY;
                assert_relative_eq!(col, expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn tracer_mass_of_uniform_field() {
        let g = Grid::equiangular(8, 16).unwrap();
        let lv = HybridLevels::uniform_sigma(3).unwrap();
        let ps = Array2::from_elem((8, 16), 1013.25);
        let m = air_mass(&g, &lv, &ps).unwrap();
        let mu = Array3::from_elem((3, 8, 16), 400.0);
        let total = tracer_mass_kg(&mu, &m).unwrap();
        assert_relative_eq!(total, 400e-6 * total_air_mass_kg(&m), max_relative = 1e-13);
    }

    #[test]
    fn merge_layers_conserves_air_mass() {
        let g = Grid::equiangular(4, 8).unwrap();
        let fine = HybridLevels::uniform_sigma(6).unwrap();
        let coarse = fine.merge_layers(&[2, 2, 2]).unwrap();
        let ps = Array2::from_elem((4, 8), 987.0);
        let mf = air_mass(&g, &fine, &ps).unwrap();
        let mc = air_mass(&g, &coarse, &ps).unwrap();
        assert_relative_eq!(total_air_mass_kg(&mf), total_air_mass_kg(&mc), max_relative = 1e-13);
        // Groups that do not partition the column are rejected.
        assert!(fine.merge_layers(&[2, 2]).is_err());
    }

    #[test]
    fn flux_mass_integrates_area_and_time() {
        let g = Grid::equiangular(4, 8).unwrap();
        let mut fx = FluxField::zeros(4, 8);
        fx.anth[(2, 3)] = 1e-8;
        let dt = 21600.0;
        assert_relative_eq!(
            fx.mass_kg(&g, dt),
            1e-8 * g.cell_area_row(2) * dt,
            max_relative = 1e-13
        );
    }

    #[test]
    fn great_circle_basics() {
        let g = Grid::equiangular(32, 64).unwrap();
        // Quarter circumference pole-to-equator.
        let quarter = 0.5 * std::f64::consts::PI * g.radius_m;
        assert_relative_eq!(g.great_circle_m(0.0, 0.0, 90.0, 0.0), quarter, max_relative = 1e-12);
        assert_eq!(g.great_circle_m(12.0, 34.0, 12.0, 34.0), 0.0);
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(Grid::equiangular(1, 8).is_err());
        assert!(Grid::equiangular(8, 2).is_err());
        assert!(HybridLevels::new(vec![0.0, 0.0], vec![0.9, 0.0]).is_err());
    }
}
