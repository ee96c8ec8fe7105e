//! Blob database: Poisson pumping, shared-flow evolution, culling, and
//! rendering of scalar-field snapshots.
//!
//! Every blob is an exactly evolved Gaussian parcel
//!
//! ```text
//! theta_b(x) = theta0 / sqrt(det I) * exp(-1/2 (x - c)^T I^-1 (x - c)),
//! ```
//!
//! with c = W(t, t0) r_c (the flow is globally linear, so centers follow
//! characteristics) and I the moment-of-inertia matrix. det I = 1 at
//! creation, so the creation peak equals theta0, and the total scalar of a
//! blob, 2 pi theta0 L^2, is conserved by both advection and diffusion.
//!
//! Two window modes are supported. `Open` spawns on a margin around the
//! window and culls blobs whose support leaves it; this is the literal
//! fixed-window reading, but the hyperbolic stagnation point of the global
//! linear flow then starves regions away from the unstable axis of
//! stretched blobs, producing a strongly inhomogeneous variance profile.
//! `Periodic` treats the window as a torus: spawning is uniform and render
//! and evaluation sum over torus images, which restores statistical
//! homogeneity exactly (all field cumulants are single-blob integrals over
//! a uniform center measure). Production runs use `Periodic`.

use crate::error::{Error, Result};
use crate::flow::{EvolutionState, FlowRealization};
use crate::geom::{Mat2, Rect, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Support cutoff in units of the blob's Gaussian width: contributions are
/// truncated outside the `SUPPORT_SIGMAS`-sigma ellipse. The tail mass
/// beyond 6 sigma is exp(-18) ~ 1.5e-8 of the peak.
pub const SUPPORT_SIGMAS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowMode {
    /// Fixed window: blobs spawn on `margin` beyond it and are culled once
    /// their support no longer intersects the expanded window.
    Open,
    /// The window is a torus; blobs never leave and all sums wrap.
    Periodic,
}

/// Poisson pumping configuration. `nu` is the blob creation rate per unit
/// time per unit L^2 of area.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PumpingConfig {
    pub nu: f64,
    pub amp_sigma: f64,
    pub spawn_margin: f64,
}

impl PumpingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("nu = {}", self.nu)));
        }
        if !(self.amp_sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("amp_sigma = {}", self.amp_sigma)));
        }
        if !(self.spawn_margin >= 3.0) {
            return Err(Error::InvalidParameter(format!(
                "spawn_margin = {} < 3",
                self.spawn_margin
            )));
        }
        Ok(())
    }
}

/// One Gaussian scalar parcel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Blob {
    pub t0: f64,
    pub r_c: Vec2,
    pub theta0: f64,
    pub evo: EvolutionState,
}

impl Blob {
    /// Current center, advected by the blob's own flow map.
    pub fn center(&self) -> Vec2 {
        self.evo.w.mul_vec(self.r_c)
    }

    /// Current peak amplitude theta0 / sqrt(det I).
    pub fn peak(&self) -> f64 {
        self.theta0 / self.evo.i_mat.det().sqrt()
    }
}

/// Per-blob quantities prepared once per render/eval pass.
#[derive(Clone, Copy, Debug)]
struct BlobView {
    center: Vec2,
    inv: Mat2,
    amp: f64,
    /// Support bounding-box half widths along x and y.
    half: Vec2,
    /// Principal axis (unit vector) and half length of the support along it;
    /// used to enumerate torus images of long strips.
    axis: Vec2,
    half_len: f64,
}

impl BlobView {
    fn new(b: &Blob, cutoff_sigmas: f64) -> Self {
        let i = b.evo.i_mat;
        let det = i.det();
        let inv = Mat2::new(i.d / det, -i.b / det, -i.c / det, i.a / det);
        // max |x_i - c_i| over the ellipse q(x) <= s^2 is s sqrt(I_ii)
        let half = Vec2::new(
            cutoff_sigmas * i.a.max(0.0).sqrt(),
            cutoff_sigmas * i.d.max(0.0).sqrt(),
        );
        let (_, hi) = i.sym_eigenvalues();
        BlobView {
            center: b.center(),
            inv,
            amp: b.theta0 / det.sqrt(),
            half,
            axis: i.sym_max_eigenvector(),
            half_len: cutoff_sigmas * hi.max(0.0).sqrt(),
        }
    }

    /// Contribution at `x`, truncated outside the support ellipse.
    #[inline]
    fn term(&self, x: Vec2, cutoff_sq: f64) -> f64 {
        let d = x - self.center;
        let q =
            self.inv.a * d.x * d.x + (self.inv.b + self.inv.c) * d.x * d.y + self.inv.d * d.y * d.y;
        if q > cutoff_sq {
            0.0
        } else {
            self.amp * (-0.5 * q).exp()
        }
    }
}

/// Snapshot geometry plus pixel values; `pixel_size` plays the role of the
/// resolution scale r_d. Values are stored row-major, `values[j*nx + i]`
/// sampling the pixel center `origin + ((i+0.5) ps, (j+0.5) ps)`.
#[derive(Clone, Debug)]
pub struct FieldGrid {
    pub origin: Vec2,
    pub pixel_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl FieldGrid {
    pub fn zeros(origin: Vec2, pixel_size: f64, nx: usize, ny: usize) -> Self {
        FieldGrid { origin, pixel_size, nx, ny, values: vec![0.0; nx * ny] }
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.pixel_size,
            self.origin.y + (j as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(
            self.origin.x,
            self.origin.y,
            self.origin.x + self.nx as f64 * self.pixel_size,
            self.origin.y + self.ny as f64 * self.pixel_size,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Shape of a grid to render, without the values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec2,
    pub pixel_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn bounds(&self) -> Rect {
        Rect::new(
            self.origin.x,
            self.origin.y,
            self.origin.x + self.nx as f64 * self.pixel_size,
            self.origin.y + self.ny as f64 * self.pixel_size,
        )
    }
}

/// All live blobs sharing one flow realization and one clock.
#[derive(Clone, Debug)]
pub struct BlobDatabase {
    pub blobs: Vec<Blob>,
    pub t_now: f64,
    pub window: Rect,
    pub mode: WindowMode,
    pub cull_threshold: f64,
    pub spawn_margin: f64,
}

const SPAWN_TAG: u64 = 0x7370776e; // "spwn"

impl BlobDatabase {
    pub fn new(window: Rect, mode: WindowMode, cull_threshold: f64, spawn_margin: f64) -> Self {
        BlobDatabase { blobs: Vec::new(), t_now: 0.0, window, mode, cull_threshold, spawn_margin }
    }

    /// Region where blob centers may be created.
    pub fn spawn_region(&self) -> Rect {
        match self.mode {
            WindowMode::Open => self.window.expand(self.spawn_margin),
            WindowMode::Periodic => self.window,
        }
    }

    /// Adds Poisson(nu * area * (t_to - t_from)) blobs with centers uniform
    /// over the spawn region, creation times uniform in `[t_from, t_to)`
    /// and amplitudes ~ Normal(0, amp_sigma^2). Deterministic given
    /// `rng_stream`.
    pub fn spawn(
        &mut self,
        pumping: &PumpingConfig,
        flow: &FlowRealization,
        t_from: f64,
        t_to: f64,
        rng_stream: u64,
    ) -> Result<usize> {
        pumping.validate()?;
        if t_to < t_from {
            return Err(Error::NegativeDuration { t_from, t_to });
        }
        let region = self.spawn_region();
        let mean = pumping.nu * region.area() * (t_to - t_from);
        if mean == 0.0 {
            return Ok(0);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::flow::substream_seed(rng_stream, SPAWN_TAG, 0));
        let count = Poisson::new(mean)
            .map_err(|e| Error::InvalidParameter(format!("poisson mean: {e}")))?
            .sample(&mut rng) as usize;
        self.blobs.reserve(count);
        for _ in 0..count {
            let t0 = t_from + rng.gen::<f64>() * (t_to - t_from);
            let r_c = Vec2::new(
                region.x0 + rng.gen::<f64>() * region.width(),
                region.y0 + rng.gen::<f64>() * region.height(),
            );
            let theta0: f64 =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    * pumping.amp_sigma;
            self.blobs.push(Blob { t0, r_c, theta0, evo: EvolutionState::at_creation(t0, flow) });
        }
        Ok(count)
    }

    /// Advances every blob through the shared sample stream to `t_target`.
    pub fn evolve_to(&mut self, flow: &FlowRealization, t_target: f64) -> Result<()> {
        if t_target < self.t_now {
            return Err(Error::TimeReversal { t_target, t_now: self.t_now });
        }
        let res: Result<Vec<()>> =
            self.blobs.par_iter_mut().map(|b| b.evo.evolve_to(flow, t_target)).collect();
        res?;
        self.t_now = t_target;
        Ok(())
    }

    /// Removes blobs below the peak-amplitude threshold, and in `Open` mode
    /// also blobs whose support ellipse left the expanded window. Returns
    /// the number removed.
    pub fn cull(&mut self) -> usize {
        let before = self.blobs.len();
        let threshold = self.cull_threshold;
        let keep_rect = self.window.expand(match self.mode {
            WindowMode::Open => self.spawn_margin,
            WindowMode::Periodic => 0.0,
        });
        let mode = self.mode;
        self.blobs.retain(|b| {
            if b.peak().abs() < threshold {
                return false;
            }
            if mode == WindowMode::Periodic {
                return true;
            }
            let v = BlobView::new(b, SUPPORT_SIGMAS);
            let support = Rect::new(
                v.center.x - v.half.x,
                v.center.y - v.half.y,
                v.center.x + v.half.x,
                v.center.y + v.half.y,
            );
            keep_rect.intersects(&support)
        });
        before - self.blobs.len()
    }

    /// Torus image shifts of a blob that can touch `target`. In `Open` mode
    /// only the identity shift is returned; on the torus a long strip can
    /// wrap many times, so candidate cells are collected by walking its
    /// axis.
    fn image_shifts(&self, v: &BlobView, target: &Rect, out: &mut Vec<Vec2>) {
        out.clear();
        match self.mode {
            WindowMode::Open => out.push(Vec2::ZERO),
            WindowMode::Periodic => {
                let (wx, wy) = (self.window.width(), self.window.height());
                let step = 0.45 * wx.min(wy);
                let n = (v.half_len / step).ceil() as i64;
                let stride = if v.half_len > 0.0 { v.half_len / n.max(1) as f64 } else { 0.0 };
                let mut seen: Vec<(i64, i64)> = Vec::new();
                for k in -n..=n {
                    let p = v.center + v.axis.scale(k as f64 * stride);
                    let kx = ((p.x - target.x0) / wx).floor() as i64;
                    let ky = ((p.y - target.y0) / wy).floor() as i64;
                    for dx in -1..=1 {
                        for dy in -1..=1 {
                            let key = (kx + dx, ky + dy);
                            if !seen.contains(&key) {
                                seen.push(key);
                            }
                        }
                    }
                }
                // shift applied to the blob so its image lands near target
                for (kx, ky) in seen {
                    out.push(Vec2::new(-(kx as f64) * wx, -(ky as f64) * wy));
                }
            }
        }
    }

    /// Field value at a point: sum over blobs (and torus images) whose
    /// support ellipse contains `x`.
    pub fn eval_point(&self, x: Vec2) -> f64 {
        let cutoff_sq = SUPPORT_SIGMAS * SUPPORT_SIGMAS;
        let probe = Rect::new(x.x, x.y, x.x, x.y);
        let mut shifts = Vec::new();
        let mut sum = 0.0;
        let mut comp = 0.0;
        for b in &self.blobs {
            let v = BlobView::new(b, SUPPORT_SIGMAS);
            self.image_shifts(&v, &probe, &mut shifts);
            for &s in &shifts {
                let term = v.term(x - s, cutoff_sq);
                // Kahan accumulation
                let y = term - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
        }
        sum
    }

    /// Renders the field on `spec` by rasterizing each blob's support
    /// ellipse row by row with compensated per-pixel accumulation. The
    /// result matches the naive all-blobs-all-pixels sum to rounding; only
    /// the summation order may differ.
    pub fn render(&self, spec: &GridSpec) -> Result<FieldGrid> {
        self.render_with_cutoff(spec, SUPPORT_SIGMAS)
    }

    /// `render` with an explicit support cutoff (used to verify that the
    /// default truncation is harmless).
    pub fn render_with_cutoff(&self, spec: &GridSpec, cutoff_sigmas: f64) -> Result<FieldGrid> {
        if !self.window.expand(1e-9).contains_rect(&spec.bounds()) {
            return Err(Error::GridOutsideWindow);
        }
        let cutoff_sq = cutoff_sigmas * cutoff_sigmas;
        let mut grid = FieldGrid::zeros(spec.origin, spec.pixel_size, spec.nx, spec.ny);
        if self.blobs.is_empty() {
            return Ok(grid);
        }

        // Precompute per-blob views and their relevant torus shifts once.
        let target = spec.bounds();
        let views: Vec<(BlobView, Vec<Vec2>)> = self
            .blobs
            .par_iter()
            .map(|b| {
                let v = BlobView::new(b, cutoff_sigmas);
                let mut shifts = Vec::new();
                self.image_shifts(&v, &target, &mut shifts);
                shifts.retain(|&s| {
                    let c = v.center + s;
                    target.intersects(&Rect::new(
                        c.x - v.half.x,
                        c.y - v.half.y,
                        c.x + v.half.x,
                        c.y + v.half.y,
                    ))
                });
                (v, shifts)
            })
            .collect();

        let ps = spec.pixel_size;
        let nx = spec.nx;
        let ny = spec.ny;
        let (ox, oy) = (spec.origin.x, spec.origin.y);
        // Fixed-height row bands keep the result independent of worker count.
        const BAND_ROWS: usize = 64;
        grid.values.par_chunks_mut(BAND_ROWS * nx).enumerate().for_each(|(band, rows)| {
            let j_lo = band * BAND_ROWS;
            let j_hi = (j_lo + rows.len() / nx).min(ny);
            let band_y0 = oy + j_lo as f64 * ps;
            let band_y1 = oy + j_hi as f64 * ps;
            let mut comp = vec![0.0f64; rows.len()];
            for (v, shifts) in &views {
                for &s in shifts {
                    let c = v.center + s;
                    if c.y + v.half.y < band_y0 || c.y - v.half.y > band_y1 {
                        continue;
                    }
                    let jy0 = (((c.y - v.half.y - oy) / ps - 0.5).ceil() as i64).max(j_lo as i64);
                    let jy1 =
                        (((c.y + v.half.y - oy) / ps - 0.5).floor() as i64).min(j_hi as i64 - 1);
                    for j in jy0..=jy1 {
                        let y = oy + (j as f64 + 0.5) * ps;
                        let dy = y - c.y;
                        // solve a dx^2 + (b+c) dy dx + d dy^2 = cutoff^2 for dx
                        let bc = v.inv.b + v.inv.c;
                        let disc =
                            0.25 * bc * bc * dy * dy - v.inv.a * (v.inv.d * dy * dy - cutoff_sq);
                        if disc < 0.0 {
                            continue;
                        }
                        let root = disc.sqrt();
                        let dx_lo = (-0.5 * bc * dy - root) / v.inv.a;
                        let dx_hi = (-0.5 * bc * dy + root) / v.inv.a;
                        // one pixel of slack; the exact ellipse predicate in
                        // term() decides membership identically to eval_point
                        let ix0 = ((((c.x + dx_lo - ox) / ps) - 0.5).floor() as i64 - 1).max(0);
                        let ix1 =
                            ((((c.x + dx_hi - ox) / ps) - 0.5).ceil() as i64 + 1).min(nx as i64 - 1);
                        let row_off = (j as usize - j_lo) * nx;
                        for i in ix0..=ix1 {
                            let x = ox + (i as f64 + 0.5) * ps;
                            let term = v.term(Vec2::new(x, y) - s, cutoff_sq);
                            if term != 0.0 {
                                let idx = row_off + i as usize;
                                let y_k = term - comp[idx];
                                let t_k = rows[idx] + y_k;
                                comp[idx] = (t_k - rows[idx]) - y_k;
                                rows[idx] = t_k;
                            }
                        }
                    }
                }
            }
        });
        Ok(grid)
    }
}

/// Sample moments of the rendered pixel values. Skewness and excess
/// kurtosis are undefined for a constant field.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FieldMoments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub n: usize,
}

pub fn field_moments(grid: &FieldGrid) -> Result<FieldMoments> {
    let n = grid.values.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    let nf = n as f64;
    let mean = grid.values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &grid.values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let variance = if n > 1 { m2 * nf / (nf - 1.0) } else { 0.0 };
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
    } else {
        (None, None)
    };
    Ok(FieldMoments { mean, variance, skewness, excess_kurtosis, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowParams;

    fn flow(d: f64, kappa_d: f64, seed: u64) -> FlowRealization {
        FlowRealization::new(FlowParams { d, kappa_d, dt: 1e-2, seed }).unwrap()
    }

    fn pumping(nu: f64) -> PumpingConfig {
        PumpingConfig { nu, amp_sigma: 1.0, spawn_margin: 3.0 }
    }

    fn open_db(side: f64) -> BlobDatabase {
        BlobDatabase::new(Rect::centered_square(side), WindowMode::Open, 1e-4, 3.0)
    }

    #[test]
    fn spawn_nothing_at_zero_rate() {
        let f = flow(0.1, 0.0, 1);
        let mut db = open_db(10.0);
        let added = db.spawn(&pumping(0.0), &f, 0.0, 1.0, 7).unwrap();
        assert_eq!(added, 0);
        assert!(db.blobs.is_empty());
    }

    #[test]
    fn spawn_poisson_mean() {
        // window 100x100 with margin 3 -> spawn region 106^2, duration 10,
        // nu = 0.01
        let f = flow(0.1, 0.0, 1);
        let mut counts = Vec::new();
        for stream in 0..40u64 {
            let mut db = open_db(100.0);
            db.spawn(&pumping(0.01), &f, 0.0, 10.0, stream).unwrap();
            counts.push(db.blobs.len() as f64);
        }
        let mean_want = 0.01 * 106.0f64.powi(2) * 10.0;
        let mean_got = counts.iter().sum::<f64>() / counts.len() as f64;
        let tol = 3.0 * mean_want.sqrt() / (counts.len() as f64).sqrt();
        assert!(
            (mean_got - mean_want).abs() < tol,
            "mean {} vs {} +- {}",
            mean_got,
            mean_want,
            tol
        );
    }

    #[test]
    fn spawn_is_deterministic() {
        let f = flow(0.1, 0.0, 1);
        let mut a = open_db(20.0);
        let mut b = open_db(20.0);
        a.spawn(&pumping(0.5), &f, 0.0, 2.0, 99).unwrap();
        b.spawn(&pumping(0.5), &f, 0.0, 2.0, 99).unwrap();
        assert_eq!(a.blobs.len(), b.blobs.len());
        for (x, y) in a.blobs.iter().zip(&b.blobs) {
            assert_eq!(x.t0, y.t0);
            assert_eq!(x.r_c, y.r_c);
            assert_eq!(x.theta0, y.theta0);
        }
    }

    #[test]
    fn spawn_rejects_negative_duration() {
        let f = flow(0.1, 0.0, 1);
        let mut db = open_db(20.0);
        assert!(db.spawn(&pumping(0.5), &f, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn evolve_to_now_is_identity() {
        let f = flow(0.5, 1e-4, 2);
        let mut db = open_db(20.0);
        db.spawn(&pumping(0.5), &f, 0.0, 1.0, 3).unwrap();
        db.evolve_to(&f, 1.0).unwrap();
        let before = db.blobs.clone();
        db.evolve_to(&f, 1.0).unwrap();
        for (a, b) in before.iter().zip(&db.blobs) {
            assert_eq!(a.evo, b.evo);
        }
    }

    #[test]
    fn still_flow_leaves_blob_unchanged() {
        let f = flow(0.0, 0.0, 2);
        let mut db = open_db(20.0);
        db.spawn(&pumping(0.2), &f, 0.0, 0.5, 5).unwrap();
        assert!(!db.blobs.is_empty());
        let centers: Vec<Vec2> = db.blobs.iter().map(|b| b.center()).collect();
        db.evolve_to(&f, 3.0).unwrap();
        for (b, c) in db.blobs.iter().zip(centers) {
            assert_eq!(b.center(), c);
            assert_eq!(b.evo.i_mat, Mat2::IDENTITY);
        }
    }

    #[test]
    fn peak_decays_only_with_diffusion() {
        let adv = flow(0.8, 0.0, 7);
        let mut db = open_db(20.0);
        db.spawn(&pumping(0.2), &adv, 0.0, 0.5, 5).unwrap();
        db.evolve_to(&adv, 0.5).unwrap();
        let p0 = db.blobs[0].peak();
        db.evolve_to(&adv, 4.0).unwrap();
        assert!((db.blobs[0].peak() - p0).abs() < 1e-6 * p0.abs());

        let diff = flow(0.8, 1e-3, 7);
        let mut db = open_db(20.0);
        db.spawn(&pumping(0.2), &diff, 0.0, 0.5, 5).unwrap();
        db.evolve_to(&diff, 0.5).unwrap();
        let p0 = db.blobs[0].peak().abs();
        db.evolve_to(&diff, 4.0).unwrap();
        assert!(db.blobs[0].peak().abs() < p0);
    }

    #[test]
    fn cull_keeps_everything_at_zero_threshold() {
        // still flow so all supports keep intersecting the window
        let f = flow(0.0, 0.0, 3);
        let mut db = open_db(20.0);
        db.spawn(&pumping(1.0), &f, 0.0, 1.0, 4).unwrap();
        db.evolve_to(&f, 1.0).unwrap();
        db.cull_threshold = 0.0;
        assert_eq!(db.cull(), 0);
    }

    #[test]
    fn cull_removes_faint_blob() {
        let f = flow(0.0, 0.0, 3);
        let mut db = open_db(20.0);
        db.spawn(&pumping(0.2), &f, 0.0, 0.5, 4).unwrap();
        let n = db.blobs.len();
        assert!(n > 0);
        // det I > (theta0/threshold)^2 <=> peak < threshold
        db.blobs[0].evo.i_mat = Mat2::new(1e9, 0.0, 0.0, 1e9);
        let thr = db.cull_threshold;
        assert!(db.blobs[0].evo.i_mat.det() > (db.blobs[0].theta0 / thr).powi(2));
        assert_eq!(db.cull(), 1);
        assert_eq!(db.blobs.len(), n - 1);
    }

    #[test]
    fn steady_state_population_plateaus() {
        // long run on a small torus: the live count stops growing
        let f = flow(1.0, 1e-4, 11);
        let mut db =
            BlobDatabase::new(Rect::centered_square(12.0), WindowMode::Periodic, 0.05, 3.0);
        let pump = pumping(2.0);
        let mut counts = Vec::new();
        let step = 0.25;
        for k in 0..400 {
            let (t0, t1) = (k as f64 * step, (k + 1) as f64 * step);
            db.spawn(&pump, &f, t0, t1, 1000 + k as u64).unwrap();
            db.evolve_to(&f, t1).unwrap();
            db.cull();
            counts.push(db.blobs.len() as f64);
        }
        // The population fluctuates coherently with the shared flow (the
        // whole database stretches together), so compare long-window means:
        // fluctuating is fine, monotone growth is not.
        let mean = |r: std::ops::Range<usize>| -> f64 {
            let n = r.len() as f64;
            counts[r].iter().sum::<f64>() / n
        };
        let w1 = mean(160..240);
        let w2 = mean(240..320);
        let w3 = mean(320..400);
        for (a, b) in [(w1, w2), (w2, w3), (w1, w3)] {
            let ratio = b / a;
            assert!(
                (0.55..1.8).contains(&ratio),
                "population drifting: windows {} {} {}",
                w1,
                w2,
                w3
            );
        }
        // nothing like linear growth: t in [40,100] grows by < 50%
        assert!(w3 < 1.5 * w1, "still growing: {} -> {}", w1, w3);
    }

    #[test]
    fn eval_empty_database() {
        let db = open_db(20.0);
        assert_eq!(db.eval_point(Vec2::new(1.0, 2.0)), 0.0);
    }

    #[test]
    fn eval_fresh_blob_profile() {
        let f = flow(0.3, 0.0, 9);
        let mut db = open_db(20.0);
        db.blobs.push(Blob {
            t0: 0.0,
            r_c: Vec2::new(1.0, -2.0),
            theta0: 0.7,
            evo: EvolutionState::at_creation(0.0, &f),
        });
        assert!((db.eval_point(Vec2::new(1.0, -2.0)) - 0.7).abs() < 1e-15);
        let v = db.eval_point(Vec2::new(2.0, -2.0)); // distance 1 = L
        assert!((v - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn render_empty_is_zero() {
        let db = open_db(20.0);
        let g = db
            .render(&GridSpec { origin: Vec2::new(-5.0, -5.0), pixel_size: 0.1, nx: 100, ny: 100 })
            .unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_rejects_grid_outside_window() {
        let db = open_db(10.0);
        let r = db.render(&GridSpec {
            origin: Vec2::new(-6.0, -5.0),
            pixel_size: 0.1,
            nx: 100,
            ny: 100,
        });
        assert!(r.is_err());
    }

    #[test]
    fn render_single_blob_matches_closed_form() {
        let f = flow(0.3, 0.0, 9);
        let mut db = open_db(20.0);
        db.blobs.push(Blob {
            t0: 0.0,
            r_c: Vec2::new(0.3, 0.2),
            theta0: -1.3,
            evo: EvolutionState::at_creation(0.0, &f),
        });
        let spec = GridSpec { origin: Vec2::new(-8.0, -8.0), pixel_size: 0.05, nx: 320, ny: 320 };
        let g = db.render(&spec).unwrap();
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let x = g.pixel_center(i, j);
                let d = x - Vec2::new(0.3, 0.2);
                let q = d.norm_sq();
                let want = if q <= SUPPORT_SIGMAS * SUPPORT_SIGMAS {
                    -1.3 * (-0.5 * q).exp()
                } else {
                    0.0
                };
                assert!((g.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_matches_brute_force() {
        let f = flow(0.6, 1e-4, 31);
        let mut db = open_db(24.0);
        db.spawn(&pumping(0.12), &f, 0.0, 1.0, 17).unwrap();
        db.evolve_to(&f, 2.5).unwrap();
        assert!(db.blobs.len() >= 40, "want a busy field, got {}", db.blobs.len());
        let spec =
            GridSpec { origin: Vec2::new(-10.0, -10.0), pixel_size: 20.0 / 256.0, nx: 256, ny: 256 };
        let g = db.render(&spec).unwrap();
        let mut worst = 0.0f64;
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let want = db.eval_point(g.pixel_center(i, j));
                worst = worst.max((g.at(i, j) - want).abs());
            }
        }
        assert!(worst < 1e-10, "max render-vs-brute-force deviation {}", worst);
    }

    #[test]
    fn render_periodic_matches_brute_force() {
        let f = flow(1.0, 1e-4, 32);
        let mut db =
            BlobDatabase::new(Rect::centered_square(16.0), WindowMode::Periodic, 1e-4, 3.0);
        db.spawn(&pumping(0.15), &f, 0.0, 1.0, 18).unwrap();
        db.evolve_to(&f, 4.0).unwrap(); // long enough that strips wrap
        db.cull();
        let spec =
            GridSpec { origin: Vec2::new(-8.0, -8.0), pixel_size: 16.0 / 128.0, nx: 128, ny: 128 };
        let g = db.render(&spec).unwrap();
        let mut worst = 0.0f64;
        for j in (0..spec.ny).step_by(3) {
            for i in (0..spec.nx).step_by(3) {
                let want = db.eval_point(g.pixel_center(i, j));
                worst = worst.max((g.at(i, j) - want).abs());
            }
        }
        assert!(worst < 1e-10, "max periodic render deviation {}", worst);
    }

    #[test]
    fn render_translation_covariant() {
        // Anisotropic blobs with identity flow maps so centers (and the
        // binary-exact shift) move without rounding.
        let f = flow(0.6, 0.05, 33);
        let mut db = open_db(30.0);
        db.spawn(&pumping(0.05), &f, 0.0, 1.0, 21).unwrap();
        db.evolve_to(&f, 1.5).unwrap();
        for b in &mut db.blobs {
            b.r_c = b.center();
            b.evo.w = Mat2::IDENTITY;
        }
        let spec = GridSpec { origin: Vec2::new(-6.0, -6.0), pixel_size: 0.125, nx: 96, ny: 96 };
        let g0 = db.render(&spec).unwrap();
        let shift = Vec2::new(1.375, -2.25);
        let mut shifted = db.clone();
        for b in &mut shifted.blobs {
            b.r_c = b.r_c + shift;
        }
        let spec2 = GridSpec { origin: spec.origin + shift, ..spec };
        let g1 = shifted.render(&spec2).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in g0.values.iter().zip(&g1.values) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-12, "translation covariance broke: {}", worst);
    }

    #[test]
    fn truncation_cutoff_is_harmless() {
        let f = flow(0.6, 1e-4, 34);
        let mut db = open_db(24.0);
        db.spawn(&pumping(0.1), &f, 0.0, 1.0, 22).unwrap();
        db.evolve_to(&f, 2.0).unwrap();
        let spec = GridSpec { origin: Vec2::new(-9.0, -9.0), pixel_size: 0.1, nx: 180, ny: 180 };
        let g6 = db.render_with_cutoff(&spec, 6.0).unwrap();
        let g8 = db.render_with_cutoff(&spec, 8.0).unwrap();
        let scale = g8.max_abs();
        let mut worst = 0.0f64;
        for (a, b) in g6.values.iter().zip(&g8.values) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-7 * scale, "truncation error {} vs scale {}", worst, scale);
    }

    #[test]
    fn single_blob_integral_conserved() {
        // A blob stretched by T*lambda ~ 5 of evolution still integrates to
        // 2 pi theta0. Diagonal strains keep the long axis on the grid.
        let dt = 1e-2;
        let f = FlowRealization::new(FlowParams { d: 0.0, kappa_d: 1e-4, dt, seed: 0 }).unwrap();
        let theta0 = 0.9;
        let mut blob =
            Blob { t0: 0.0, r_c: Vec2::ZERO, theta0, evo: EvolutionState::at_creation(0.0, &f) };
        use crate::flow::GradientSample;
        // mild rotation first, then pure diagonal stretch to reach e^5
        let rot = GradientSample { sigma: Mat2::new(0.3, 0.8, 0.2, -0.3) };
        let diag = GradientSample { sigma: Mat2::new(1.0, 0.0, 0.0, -1.0) };
        for _ in 0..100 {
            blob.evo.step_by(&rot, f.params.kappa_d, dt).unwrap();
        }
        for _ in 0..450 {
            blob.evo.step_by(&diag, f.params.kappa_d, dt).unwrap();
        }
        let i = blob.evo.i_mat;
        assert!(i.a.sqrt() > 100.0, "not stretched enough: {}", i.a.sqrt());
        // grid sized to the support, fine enough across the narrow axis
        let hx = 6.5 * i.a.sqrt();
        let hy = 6.5 * i.d.sqrt();
        let ps = (i.d.sqrt() * 0.5).min(0.05);
        let nx = (2.0 * hx / ps).ceil() as usize;
        let ny = (2.0 * hy / ps).ceil() as usize;
        let mut db = BlobDatabase::new(
            Rect::new(-hx - 1.0, -hy - 1.0, hx + 1.0, hy + 1.0),
            WindowMode::Open,
            0.0,
            3.0,
        );
        db.blobs.push(blob);
        let g =
            db.render(&GridSpec { origin: Vec2::new(-hx, -hy), pixel_size: ps, nx, ny }).unwrap();
        let integral: f64 = g.values.iter().sum::<f64>() * ps * ps;
        let want = 2.0 * std::f64::consts::PI * theta0;
        assert!(((integral - want) / want).abs() < 1e-6, "integral {} vs {}", integral, want);
    }

    #[test]
    fn pure_diffusion_blob_matches_heat_kernel() {
        let f = flow(0.0, 2e-3, 0);
        let mut db = open_db(30.0);
        db.blobs.push(Blob {
            t0: 0.0,
            r_c: Vec2::ZERO,
            theta0: 1.0,
            evo: EvolutionState::at_creation(0.0, &f),
        });
        let t = 5.0;
        db.evolve_to(&f, t).unwrap();
        let spec = GridSpec { origin: Vec2::new(-9.0, -9.0), pixel_size: 0.05, nx: 360, ny: 360 };
        let g = db.render(&spec).unwrap();
        let var = 1.0 + 2.0 * f.params.kappa_d * t;
        for j in (0..spec.ny).step_by(2) {
            for i in (0..spec.nx).step_by(2) {
                let x = g.pixel_center(i, j);
                let q = x.norm_sq() / var;
                let want = if q <= SUPPORT_SIGMAS * SUPPORT_SIGMAS {
                    (1.0 / var) * (-0.5 * q).exp()
                } else {
                    0.0
                };
                assert!((g.at(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn moments_constant_grid() {
        let g = FieldGrid {
            origin: Vec2::ZERO,
            pixel_size: 1.0,
            nx: 10,
            ny: 10,
            values: vec![3.5; 100],
        };
        let m = field_moments(&g).unwrap();
        assert_eq!(m.mean, 3.5);
        assert_eq!(m.variance, 0.0);
        assert!(m.skewness.is_none());
        assert!(m.excess_kurtosis.is_none());
    }

    #[test]
    fn moments_gaussian_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let n = 400usize;
        let values: Vec<f64> = (0..n * n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let g = FieldGrid { origin: Vec2::ZERO, pixel_size: 1.0, nx: n, ny: n, values };
        let m = field_moments(&g).unwrap();
        let tol = 5.0 / (n as f64); // 5/sqrt(N), N = n^2
        assert!(m.excess_kurtosis.unwrap().abs() < tol);
        assert!(m.skewness.unwrap().abs() < tol);
    }
}
