//! Diffeomorphism integration and pullback: converts a gauge-fixed solution
//! back into a solution of the direct flow.
//!
//! The gauge field ξ recorded along a gauge-fixed run generates a
//! one-parameter family of diffeomorphisms by the particle ODE
//!
//! ```text
//! ∂ₜ Φ_t(z) = ξ(Φ_t(z), t),      Φ_0 = Id,
//! ```
//!
//! and composing the evolving structure with Φ_t (together with its tangent
//! map on the fiber argument) reproduces the direct flow.  Two readings of
//! "Φ_t generated by ξ" are implemented behind [`PullbackMode`]:
//!
//! * [`PullbackMode::BaseReduced`] (default) — ξ is averaged over the fiber
//!   to a vector field X(x) on the torus, particles flow on the base, and
//!   the fiber argument is handled at pullback time through the map
//!   differential dΦ (a genuine point transformation, which is the setting
//!   where pullback and curvature provably commute);
//! * [`PullbackMode::HorizontalLift`] — particles live on the bundle, the
//!   base velocity is the full θ-dependent ξ, and the fiber angle (plus a
//!   logarithmic length factor) is transported by the tangent map of the
//!   base flow.
//!
//! The two coincide whenever ξ is θ-independent, which covers every
//! Riemannian scenario; equivalence is asserted only there.
//!
//! Time integration is RK4 over pairs of recorded steps (the middle sample
//! serves as the two midpoint stages, preserving fourth order without
//! resampling), with a second-order closing step when the series has an odd
//! number of intervals.  Off-grid values of ξ are obtained by periodic cubic
//! Lagrange interpolation in every direction.  A per-step displacement guard
//! rejects flows that move a particle more than half a cell at once.

use std::sync::Arc;

use crate::analytic::TAU;
use crate::error::{FinslerError, Result};
use crate::grid::{ScalarBundleField, SphereBundleGrid};

/// How the gauge field is turned into diffeomorphisms of the bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PullbackMode {
    #[default]
    BaseReduced,
    HorizontalLift,
}

/// Periodic cubic Lagrange weights for the query `q` on an `n`-point grid of
/// spacing `h`: base node index and weights for offsets −1..=2.  Queries
/// within 1e-12 cells of a node snap to it exactly.
fn cubic_stencil(q: f64, h: f64) -> (isize, [f64; 4]) {
    let pos = q / h;
    let base = pos.floor();
    let u = pos - base;
    if u < 1e-12 {
        return (base as isize, [0.0, 1.0, 0.0, 0.0]);
    }
    if 1.0 - u < 1e-12 {
        return (base as isize + 1, [0.0, 1.0, 0.0, 0.0]);
    }
    let w = [
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
        -(u + 1.0) * u * (u - 2.0) / 2.0,
        (u + 1.0) * u * (u - 1.0) / 6.0,
    ];
    (base as isize, w)
}

fn wrap_index(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Periodic tricubic value of a bundle-node array at an arbitrary point.
/// Uses the same one-dimensional cubic weights as the base-field evaluator,
/// so reduced and lifted integration see identical stencils.
fn tricubic(grid: &SphereBundleGrid, values: &[f64], x1: f64, x2: f64, theta: f64) -> f64 {
    let (b1, w1) = cubic_stencil(x1, grid.hx1);
    let (b2, w2) = cubic_stencil(x2, grid.hx2);
    let (b3, w3) = cubic_stencil(theta, grid.htheta);
    let mut acc = 0.0;
    for (a, wa) in w1.iter().enumerate() {
        if *wa == 0.0 {
            continue;
        }
        let i = wrap_index(b1 + a as isize - 1, grid.n1);
        for (b, wb) in w2.iter().enumerate() {
            if *wb == 0.0 {
                continue;
            }
            let j = wrap_index(b2 + b as isize - 1, grid.n2);
            let wab = wa * wb;
            for (c, wc) in w3.iter().enumerate() {
                if *wc == 0.0 {
                    continue;
                }
                let k = wrap_index(b3 + c as isize - 1, grid.ntheta);
                acc += wab * wc * values[grid.idx(i, j, k)];
            }
        }
    }
    acc
}

/// Vector field on the torus sampled at base nodes, with periodic bicubic
/// evaluation at arbitrary points.
#[derive(Clone, Debug)]
pub struct BaseVectorField {
    pub n1: usize,
    pub n2: usize,
    pub hx1: f64,
    pub hx2: f64,
    /// Components X¹, X² in row-major layout `i·n2 + j`.
    pub x: [Vec<f64>; 2],
}

impl BaseVectorField {
    pub fn zeros(n1: usize, n2: usize) -> Self {
        Self {
            n1,
            n2,
            hx1: TAU / n1 as f64,
            hx2: TAU / n2 as f64,
            x: [vec![0.0; n1 * n2], vec![0.0; n1 * n2]],
        }
    }

    /// Builds the field from closed-form components at the nodes.
    pub fn from_fn(n1: usize, n2: usize, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut out = Self::zeros(n1, n2);
        for i in 0..n1 {
            for j in 0..n2 {
                let v = f(i as f64 * out.hx1, j as f64 * out.hx2);
                out.x[0][i * n2 + j] = v[0];
                out.x[1][i * n2 + j] = v[1];
            }
        }
        out
    }

    /// Periodic bicubic value of both components at `(x1, x2)`.
    pub fn eval(&self, x1: f64, x2: f64) -> [f64; 2] {
        let (b1, w1) = cubic_stencil(x1, self.hx1);
        let (b2, w2) = cubic_stencil(x2, self.hx2);
        let mut out = [0.0; 2];
        for (a, wa) in w1.iter().enumerate() {
            if *wa == 0.0 {
                continue;
            }
            let i = wrap_index(b1 + a as isize - 1, self.n1);
            for (b, wb) in w2.iter().enumerate() {
                if *wb == 0.0 {
                    continue;
                }
                let j = wrap_index(b2 + b as isize - 1, self.n2);
                let w = wa * wb;
                out[0] += w * self.x[0][i * self.n2 + j];
                out[1] += w * self.x[1][i * self.n2 + j];
            }
        }
        out
    }
}

/// Fiber average of a bundle vector field, together with the largest fiber
/// variation seen in any component (zero exactly when the field already
/// lives on the base).
pub fn reduce_xi(grid: &SphereBundleGrid, xi: &[Vec<f64>; 2]) -> (BaseVectorField, f64) {
    let mut out = BaseVectorField::zeros(grid.n1, grid.n2);
    let nt = grid.ntheta;
    let mut variation = 0.0f64;
    for f in 0..grid.n1 * grid.n2 {
        let base = f * nt;
        for (comp, dst) in xi.iter().zip(out.x.iter_mut()) {
            let fiber = &comp[base..base + nt];
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in fiber {
                acc += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            dst[f] = acc / nt as f64;
            variation = variation.max(hi - lo);
        }
    }
    (out, variation)
}

/// θ-dependent sample for bundle-level integration: the field and its base
/// derivatives (needed for the tangent-map transport of the fiber angle).
struct BundleSample {
    xi: [Vec<f64>; 2],
    /// dxi[i][j] = ∂ξⁱ/∂xʲ.
    dxi: [[Vec<f64>; 2]; 2],
}

/// Time series of the gauge field as recorded along a run, pre-reduced
/// according to the mode so that long series stay affordable.
pub struct XiSeries {
    grid: Arc<SphereBundleGrid>,
    mode: PullbackMode,
    pub times: Vec<f64>,
    base: Vec<BaseVectorField>,
    bundle: Vec<BundleSample>,
    /// Largest fiber variation of any recorded sample.
    pub max_theta_variation: f64,
}

impl XiSeries {
    pub fn new(grid: Arc<SphereBundleGrid>, mode: PullbackMode) -> Self {
        Self {
            grid,
            mode,
            times: Vec::new(),
            base: Vec::new(),
            bundle: Vec::new(),
            max_theta_variation: 0.0,
        }
    }

    pub fn mode(&self) -> PullbackMode {
        self.mode
    }

    pub fn grid(&self) -> &Arc<SphereBundleGrid> {
        &self.grid
    }

    /// Records the gauge field at one step boundary.  Times must arrive in
    /// strictly increasing order.
    pub fn record(&mut self, t: f64, xi: &[Vec<f64>; 2]) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(FinslerError::Config(format!(
                    "gauge-field samples out of order: {t} after {last}"
                )));
            }
        }
        let (reduced, variation) = reduce_xi(&self.grid, xi);
        self.max_theta_variation = self.max_theta_variation.max(variation);
        match self.mode {
            PullbackMode::BaseReduced => self.base.push(reduced),
            PullbackMode::HorizontalLift => {
                let n = self.grid.len();
                let mut sample = BundleSample {
                    xi: [xi[0].clone(), xi[1].clone()],
                    dxi: [
                        [vec![0.0; n], vec![0.0; n]],
                        [vec![0.0; n], vec![0.0; n]],
                    ],
                };
                for i in 0..2 {
                    for j in 0..2 {
                        self.grid.x_d1(&sample.xi[i].clone(), j, &mut sample.dxi[i][j]);
                    }
                }
                self.bundle.push(sample);
            }
        }
        self.times.push(t);
        Ok(())
    }

    /// Uniform sample spacing; errors when the series is too short or uneven.
    pub fn dt(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(FinslerError::Config(
                "gauge-field series needs at least two samples".into(),
            ));
        }
        let dt = self.times[1] - self.times[0];
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(FinslerError::Config(
                    "gauge-field series is not uniformly spaced".into(),
                ));
            }
        }
        Ok(dt)
    }

    fn sample_count(&self) -> usize {
        self.times.len()
    }
}

/// One stored map sample: unwrapped image coordinates per particle
/// (base nodes in reduced mode, bundle nodes with transported fiber data in
/// lifted mode).  Coordinates are kept unwrapped so the displacement stays a
/// smooth periodic function of the starting node.
#[derive(Clone, Debug)]
pub struct DiffeoMap {
    pub t: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Transported fiber angle (lifted mode only).
    pub theta: Option<Vec<f64>>,
    /// Logarithm of the tangent-map length factor (lifted mode only).
    pub log_scale: Option<Vec<f64>>,
}

/// Time-sampled diffeomorphism family Φ_t, starting from the identity.
pub struct DiffeoTrajectory {
    pub mode: PullbackMode,
    pub n1: usize,
    pub n2: usize,
    pub ntheta: usize,
    pub hx1: f64,
    pub hx2: f64,
    pub maps: Vec<DiffeoMap>,
}

impl DiffeoTrajectory {
    pub fn final_map(&self) -> &DiffeoMap {
        self.maps.last().expect("trajectory always stores t = 0")
    }

    /// CSV dump, one row per stored time and base node:
    /// `t,i,j,x1_mapped,x2_mapped[,theta_mapped]`.  Images are wrapped into
    /// one period; in lifted mode the row shows the particle launched from
    /// fiber node k = 0 and gains the `theta_mapped` column.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        let lifted = self.mode == PullbackMode::HorizontalLift;
        if lifted {
            writeln!(out, "t,i,j,x1_mapped,x2_mapped,theta_mapped")?;
        } else {
            writeln!(out, "t,i,j,x1_mapped,x2_mapped")?;
        }
        for map in &self.maps {
            for i in 0..self.n1 {
                for j in 0..self.n2 {
                    let p = if lifted {
                        (i * self.n2 + j) * self.ntheta
                    } else {
                        i * self.n2 + j
                    };
                    let x1 = map.x1[p].rem_euclid(TAU);
                    let x2 = map.x2[p].rem_euclid(TAU);
                    if lifted {
                        let th = map.theta.as_ref().expect("lifted map stores theta")[p]
                            .rem_euclid(TAU);
                        writeln!(
                            out,
                            "{:.16e},{},{},{:.16e},{:.16e},{:.16e}",
                            map.t, i, j, x1, x2, th
                        )?;
                    } else {
                        writeln!(out, "{:.16e},{},{},{:.16e},{:.16e}", map.t, i, j, x1, x2)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-particle state during integration.
#[derive(Clone, Copy)]
struct Particle {
    x1: f64,
    x2: f64,
    theta: f64,
    log_scale: f64,
}

/// Velocity of one particle under one recorded sample.
fn velocity(series: &XiSeries, sample: usize, p: &Particle) -> [f64; 4] {
    match series.mode {
        PullbackMode::BaseReduced => {
            let v = series.base[sample].eval(p.x1, p.x2);
            [v[0], v[1], 0.0, 0.0]
        }
        PullbackMode::HorizontalLift => {
            let s = &series.bundle[sample];
            let grid = &series.grid;
            let q1 = p.x1.rem_euclid(TAU);
            let q2 = p.x2.rem_euclid(TAU);
            let qt = p.theta.rem_euclid(TAU);
            let vx = [
                tricubic(grid, &s.xi[0], q1, q2, qt),
                tricubic(grid, &s.xi[1], q1, q2, qt),
            ];
            let (c, sn) = (p.theta.cos(), p.theta.sin());
            // Tangent-map action a^i = (∂ξⁱ/∂xʲ) ŷ_j on the unit fiber vector.
            let mut a = [0.0; 2];
            for i in 0..2 {
                a[i] = c * tricubic(grid, &s.dxi[i][0], q1, q2, qt)
                    + sn * tricubic(grid, &s.dxi[i][1], q1, q2, qt);
            }
            [vx[0], vx[1], c * a[1] - sn * a[0], c * a[0] + sn * a[1]]
        }
    }
}

fn advanced(p: &Particle, v: &[f64; 4], w: f64) -> Particle {
    Particle {
        x1: p.x1 + w * v[0],
        x2: p.x2 + w * v[1],
        theta: p.theta + w * v[2],
        log_scale: p.log_scale + w * v[3],
    }
}

/// Integrates the particle ODE for every grid node through the recorded
/// series, storing the map at `store_every`-step boundaries (always
/// including t = 0 and the final time).
///
/// Fourth-order accuracy comes from RK4 over **pairs** of recorded intervals
/// with the middle sample as both midpoint stages; an odd final interval is
/// closed with a Heun step.  Stored boundaries are therefore rounded to even
/// step indices.
pub fn integrate_diffeo(series: &XiSeries, store_every: usize) -> Result<DiffeoTrajectory> {
    let dt = series.dt()?;
    let grid = series.grid.clone();
    let lifted = series.mode == PullbackMode::HorizontalLift;

    let mut particles: Vec<Particle> = Vec::new();
    if lifted {
        for i in 0..grid.n1 {
            for j in 0..grid.n2 {
                for k in 0..grid.ntheta {
                    particles.push(Particle {
                        x1: grid.x1(i),
                        x2: grid.x2(j),
                        theta: grid.theta(k),
                        log_scale: 0.0,
                    });
                }
            }
        }
    } else {
        for i in 0..grid.n1 {
            for j in 0..grid.n2 {
                particles.push(Particle {
                    x1: grid.x1(i),
                    x2: grid.x2(j),
                    theta: 0.0,
                    log_scale: 0.0,
                });
            }
        }
    }

    let snapshot = |t: f64, particles: &[Particle]| -> DiffeoMap {
        DiffeoMap {
            t,
            x1: particles.iter().map(|p| p.x1).collect(),
            x2: particles.iter().map(|p| p.x2).collect(),
            theta: lifted.then(|| particles.iter().map(|p| p.theta).collect()),
            log_scale: lifted.then(|| particles.iter().map(|p| p.log_scale).collect()),
        }
    };

    let limit = 0.5 * grid.hx1.min(grid.hx2);
    let guard = |before: &Particle, after: &Particle, spans: f64| -> Result<()> {
        let step = (after.x1 - before.x1)
            .abs()
            .max((after.x2 - before.x2).abs())
            / spans;
        if step >= limit {
            return Err(FinslerError::DisplacementTooLarge { step, limit });
        }
        Ok(())
    };

    let mut maps = vec![snapshot(series.times[0], &particles)];
    let intervals = series.sample_count() - 1;
    let cadence = store_every.max(1);

    let mut m = 0;
    while m < intervals {
        if m + 2 <= intervals {
            // RK4 over [t_m, t_{m+2}] with the middle sample twice.
            for p in particles.iter_mut() {
                let k1 = velocity(series, m, p);
                let k2 = velocity(series, m + 1, &advanced(p, &k1, dt));
                let k3 = velocity(series, m + 1, &advanced(p, &k2, dt));
                let k4 = velocity(series, m + 2, &advanced(p, &k3, 2.0 * dt));
                let next = Particle {
                    x1: p.x1 + dt / 3.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                    x2: p.x2 + dt / 3.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                    theta: p.theta + dt / 3.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
                    log_scale: p.log_scale
                        + dt / 3.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
                };
                guard(p, &next, 2.0)?;
                *p = next;
            }
            m += 2;
        } else {
            // Odd closing interval: Heun.
            for p in particles.iter_mut() {
                let k1 = velocity(series, m, p);
                let k2 = velocity(series, m + 1, &advanced(p, &k1, dt));
                let next = Particle {
                    x1: p.x1 + 0.5 * dt * (k1[0] + k2[0]),
                    x2: p.x2 + 0.5 * dt * (k1[1] + k2[1]),
                    theta: p.theta + 0.5 * dt * (k1[2] + k2[2]),
                    log_scale: p.log_scale + 0.5 * dt * (k1[3] + k2[3]),
                };
                guard(p, &next, 1.0)?;
                *p = next;
            }
            m += 1;
        }
        if m == intervals || m % cadence == 0 {
            maps.push(snapshot(series.times[m], &particles));
        }
    }

    Ok(DiffeoTrajectory {
        mode: series.mode,
        n1: grid.n1,
        n2: grid.n2,
        ntheta: grid.ntheta,
        hx1: grid.hx1,
        hx2: grid.hx2,
        maps,
    })
}

/// Fourth-order centered derivative of a periodic base-node array along one
/// axis (used for the map differential).
fn base_d1(values: &[f64], n1: usize, n2: usize, h: f64, axis: usize, i: usize, j: usize) -> f64 {
    let at = |di: isize| -> f64 {
        let (ii, jj) = if axis == 0 {
            (wrap_index(i as isize + di, n1), j)
        } else {
            (i, wrap_index(j as isize + di, n2))
        };
        values[ii * n2 + jj]
    };
    (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * h)
}

/// Pulls a squared-norm field back along one stored map: the output at node
/// (x, θ) is F̃²(Φ(x), dΦ(x)·y(θ)), evaluated through degree-2 homogeneity
/// and high-order interpolation of the input field.
///
/// In reduced mode the map differential dΦ comes from fourth-order centered
/// differences of the stored displacement; in lifted mode the transported
/// fiber angle and length factor are used directly.
pub fn pullback_structure(
    field: &ScalarBundleField,
    traj: &DiffeoTrajectory,
    map_index: usize,
) -> Result<ScalarBundleField> {
    let grid = field.grid().clone();
    if grid.n1 != traj.n1 || grid.n2 != traj.n2 {
        return Err(FinslerError::Config(format!(
            "trajectory resolution {}x{} does not match the field grid {}x{}",
            traj.n1, traj.n2, grid.n1, grid.n2
        )));
    }
    let map = &traj.maps[map_index];
    let mut out = ScalarBundleField::zeros(grid.clone(), 2)?;
    let fail = |value: f64, i: usize, j: usize, k: usize| FinslerError::NonPositiveF {
        value,
        context: format!("pullback at node ({i},{j},{k}), t = {:.6e}", map.t),
    };

    match traj.mode {
        PullbackMode::BaseReduced => {
            // Displacement relative to the starting node, a periodic array.
            let n = traj.n1 * traj.n2;
            let mut disp = [vec![0.0; n], vec![0.0; n]];
            for i in 0..traj.n1 {
                for j in 0..traj.n2 {
                    let p = i * traj.n2 + j;
                    disp[0][p] = map.x1[p] - i as f64 * traj.hx1;
                    disp[1][p] = map.x2[p] - j as f64 * traj.hx2;
                }
            }
            for i in 0..traj.n1 {
                for j in 0..traj.n2 {
                    let p = i * traj.n2 + j;
                    // dΦ − I entries; all-zero rows mean the differential is
                    // exactly the identity and the fiber argument passes
                    // through untouched (keeps identity maps bit-exact).
                    let d = [
                        [
                            base_d1(&disp[0], traj.n1, traj.n2, traj.hx1, 0, i, j),
                            base_d1(&disp[0], traj.n1, traj.n2, traj.hx2, 1, i, j),
                        ],
                        [
                            base_d1(&disp[1], traj.n1, traj.n2, traj.hx1, 0, i, j),
                            base_d1(&disp[1], traj.n1, traj.n2, traj.hx2, 1, i, j),
                        ],
                    ];
                    let trivial = d.iter().flatten().all(|&v| v == 0.0);
                    let x1 = map.x1[p].rem_euclid(TAU);
                    let x2 = map.x2[p].rem_euclid(TAU);
                    for k in 0..grid.ntheta {
                        let (c, s) = (grid.cos_theta[k], grid.sin_theta[k]);
                        let value = if trivial {
                            field.interpolate(x1, x2, grid.theta(k))
                        } else {
                            let v = [
                                (1.0 + d[0][0]) * c + d[0][1] * s,
                                d[1][0] * c + (1.0 + d[1][1]) * s,
                            ];
                            let r2 = v[0] * v[0] + v[1] * v[1];
                            r2 * field.interpolate(x1, x2, v[1].atan2(v[0]))
                        };
                        if !(value > 0.0) || !value.is_finite() {
                            return Err(fail(value, i, j, k));
                        }
                        out.v[grid.idx(i, j, k)] = value;
                    }
                }
            }
        }
        PullbackMode::HorizontalLift => {
            if grid.ntheta != traj.ntheta {
                return Err(FinslerError::Config(format!(
                    "trajectory fiber resolution {} does not match the grid {}",
                    traj.ntheta, grid.ntheta
                )));
            }
            let theta = map.theta.as_ref().expect("lifted map stores theta");
            let scale = map.log_scale.as_ref().expect("lifted map stores log_scale");
            for i in 0..grid.n1 {
                for j in 0..grid.n2 {
                    for k in 0..grid.ntheta {
                        let p = grid.idx(i, j, k);
                        let x1 = map.x1[p].rem_euclid(TAU);
                        let x2 = map.x2[p].rem_euclid(TAU);
                        let value =
                            (2.0 * scale[p]).exp() * field.interpolate(x1, x2, theta[p]);
                        if !(value > 0.0) || !value.is_finite() {
                            return Err(fail(value, i, j, k));
                        }
                        out.v[p] = value;
                    }
                }
            }
        }
    }
    Ok(out)
}
