//! Closed-form Finsler structures on the flat torus.
//!
//! Coefficient fields (metric entries, one-form components, conformal
//! factors) are small closed-form expressions in the base coordinates,
//! represented by [`TorusMap`] so they can be evaluated at any [`Real`]
//! scalar — plain `f64` on grids, dual towers when base derivatives are
//! taken analytically. All structures are 2-homogeneous in the fiber
//! variable by construction.

use crate::dual::Real;
use crate::error::{FinslerError, Result};

pub const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Flat torus base: `dim` periodic coordinates, each with period 2π.
#[derive(Clone, Debug)]
pub struct BaseDomain {
    pub dim: usize,
    pub periods: Vec<f64>,
}

impl BaseDomain {
    pub fn torus(dim: usize) -> Self {
        BaseDomain { dim, periods: vec![TAU; dim] }
    }

    /// Wrap a coordinate into [0, period).
    pub fn wrap(&self, axis: usize, x: f64) -> f64 {
        let p = self.periods[axis];
        x - p * (x / p).floor()
    }
}

/// Closed-form smooth scalar field on the torus, evaluable at any scalar type.
#[derive(Clone, Debug)]
pub enum TorusMap {
    Constant(f64),
    /// amp · cos(wave·x + phase); integer wave vector keeps it periodic.
    Cosine { amp: f64, wave: Vec<i32>, phase: f64 },
    /// exp(Σᵢ cos xᵢ − dim): positive, peaks at 1 over the origin, smooth.
    Bump,
    Sum(Vec<TorusMap>),
    Product(Vec<TorusMap>),
    Exp(Box<TorusMap>),
    Scaled(f64, Box<TorusMap>),
}

impl TorusMap {
    pub fn zero() -> Self {
        TorusMap::Constant(0.0)
    }

    pub fn one() -> Self {
        TorusMap::Constant(1.0)
    }

    /// cos with unit amplitude along a single axis.
    pub fn cos_axis(axis: usize, dim: usize) -> Self {
        let mut wave = vec![0; dim];
        wave[axis] = 1;
        TorusMap::Cosine { amp: 1.0, wave, phase: 0.0 }
    }

    pub fn eval<T: Real>(&self, x: &[T]) -> T {
        match self {
            TorusMap::Constant(c) => T::from_f64(*c),
            TorusMap::Cosine { amp, wave, phase } => {
                let mut arg = T::from_f64(*phase);
                for (xi, &k) in x.iter().zip(wave.iter()) {
                    if k != 0 {
                        arg = arg + xi.scale(k as f64);
                    }
                }
                arg.cos().scale(*amp)
            }
            TorusMap::Bump => {
                let mut s = T::from_f64(-(x.len() as f64));
                for xi in x {
                    s = s + xi.cos();
                }
                s.exp()
            }
            TorusMap::Sum(terms) => {
                let mut s = T::zero();
                for t in terms {
                    s = s + t.eval(x);
                }
                s
            }
            TorusMap::Product(factors) => {
                let mut p = T::one();
                for f in factors {
                    p = p * f.eval(x);
                }
                p
            }
            TorusMap::Exp(inner) => inner.eval(x).exp(),
            TorusMap::Scaled(c, inner) => inner.eval(x).scale(*c),
        }
    }
}

/// Torus self-map of the form ψⁱ(x) = xⁱ + Σⱼ c[i][j]·sin(xʲ + phase[i][j]).
///
/// Commutes with the 2π lattice, so it descends to the torus; it is a
/// diffeomorphism whenever the Jacobian I + c·diag(cos) stays invertible
/// (small `c`). Jacobian is available in closed form for pullbacks.
#[derive(Clone, Debug)]
pub struct TorusDiffeo {
    pub coeff: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

impl TorusDiffeo {
    pub fn new(coeff: Vec<Vec<f64>>) -> Self {
        let n = coeff.len();
        TorusDiffeo { coeff, phase: vec![vec![0.0; n]; n] }
    }

    pub fn dim(&self) -> usize {
        self.coeff.len()
    }

    pub fn eval<T: Real>(&self, x: &[T]) -> Vec<T> {
        (0..self.dim())
            .map(|i| {
                let mut v = x[i];
                for (j, &xj) in x.iter().enumerate() {
                    let c = self.coeff[i][j];
                    if c != 0.0 {
                        v = v + (xj + T::from_f64(self.phase[i][j])).sin().scale(c);
                    }
                }
                v
            })
            .collect()
    }

    /// ∂ψⁱ/∂xʲ, row-major n×n.
    pub fn jacobian<T: Real>(&self, x: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut jac = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = if i == j { T::one() } else { T::zero() };
                let c = self.coeff[i][j];
                if c != 0.0 {
                    v = v + (x[j] + T::from_f64(self.phase[i][j])).cos().scale(c);
                }
                jac[i * n + j] = v;
            }
        }
        jac
    }
}

/// Analytic Finsler structure families.
///
/// * `Riemannian` — F² = a_ij(x) yⁱ yʲ.
/// * `Randers` — F = α + β with α² = a_ij yⁱyʲ, β = b_i(x) yⁱ, ‖b‖_a < 1.
/// * `ScalarPerturbation` — F² scaled by 1 + ε·profile(x); stays
///   2-homogeneous and positive for small ε.
/// * `PulledBack` — F²(ψ(x), dψ(x)·y) for a closed-form torus diffeo ψ.
#[derive(Clone, Debug)]
pub enum FinslerStructure {
    Riemannian {
        metric: Vec<Vec<TorusMap>>,
    },
    Randers {
        metric: Vec<Vec<TorusMap>>,
        one_form: Vec<TorusMap>,
    },
    ScalarPerturbation {
        base: Box<FinslerStructure>,
        epsilon: f64,
        profile: TorusMap,
    },
    PulledBack {
        base: Box<FinslerStructure>,
        diffeo: TorusDiffeo,
    },
}

impl FinslerStructure {
    pub fn dim(&self) -> usize {
        match self {
            FinslerStructure::Riemannian { metric } => metric.len(),
            FinslerStructure::Randers { metric, .. } => metric.len(),
            FinslerStructure::ScalarPerturbation { base, .. } => base.dim(),
            FinslerStructure::PulledBack { base, .. } => base.dim(),
        }
    }

    /// Euclidean structure: a = δ.
    pub fn euclidean(dim: usize) -> Self {
        let metric = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { TorusMap::one() } else { TorusMap::zero() })
                    .collect()
            })
            .collect();
        FinslerStructure::Riemannian { metric }
    }

    /// Conformal metric a = e^{2u} δ with u = ε·cos(x¹) (2-D).
    pub fn conformal(epsilon: f64) -> Self {
        Self::conformal_wave(epsilon, vec![1, 0])
    }

    /// Conformal metric with u = ε·cos(wave·x).
    pub fn conformal_wave(epsilon: f64, wave: Vec<i32>) -> Self {
        let n = wave.len();
        let factor = TorusMap::Exp(Box::new(TorusMap::Cosine {
            amp: 2.0 * epsilon,
            wave,
            phase: 0.0,
        }));
        let metric = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { factor.clone() } else { TorusMap::zero() })
                    .collect()
            })
            .collect();
        FinslerStructure::Riemannian { metric }
    }

    /// Diagonal anisotropic metric a = diag(e^{2u}, e^{2v}),
    /// u = eps1·cos(x¹), v = eps2·cos(x²). Not conformal unless u ≡ v.
    pub fn diagonal(eps1: f64, eps2: f64) -> Self {
        let e = |amp: f64, axis: usize| {
            TorusMap::Exp(Box::new(TorusMap::Cosine {
                amp: 2.0 * amp,
                wave: if axis == 0 { vec![1, 0] } else { vec![0, 1] },
                phase: 0.0,
            }))
        };
        FinslerStructure::Riemannian {
            metric: vec![
                vec![e(eps1, 0), TorusMap::zero()],
                vec![TorusMap::zero(), e(eps2, 1)],
            ],
        }
    }

    /// Randers structure over the Euclidean metric with constant b.
    pub fn randers_constant(b: Vec<f64>) -> Result<Self> {
        let n = b.len();
        let s = FinslerStructure::Randers {
            metric: euclidean_entries(n),
            one_form: b.into_iter().map(|c| TorusMap::Constant(c)).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Randers structure with b(x) = b0 · bump(x) over the Euclidean metric.
    pub fn randers_bump(b0: Vec<f64>) -> Result<Self> {
        let n = b0.len();
        let s = FinslerStructure::Randers {
            metric: euclidean_entries(n),
            one_form: b0
                .into_iter()
                .map(|c| TorusMap::Scaled(c, Box::new(TorusMap::Bump)))
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// F²(x, y), generic over the scalar type for exact differentiation.
    pub fn f_squared<T: Real>(&self, x: &[T], y: &[T]) -> T {
        match self {
            FinslerStructure::Riemannian { metric } => quadratic(metric, x, y),
            FinslerStructure::Randers { metric, one_form } => {
                let alpha = quadratic(metric, x, y).sqrt();
                let mut beta = T::zero();
                for (bi, yi) in one_form.iter().zip(y.iter()) {
                    beta = beta + bi.eval(x) * *yi;
                }
                let f = alpha + beta;
                f * f
            }
            FinslerStructure::ScalarPerturbation { base, epsilon, profile } => {
                let scale = T::one() + profile.eval(x).scale(*epsilon);
                base.f_squared(x, y) * scale
            }
            FinslerStructure::PulledBack { base, diffeo } => {
                let xi = diffeo.eval(x);
                let jac = diffeo.jacobian(x);
                let n = diffeo.dim();
                let yi: Vec<T> = (0..n)
                    .map(|i| {
                        let mut v = T::zero();
                        for j in 0..n {
                            v = v + jac[i * n + j] * y[j];
                        }
                        v
                    })
                    .collect();
                base.f_squared(&xi, &yi)
            }
        }
    }

    /// F(x, y) for y ≠ 0; errors when F² fails to be positive there.
    pub fn eval_f(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let f2 = self.f_squared(x, y);
        if !(f2 > 0.0) {
            return Err(FinslerError::NonPositiveF {
                value: f2,
                context: format!("x = {x:?}, y = {y:?}"),
            });
        }
        Ok(f2.sqrt())
    }

    /// Construction-time sanity: Riemannian part positive definite on a dense
    /// base sample; Randers deformation strictly convex (sup ‖b‖_a < 1).
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n != 2 {
            // The analytic layer is dimension-agnostic; sampling below walks
            // a 2-D lattice, which covers every structure this crate builds.
            return Ok(());
        }
        let samples = 48;
        let mut worst_b = 0.0f64;
        for si in 0..samples {
            for sj in 0..samples {
                let x = [TAU * si as f64 / samples as f64, TAU * sj as f64 / samples as f64];
                match self {
                    FinslerStructure::Riemannian { metric }
                    | FinslerStructure::Randers { metric, .. } => {
                        let a11 = metric[0][0].eval(&x);
                        let a12 = metric[0][1].eval(&x);
                        let a22 = metric[1][1].eval(&x);
                        let det = a11 * a22 - a12 * a12;
                        if !(a11 > 0.0 && det > 0.0) {
                            return Err(FinslerError::NotPositiveDefinite {
                                min_eig: det.min(a11),
                                context: format!("base metric at x = {x:?}"),
                            });
                        }
                        if let FinslerStructure::Randers { one_form, .. } = self {
                            let b1 = one_form[0].eval(&x);
                            let b2 = one_form[1].eval(&x);
                            // ‖b‖²_a = a^{ij} b_i b_j
                            let norm2 =
                                (a22 * b1 * b1 - 2.0 * a12 * b1 * b2 + a11 * b2 * b2) / det;
                            worst_b = worst_b.max(norm2);
                        }
                    }
                    FinslerStructure::ScalarPerturbation { base, epsilon, profile } => {
                        base.validate()?;
                        let s = 1.0 + epsilon * profile.eval(&x);
                        if !(s > 0.0) {
                            return Err(FinslerError::NonPositiveF {
                                value: s,
                                context: format!("perturbation factor at x = {x:?}"),
                            });
                        }
                    }
                    FinslerStructure::PulledBack { base, .. } => {
                        base.validate()?;
                    }
                }
            }
        }
        if worst_b >= 1.0 {
            return Err(FinslerError::ConvexityViolated { norm: worst_b.sqrt() });
        }
        Ok(())
    }
}

fn euclidean_entries(n: usize) -> Vec<Vec<TorusMap>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { TorusMap::one() } else { TorusMap::zero() })
                .collect()
        })
        .collect()
}

fn quadratic<T: Real>(metric: &[Vec<TorusMap>], x: &[T], y: &[T]) -> T {
    let n = metric.len();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            match &metric[i][j] {
                TorusMap::Constant(c) if *c == 0.0 => continue,
                entry => s = s + entry.eval(x) * y[i] * y[j],
            }
        }
    }
    s
}

/// Base point paired with a non-zero fiber vector.
#[derive(Clone, Debug)]
pub struct PointFrame {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PointFrame {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            return Err(FinslerError::NonPositiveF {
                value: 0.0,
                context: "fiber vector must be non-zero".into(),
            });
        }
        Ok(PointFrame { x, y })
    }

    /// Unit-circle frame at angle θ (2-D).
    pub fn on_circle(x: [f64; 2], theta: f64) -> Self {
        PointFrame { x: x.to_vec(), y: vec![theta.cos(), theta.sin()] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_f_is_the_norm() {
        let s = FinslerStructure::euclidean(2);
        assert!((s.eval_f(&[0.3, 1.1], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn randers_f_at_axis_vectors() {
        let s = FinslerStructure::randers_constant(vec![0.3, 0.0]).unwrap();
        // F(e1) = 1 + 0.3, F(-e1) = 1 - 0.3, F(e2) = 1.
        assert!((s.eval_f(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 1.3).abs() < 1e-14);
        assert!((s.eval_f(&[0.0, 0.0], &[-1.0, 0.0]).unwrap() - 0.7).abs() < 1e-14);
        assert!((s.eval_f(&[0.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn randers_rejects_supercritical_b() {
        assert!(matches!(
            FinslerStructure::randers_constant(vec![1.01, 0.0]),
            Err(FinslerError::ConvexityViolated { .. })
        ));
    }

    #[test]
    fn homogeneity_of_every_family() {
        let structures: Vec<FinslerStructure> = vec![
            FinslerStructure::euclidean(2),
            FinslerStructure::conformal(0.1),
            FinslerStructure::diagonal(0.1, 0.07),
            FinslerStructure::randers_bump(vec![0.2, 0.0]).unwrap(),
            FinslerStructure::ScalarPerturbation {
                base: Box::new(FinslerStructure::conformal(0.05)),
                epsilon: 0.3,
                profile: TorusMap::Bump,
            },
            FinslerStructure::PulledBack {
                base: Box::new(FinslerStructure::conformal(0.1)),
                diffeo: TorusDiffeo::new(vec![vec![0.0, 0.1], vec![0.1, 0.0]]),
            },
        ];
        for s in &structures {
            for &lambda in &[0.25, 2.0, 7.5] {
                let x = [1.1, 2.7];
                let y = [0.6, -1.4];
                let scaled = [lambda * y[0], lambda * y[1]];
                let f2 = s.f_squared(&x, &y);
                let f2s = s.f_squared(&x, &scaled);
                assert!(
                    (f2s - lambda * lambda * f2).abs() < 1e-12 * f2s.abs().max(1.0),
                    "2-homogeneity violated for {s:?}"
                );
            }
        }
    }

    #[test]
    fn bump_profile_range() {
        let b = TorusMap::Bump;
        assert!((b.eval(&[0.0, 0.0]) - 1.0).abs() < 1e-15);
        let lo = b.eval(&[std::f64::consts::PI, std::f64::consts::PI]);
        assert!((lo - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pullback_composes_with_jacobian() {
        // ψ*F evaluated directly must agree with F(ψ(x), dψ·y).
        let base = FinslerStructure::conformal(0.1);
        let diffeo = TorusDiffeo::new(vec![vec![0.1, 0.0], vec![0.0, 0.1]]);
        let s = FinslerStructure::PulledBack { base: Box::new(base.clone()), diffeo: diffeo.clone() };
        let x = [0.4, 1.9];
        let y = [1.0, 0.5];
        let xi = diffeo.eval(&x);
        let jac = diffeo.jacobian(&x);
        let yi = [jac[0] * y[0] + jac[1] * y[1], jac[2] * y[0] + jac[3] * y[1]];
        let direct = base.f_squared(&xi, &yi);
        assert!((s.f_squared(&x, &y) - direct).abs() < 1e-14);
    }
}
