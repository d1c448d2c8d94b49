//! Connection-level geometry of an analytic Finsler structure.
//!
//! Everything here is exact up to floating-point roundoff: fiber and base
//! derivatives are taken with nested dual numbers, never finite differences.
//! All functions are generic over [`Real`] so that they can themselves be
//! differentiated (the curvature layer seeds base directions through the
//! spray, the hh-curvature route seeds them through the whole connection).
//!
//! Conventions, with ∂̇ᵢ = ∂/∂yⁱ and F² the squared norm:
//!   g_ij  = ½ ∂̇ᵢ∂̇ⱼ F²                         (fundamental tensor)
//!   C_ijk = ¼ ∂̇ᵢ∂̇ⱼ∂̇ₖ F²                        (Cartan tensor, all indices down)
//!   Gⁱ    = ¼ gⁱʰ(∂²F²/∂yʰ∂xʲ yʲ − ∂F²/∂xʰ)     (spray coefficients)
//!   Nⁱ_j  = ∂̇ⱼ Gⁱ                               (nonlinear connection)
//!   δⱼ    = ∂ⱼ − Nˡ_j ∂̇ₗ                        (horizontal base derivative)
//!   γⁱ_jk = ½ gⁱʰ(∂ⱼg_hk + ∂ₖg_jh − ∂ₕg_jk)     (formal Christoffel)
//!   Γⁱ_jk = ½ gⁱʰ(δⱼg_hk + δₖg_jh − δₕg_jk)     (horizontal connection)
//!
//! Homogeneity ties them together: g_ij yⁱyʲ = F², C_ijk yᵏ = 0,
//! Nⁱ_j yʲ = 2Gⁱ, Γⁱ_jk yᵏ = Nⁱ_j, and ∇g = 0 horizontally.

use crate::analytic::FinslerStructure;
use crate::dual::{promote, seed_component, Dual, Real};
use crate::error::{FinslerError, Result};

/// Dense n×n matrix over any scalar; row-major.
#[derive(Clone, Debug)]
pub struct Mat<T> {
    pub n: usize,
    pub a: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(n: usize) -> Self {
        Mat { n, a: vec![T::zero(); n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.a[i * self.n + j] = v;
    }

    /// Gauss–Jordan inverse with partial pivoting on the primal magnitude.
    pub fn inverse(&self) -> Result<Mat<T>> {
        let n = self.n;
        let mut m = self.a.clone();
        let mut inv = Mat::zeros(n);
        for i in 0..n {
            inv.set(i, i, T::one());
        }
        for col in 0..n {
            let mut pivot = col;
            let mut best = m[col * n + col].value().abs();
            for row in col + 1..n {
                let mag = m[row * n + col].value().abs();
                if mag > best {
                    best = mag;
                    pivot = row;
                }
            }
            if best < 1e-300 {
                return Err(FinslerError::SingularMetric { context: "matrix inverse".into() });
            }
            if pivot != col {
                for j in 0..n {
                    m.swap(col * n + j, pivot * n + j);
                    inv.a.swap(col * n + j, pivot * n + j);
                }
            }
            let d = m[col * n + col];
            for j in 0..n {
                m[col * n + j] = m[col * n + j] / d;
                inv.a[col * n + j] = inv.a[col * n + j] / d;
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let f = m[row * n + col];
                for j in 0..n {
                    let s = m[col * n + j] * f;
                    m[row * n + j] = m[row * n + j] - s;
                    let s = inv.a[col * n + j] * f;
                    inv.a[row * n + j] = inv.a[row * n + j] - s;
                }
            }
        }
        Ok(inv)
    }

    /// Smallest eigenvalue of a symmetric 2×2 (primal parts).
    pub fn min_eig_sym2(&self) -> f64 {
        debug_assert_eq!(self.n, 2);
        let a = self.get(0, 0).value();
        let b = self.get(0, 1).value();
        let d = self.get(1, 1).value();
        let tr = a + d;
        let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
        0.5 * (tr - disc)
    }
}

/// Dense n×n×n tensor over any scalar, indexed [i][j][k] row-major.
#[derive(Clone, Debug)]
pub struct Ten3<T> {
    pub n: usize,
    pub a: Vec<T>,
}

impl<T: Real> Ten3<T> {
    pub fn zeros(n: usize) -> Self {
        Ten3 { n, a: vec![T::zero(); n * n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.a[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        self.a[(i * self.n + j) * self.n + k] = v;
    }
}

/// Seed two independent derivative directions on a vector: `d_outer` on the
/// outer dual level, `d_inner` on the inner one.
pub fn seed_pair<T: Real>(v: &[T], d_outer: usize, d_inner: usize) -> Vec<Dual<Dual<T>>> {
    v.iter()
        .enumerate()
        .map(|(k, &c)| {
            let inner = if k == d_inner { Dual::active(c) } else { Dual::constant(c) };
            Dual {
                val: inner,
                eps: if k == d_outer {
                    Dual::constant(T::one())
                } else {
                    Dual::constant(T::zero())
                },
            }
        })
        .collect()
}

/// g_ij(x, y) = ½ ∂̇ᵢ∂̇ⱼ F².
pub fn fundamental_tensor<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Mat<T> {
    let n = y.len();
    let x2: Vec<Dual<Dual<T>>> = promote(&promote(x));
    let mut g = Mat::zeros(n);
    for i in 0..n {
        for j in i..n {
            let yd = seed_pair(y, i, j);
            let v = s.f_squared(&x2, &yd).eps.eps.scale(0.5);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Lowered Cartan tensor C_ijk = ¼ ∂̇ᵢ∂̇ⱼ∂̇ₖ F² (totally symmetric).
pub fn cartan_lowered<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Ten3<T> {
    let n = y.len();
    let x3: Vec<Dual<Dual<Dual<T>>>> = promote(&promote(&promote(x)));
    let mut c = Ten3::zeros(n);
    for i in 0..n {
        for j in i..n {
            for k in j..n {
                let y1 = seed_component(y, k);
                let y2 = seed_pair(&y1, i, j);
                let v = s.f_squared(&x3, &y2).eps.eps.eps.scale(0.25);
                // total symmetry: fill all index orders
                for perm in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                    c.set(perm.0, perm.1, perm.2, v);
                }
            }
        }
    }
    c
}

/// Mixed Cartan tensor Cⁱ_jk = gⁱʰ C_hjk.
pub fn cartan_tensor<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Ten3<T>> {
    let n = y.len();
    let g = fundamental_tensor(s, x, y);
    let ginv = g.inverse()?;
    let low = cartan_lowered(s, x, y);
    let mut c = Ten3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = T::zero();
                for h in 0..n {
                    v = v + ginv.get(i, h) * low.get(h, j, k);
                }
                c.set(i, j, k, v);
            }
        }
    }
    Ok(c)
}

/// Spray coefficients Gⁱ = ¼ gⁱʰ(∂²F²/∂yʰ∂xʲ yʲ − ∂F²/∂xʰ).
pub fn spray<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Vec<T>> {
    let n = y.len();
    let g = fundamental_tensor(s, x, y);
    let ginv = g.inverse()?;

    // ∂F²/∂xʰ with one dual level on the base point.
    let y1: Vec<Dual<T>> = promote(y);
    let mut dx = vec![T::zero(); n];
    for h in 0..n {
        let xd = seed_component(x, h);
        dx[h] = s.f_squared(&xd, &y1).eps;
    }

    // Σⱼ yʲ ∂²F²/∂yʰ∂xʲ: inner dual level carries ∂/∂xʲ, outer carries ∂/∂yʰ.
    let mut mixed = vec![T::zero(); n];
    for h in 0..n {
        let mut acc = T::zero();
        for j in 0..n {
            let xd: Vec<Dual<Dual<T>>> = promote(&seed_component(x, j));
            let y2: Vec<Dual<Dual<T>>> = seed_component(&promote(y), h);
            let d2 = s.f_squared(&xd, &y2).eps.eps;
            acc = acc + d2 * y[j];
        }
        mixed[h] = acc;
    }

    let mut g_spray = vec![T::zero(); n];
    for i in 0..n {
        let mut v = T::zero();
        for h in 0..n {
            v = v + ginv.get(i, h) * (mixed[h] - dx[h]);
        }
        g_spray[i] = v.scale(0.25);
    }
    Ok(g_spray)
}

/// Nonlinear connection Nⁱ_j = ∂̇ⱼGⁱ.
pub fn nonlinear_connection<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Mat<T>> {
    let n = y.len();
    let x1: Vec<Dual<T>> = promote(x);
    let mut nmat = Mat::zeros(n);
    for j in 0..n {
        let yd = seed_component(y, j);
        let gj = spray(s, &x1, &yd)?;
        for i in 0..n {
            nmat.set(i, j, gj[i].eps);
        }
    }
    Ok(nmat)
}

/// Base-partials of the fundamental tensor, ∂g_jk/∂xˡ for each l.
fn fundamental_dx<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Vec<Mat<T>> {
    let n = y.len();
    (0..n)
        .map(|l| {
            let xd = seed_component(x, l);
            let yd: Vec<Dual<T>> = promote(y);
            let gd = fundamental_tensor(s, &xd, &yd);
            let mut out = Mat::zeros(n);
            for j in 0..n {
                for k in 0..n {
                    out.set(j, k, gd.get(j, k).eps);
                }
            }
            out
        })
        .collect()
}

/// Formal Christoffel symbols γⁱ_jk built from plain base partials of g.
pub fn formal_christoffel<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Ten3<T>> {
    let n = y.len();
    let ginv = fundamental_tensor(s, x, y).inverse()?;
    let dg = fundamental_dx(s, x, y);
    let mut gamma = Ten3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = T::zero();
                for h in 0..n {
                    let sum = dg[j].get(h, k) + dg[k].get(j, h) - dg[h].get(j, k);
                    v = v + ginv.get(i, h) * sum;
                }
                gamma.set(i, j, k, v.scale(0.5));
            }
        }
    }
    Ok(gamma)
}

/// δⱼ g_hk = ∂ⱼ g_hk − Nˡ_j ∂̇ₗ g_hk for all (j, h, k); index order [j][h][k].
pub fn horizontal_dg<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Ten3<T>> {
    let n = y.len();
    let dgx = fundamental_dx(s, x, y);
    let c_low = cartan_lowered(s, x, y); // ∂̇ₗ g_hk = 2 C_lhk
    let nconn = nonlinear_connection(s, x, y)?;
    let mut out = Ten3::zeros(n);
    for j in 0..n {
        for h in 0..n {
            for k in 0..n {
                let mut v = dgx[j].get(h, k);
                for l in 0..n {
                    v = v - nconn.get(l, j) * c_low.get(l, h, k).scale(2.0);
                }
                out.set(j, h, k, v);
            }
        }
    }
    Ok(out)
}

/// Horizontal (Chern/Cartan) connection Γⁱ_jk from δ-derivatives of g.
pub fn cartan_h_connection<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Ten3<T>> {
    let n = y.len();
    let ginv = fundamental_tensor(s, x, y).inverse()?;
    let hd = horizontal_dg(s, x, y)?;
    let mut gamma = Ten3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = T::zero();
                for h in 0..n {
                    let sum = hd.get(j, h, k) + hd.get(k, j, h) - hd.get(h, j, k);
                    v = v + ginv.get(i, h) * sum;
                }
                gamma.set(i, j, k, v.scale(0.5));
            }
        }
    }
    Ok(gamma)
}

/// Horizontal covariant derivative of g: ∇ₗ g_jk = δₗg_jk − g_sk Γˢ_jl − g_js Γˢ_kl.
/// Vanishes identically for the horizontal connection; exposed for tests.
pub fn metric_compat_defect<T: Real>(s: &FinslerStructure, x: &[T], y: &[T]) -> Result<Ten3<T>> {
    let n = y.len();
    let g = fundamental_tensor(s, x, y);
    let hd = horizontal_dg(s, x, y)?;
    let gamma = cartan_h_connection(s, x, y)?;
    let mut out = Ten3::zeros(n);
    for l in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = hd.get(l, j, k);
                for sidx in 0..n {
                    v = v - g.get(sidx, k) * gamma.get(sidx, j, l)
                        - g.get(j, sidx) * gamma.get(sidx, k, l);
                }
                out.set(l, j, k, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::FinslerStructure;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn euclidean_fundamental_is_identity() {
        let s = FinslerStructure::euclidean(2);
        let g = fundamental_tensor(&s, &[0.2, 0.9], &[0.7, -0.4]);
        assert!(close(g.get(0, 0), 1.0, 1e-14));
        assert!(close(g.get(1, 1), 1.0, 1e-14));
        assert!(g.get(0, 1).abs() < 1e-14);
    }

    #[test]
    fn riemannian_fundamental_recovers_the_metric_independent_of_y() {
        let s = FinslerStructure::conformal(0.1);
        let x = [1.3, 0.4];
        let scale = (2.0 * 0.1 * x[0].cos()).exp();
        for y in [[1.0, 0.0], [0.3, -2.0], [5.0, 5.0]] {
            let g = fundamental_tensor(&s, &x, &y);
            assert!(close(g.get(0, 0), scale, 1e-13));
            assert!(close(g.get(1, 1), scale, 1e-13));
            assert!(g.get(0, 1).abs() < 1e-13);
        }
    }

    #[test]
    fn riemannian_cartan_tensor_vanishes() {
        let s = FinslerStructure::diagonal(0.1, 0.05);
        let c = cartan_lowered(&s, &[0.7, 1.9], &[1.0, 0.6]);
        for v in &c.a {
            assert!(v.abs() < 1e-13);
        }
    }

    #[test]
    fn euler_identities_hold_for_randers() {
        let s = FinslerStructure::randers_bump(vec![0.2, 0.1]).unwrap();
        let x = [0.9, 2.2];
        let y = [1.1, -0.5];
        let f2 = s.f_squared(&x, &y);
        let g = fundamental_tensor(&s, &x, &y);
        let mut gyy = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                gyy += g.get(i, j) * y[i] * y[j];
            }
        }
        assert!(close(gyy, f2, 1e-12), "g yy = {gyy}, F² = {f2}");

        let c = cartan_lowered(&s, &x, &y);
        for i in 0..2 {
            for j in 0..2 {
                let cy: f64 = (0..2).map(|k| c.get(i, j, k) * y[k]).sum();
                assert!(cy.abs() < 1e-11, "C_{{ij}}·y = {cy}");
            }
        }
    }

    #[test]
    fn spray_matches_christoffel_for_riemannian_data() {
        // Gⁱ = ½ γⁱ_jk yʲ yᵏ when the metric has no fiber dependence.
        let s = FinslerStructure::diagonal(0.12, 0.07);
        let x = [0.4, 1.7];
        let y = [0.8, 0.33];
        let g_spray = spray(&s, &x, &y).unwrap();
        let gamma = formal_christoffel(&s, &x, &y).unwrap();
        for i in 0..2 {
            let mut v = 0.0;
            for j in 0..2 {
                for k in 0..2 {
                    v += gamma.get(i, j, k) * y[j] * y[k];
                }
            }
            assert!(close(g_spray[i], 0.5 * v, 1e-11), "G[{i}] = {} vs {}", g_spray[i], 0.5 * v);
        }
    }

    #[test]
    fn nonlinear_connection_satisfies_euler_relation() {
        let s = FinslerStructure::randers_constant(vec![0.3, 0.0]).unwrap();
        let x = [2.0, 0.3];
        let y = [0.5, 1.2];
        let g_spray = spray(&s, &x, &y).unwrap();
        let nmat = nonlinear_connection(&s, &x, &y).unwrap();
        for i in 0..2 {
            let ny: f64 = (0..2).map(|j| nmat.get(i, j) * y[j]).sum();
            assert!(close(ny, 2.0 * g_spray[i], 1e-11), "N y = {ny} vs 2G = {}", 2.0 * g_spray[i]);
        }
    }

    #[test]
    fn connection_contraction_gives_nonlinear_connection() {
        // yᵏ Γⁱ_jk = Nⁱ_j
        let s = FinslerStructure::randers_bump(vec![0.2, 0.0]).unwrap();
        let x = [1.1, 0.6];
        let y = [0.9, -0.7];
        let gamma = cartan_h_connection(&s, &x, &y).unwrap();
        let nmat = nonlinear_connection(&s, &x, &y).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let gy: f64 = (0..2).map(|k| gamma.get(i, j, k) * y[k]).sum();
                assert!(
                    close(gy, nmat.get(i, j), 1e-10),
                    "yΓ[{i}{j}] = {gy} vs N = {}",
                    nmat.get(i, j)
                );
            }
        }
    }

    #[test]
    fn horizontal_derivative_of_g_vanishes_covariantly() {
        let s = FinslerStructure::randers_bump(vec![0.15, 0.1]).unwrap();
        let defect = metric_compat_defect(&s, &[0.3, 1.4], &[1.0, 0.4]).unwrap();
        for v in &defect.a {
            assert!(v.abs() < 1e-10, "∇g component = {v}");
        }
    }

    #[test]
    fn conformal_christoffel_closed_form() {
        // For a = e^{2u}δ: γ¹₁₁ = u₁, γ¹₁₂ = u₂, γ¹₂₂ = −u₁,
        //                  γ²₁₁ = −u₂, γ²₁₂ = u₁, γ²₂₂ = u₂.
        let eps = 0.1;
        let s = FinslerStructure::conformal(eps);
        let x = [0.8, 2.5];
        let u1 = -eps * x[0].sin();
        let u2 = 0.0;
        let gamma = formal_christoffel(&s, &x, &[1.0, 0.3]).unwrap();
        let cases = [
            (0, 0, 0, u1),
            (0, 0, 1, u2),
            (0, 1, 1, -u1),
            (1, 0, 0, -u2),
            (1, 0, 1, u1),
            (1, 1, 1, u2),
        ];
        for (i, j, k, want) in cases {
            assert!(
                close(gamma.get(i, j, k), want, 1e-12),
                "γ[{i}][{j}{k}] = {} vs {want}",
                gamma.get(i, j, k)
            );
        }
    }
}
