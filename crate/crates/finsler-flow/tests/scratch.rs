//! Temporary probes (deleted before release): route agreement and the
//! dominant eigenvalue of the linearized stepped rhs.

use std::sync::Arc;

use finsler_flow::analytic::FinslerStructure;
use finsler_flow::flow::{
    deturck_rhs, deturck_rhs_expanded, deturck_rhs_quasilinear, ricci_rhs, ricci_rhs_quasilinear,
    BackgroundMetric, FlowState, GeometryCache,
};
use finsler_flow::grid::SphereBundleGrid;

fn qlin_rhs(
    cache: &mut GeometryCache,
    phi: &[f64],
    filtered: bool,
    out: &mut [f64],
) -> Result<(), finsler_flow::error::FinslerError> {
    cache.update(phi, true, None)?;
    cache.update_quasilinear(phi)?;
    cache.quasilinear_rhs_into(None, out)?;
    if filtered {
        cache.grid().fiber_lowpass(out);
    }
    Ok(())
}

fn probe(s: &FinslerStructure, n: usize, ntheta: usize, filtered: bool, label: &str) {
    let grid = SphereBundleGrid::build(n, n, ntheta).unwrap();
    let state = FlowState::from_structure(s, &grid).unwrap();
    let phi0 = state.phi.v.clone();
    let len = phi0.len();
    let mut cache = GeometryCache::new(Arc::clone(&grid));

    let mut f0 = vec![0.0; len];
    qlin_rhs(&mut cache, &phi0, filtered, &mut f0).unwrap();

    let mut v: Vec<f64> = (0..len)
        .map(|i| {
            let h = (i as u64).wrapping_mul(2654435761).wrapping_rem(65536);
            (h as f64) / 65536.0 - 0.5
        })
        .collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }

    let eps = 1e-7;
    let mut phi_p = vec![0.0; len];
    let mut fp = vec![0.0; len];
    let mut lam_hist = Vec::new();
    for it in 0..120 {
        for i in 0..len {
            phi_p[i] = phi0[i] + eps * v[i];
        }
        qlin_rhs(&mut cache, &phi_p, filtered, &mut fp).unwrap();
        let mut jv: Vec<f64> = (0..len).map(|i| (fp[i] - f0[i]) / eps).collect();
        let lam = v.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>();
        let nj = norm(&jv);
        for x in jv.iter_mut() {
            *x /= nj;
        }
        v = jv;
        if it >= 112 {
            lam_hist.push(lam);
        }
    }
    let txt: Vec<String> = lam_hist.iter().map(|x| format!("{x:.4e}")).collect();
    println!("{label} filtered={filtered}: rayleigh tail {txt:?}");
}

#[test]
#[ignore]
fn quasilinear_route_agreement() {
    for (name, s) in [
        ("conformal", FinslerStructure::conformal(0.1)),
        ("randers", FinslerStructure::randers_bump(vec![0.2, 0.0]).unwrap()),
    ] {
        let grid = SphereBundleGrid::build(64, 64, 32).unwrap();
        let mut state = FlowState::from_structure(&s, &grid).unwrap();
        let a = ricci_rhs(&mut state).unwrap();
        let b = ricci_rhs_quasilinear(&mut state).unwrap();
        let scale = a.v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        println!(
            "{name} direct: assembled-vs-quasilinear sup diff = {:.3e} (scale {:.3e})",
            a.sup_diff(&b).unwrap(),
            scale
        );

        let bg = BackgroundMetric::from_structure(&FinslerStructure::euclidean(2), &grid).unwrap();
        let da = deturck_rhs(&mut state, &bg).unwrap();
        let db = deturck_rhs_quasilinear(&mut state, &bg).unwrap();
        let dc = deturck_rhs_expanded(&mut state, &bg).unwrap();
        println!(
            "{name} deturck: spray-vs-quasilinear {:.3e}, connection-vs-quasilinear {:.3e}",
            da.sup_diff(&db).unwrap(),
            dc.sup_diff(&db).unwrap()
        );
    }
}

#[test]
#[ignore]
fn quasilinear_stability() {
    let randers = FinslerStructure::randers_bump(vec![0.2, 0.0]).unwrap();
    probe(&randers, 32, 32, false, "randers 32x32x32");
    probe(&randers, 32, 32, true, "randers 32x32x32");
    let conf = FinslerStructure::conformal(0.1);
    probe(&conf, 64, 32, false, "conformal 64x64x32");
    probe(&conf, 64, 32, true, "conformal 64x64x32");
}
