//! Python bindings for the finsler-flow engine (placeholder; filled in once
//! the core crate is complete).

use pyo3::prelude::*;

#[pymodule]
fn finsler_flow_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
