use pyo3::prelude::*;

#[pymodule]
fn fame(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
