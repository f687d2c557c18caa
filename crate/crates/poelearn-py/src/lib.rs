use pyo3::prelude::*;

#[pymodule]
fn poelearn_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
