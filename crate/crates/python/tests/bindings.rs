use forestnet_py::forestnet_py;
use pyo3::ffi::c_str;
use pyo3::prelude::*;

fn with_module(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(forestnet_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn functions_match_the_core_library() {
    with_module(c_str!(
        r#"
import forestnet_py as fn
assert fn.reduction_factor(3, 2) == (7, 4)
q = fn.geometric_median([[0.0, 0.0, 0.0]] * 3 + [[10.0, 0.0, 0.0]])
assert abs(q[0]) < 1e-6, q
try:
    fn.geometric_median([])
except ValueError:
    pass
else:
    raise AssertionError("empty input accepted")
try:
    fn.run_stage("nonsense", "")
except ValueError:
    pass
else:
    raise AssertionError("unknown stage accepted")
try:
    fn.run_stage("synth", "[forest]\nn_trees = 0\n")
except fn.ForestnetError as e:
    assert e.args[0] == "config-invalid", e.args
else:
    raise AssertionError("invalid config accepted")
assert "n_trees = 5" in fn.default_config()
"#
    ));
}
