use std::ffi::CString;

use pyo3::prelude::*;

fn run(code: &str) {
    pyo3::append_to_inittab!(searth_module);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

use searth_py::searth_module;

#[test]
fn embedded_module_round_trip() {
    run(r#"
import searth
t = searth.Tensor([2, 3], [float(i) for i in range(6)])
assert t.shape == [2, 3] and len(t) == 6
assert t.roll(1, 1).roll(1, -1) == t
assert t.get([1, 2]) == 5.0

frames = searth.synthetic_frames(8, 16, 2, 12, seed=1)
m = searth.Model("tiny", seed=3, grid=(8, 16), channels=2)
assert m.param_count > 0
out = m.rollout(frames[0], frames[1], 2)
assert len(out) == 2 and out[1].shape == [2, 8, 16]

a, b = [searth.Model("tiny", seed=3, grid=(8, 16), channels=2) for _ in range(2)]
searth.finetune_ar(a, frames, 2, 2, batch=2, lr=1e-3, seed=5)
searth.finetune_rar(b, frames, 2, 1, 2, batch=2, lr=1e-3, seed=5)
assert all(a.param(n) == b.param(n) for n in a.param_names())

assert searth.normalized_diff(1.8, 2.0, "rmse") < 0
assert searth.skillful_lead_time([(1, 0.9), (2, 0.7), (3, 0.5)], 0.6) == (2.5, False)
try:
    searth.Tensor([2, 2], [1.0])
except ValueError as e:
    assert "shape" in str(e)
else:
    raise AssertionError("bad tensor accepted")
"#);
}
