use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let locals = PyDict::new(py);
        locals
            .set_item("vs", wrap_pymodule!(voxelsim_py::voxelsim_py)(py))
            .unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, Some(&locals)) {
            panic!("{e}");
        }
    });
}

#[test]
fn losses_and_metrics_round_trip() {
    run(r#"
assert vs.class_weights([100, 300]) == [0.75, 0.25]
assert abs(vs.total_loss(0.3, -0.9, 10.0) + 8.7) < 1e-12
mask = [i % 3 == 0 for i in range(64)]
assert vs.dsc(mask, mask) == 1.0
assert vs.hd95(mask, mask, [4, 4, 4], [1.0, 1.0, 1.0]) == 0.0
"#);
}

#[test]
fn invalid_input_raises_value_error() {
    run(r#"
try:
    vs.neg_cosine([0.0, 0.0], [1.0, 0.0])
    raise AssertionError("accepted")
except ValueError:
    pass
try:
    vs.load_volume("/nonexistent/a.raw", "/nonexistent/b.raw")
    raise AssertionError("accepted")
except FileNotFoundError:
    pass
"#);
}

#[test]
fn config_labels_follow_the_switches() {
    run(r#"
cfg = vs.TrainConfig.desk([16, 16, 8], 3)
assert cfg.method_label == "feature (3)"
cfg.feature_layers = 1
assert cfg.method_label == "feature (1)"
cfg.weighted = False
assert cfg.method_label == "feature (w/o weight)"
cfg.lam = 0.0
assert cfg.method_label == "3D U-Net"
back = vs.TrainConfig.from_json(cfg.to_json())
assert back.method_label == "3D U-Net" and back.feature_layers == 1
"#);
}

#[test]
fn phantom_volume_preprocesses_to_target_shape() {
    run(r#"
v = vs.generate_phantom(4, [16, 16, 8])
cfg = vs.TrainConfig.desk([8, 8, 4], 3)
small = v.preprocess(cfg)
assert small.shape == [8, 8, 4] and len(small.label) == 256
assert set(small.label) <= set(v.label)
"#);
}
