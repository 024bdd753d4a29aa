use pyo3::prelude::*;
use pyo3::types::PyDict;

use pcolab_py::pcolab_py;

fn run(code: &str) {
    pyo3::append_to_inittab!(pcolab_py);
    Python::with_gil(|py| {
        let globals = PyDict::new(py);
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).map_err(|e| e.print(py)).unwrap();
    });
}

#[test]
fn module_round_trip() {
    run(r#"
import json, math
import pcolab_py as pc

cfg = pc.Config()
assert pc.Config(cfg.to_json()).hash() == cfg.hash()
vocab, items = pc.generate_corpus(cfg, 0, 3)
prompt, response = items[0]
model = pc.TinyLm(cfg.lm_json(), 0)
assert len(model.logits([1] + prompt)) == len(prompt) + 1
lp = model.logprob(prompt, response)
assert lp < model.logprob(prompt, response, True) < 0.0
assert pc.gate(1.0, 1.0, 2.0) == 0.5
loss = json.loads(cfg.loss_json())
loss["variant"] = "dpo"
value, _ = pc.pair_loss(model, [(prompt, response, response[::-1])], json.dumps(loss))
assert abs(value - math.log(2)) < 1e-12
try:
    pc.Config('{"sede": 1}')
    raise AssertionError("accepted unknown field")
except ValueError:
    pass
"#);
}
