"""Smoke test for the moe_lab Python extension.

Run after `pip install -e crates/python --no-build-isolation`, or point
MOE_LAB_EXT at a built shared library (target/release/libmoe_lab_py.so):

    cargo build --release -p moe-lab-py
    MOE_LAB_EXT=target/release/libmoe_lab_py.so python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import sys


def load():
    path = os.environ.get("MOE_LAB_EXT")
    if not path:
        import moe_lab

        return moe_lab
    loader = importlib.machinery.ExtensionFileLoader("moe_lab", path)
    spec = importlib.util.spec_from_file_location("moe_lab", path, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    sys.modules["moe_lab"] = module
    return module


def main():
    m = load()

    truth = m.MixingMeasure.reference_truth("ridge-sigmoid")
    assert truth.num_atoms == 2 and truth.dim == 1, truth
    gates = truth.gate_weights([0.3])
    assert abs(sum(gates) - 1.0) < 1e-12
    assert m.MixingMeasure.from_json(truth.to_json()) == truth
    assert m.loss(truth, truth, "d2") == 0.0
    assert m.l2_distance(truth, truth) == 0.0

    g = m.MixingMeasure("ridge-sigmoid", [(0.0, [1.0], [-1.0, 2.1]), (0.0, [0.0], [1.0, 2.0])])
    assert m.loss(g, truth, "d2") > 0.0
    assert math.isclose(g.eval([0.5]), sum(w * h for w, h in zip(g.gate_weights([0.5]), [
        1 / (1 + math.exp(-(-0.5 + 2.1))), 1 / (1 + math.exp(-(0.5 + 2.0)))])), rel_tol=1e-12)

    fitted, summary = m.fit("linear", n=2000, seed=1)
    again, _ = m.fit("linear", n=2000, seed=1)
    assert fitted == again
    assert summary["final_objective"] > 0 and summary["l2_distance"] >= 0

    report = m.sweep("linear", n_grid=[300, 600, 1200], replications=2, seed=3)
    assert len(report["records"]) == 6 and report["slope"] is not None

    verdict = m.check("ridge-sigmoid", k=1)
    assert not verdict["independent"]
    labels = {t["label"] for t in verdict["dependency_terms"]}
    assert labels == {"dh/da(eta1)", "x*dh/db(eta1)"}, labels
    assert m.check("tanh", k=2)["independent"]

    curve = m.ratio_curve("linear", r=2.0)
    assert all(b < a for a, b in zip(curve["ratios"], curve["ratios"][1:]))

    try:
        m.ratio_curve("ridge-sigmoid", r=3.0, b1=2.0)
    except m.ConstructionError as e:
        assert "b*1 = 2" in str(e)
    else:
        raise AssertionError("expected ConstructionError")
    try:
        m.loss(g, truth, "d9")
    except m.ConfigError:
        pass
    else:
        raise AssertionError("expected ConfigError")

    print(json.dumps({"ok": True, "fitted": json.loads(fitted.to_json())["expert"]}))


if __name__ == "__main__":
    main()
