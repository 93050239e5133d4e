#!/usr/bin/env python3
"""Smoke test for the pcq_py extension module.

Builds nothing itself: run `cargo build -p pcq-python` first, then
`python3 python/smoke_test.py`. The script loads the cdylib straight from
the cargo target directory (release preferred), so no install step is
needed.
"""

import importlib.machinery
import importlib.util
import json
import math
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import pcq_py  # already installed or on PYTHONPATH

        return pcq_py
    except ImportError:
        pass
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libpcq_py.so", "pcq_py.so", "libpcq_py.dylib", "pcq_py.pyd")
    ]
    for path in candidates:
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("pcq_py", str(path))
            spec = importlib.util.spec_from_loader("pcq_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit(
        "pcq_py extension not found; run `cargo build -p pcq-python` "
        f"(searched {len(candidates)} paths under {REPO / 'target'})"
    )


pcq = load_module()
checks = 0


def ok(name):
    global checks
    checks += 1
    print(f"ok {checks} {name}")


cfg = pcq.Config()
assert cfg.epochs > 0 and cfg.tau > 0
assert cfg.to_dict()["tau"] == cfg.tau
fast = pcq.Config(epochs=4, warmup_epochs=1, seed=2)
assert fast.epochs == 4 and fast.warmup_epochs == 1
try:
    pcq.Config(epoochs=4)
    raise AssertionError("unknown key accepted")
except ValueError as e:
    assert "epoochs" in str(e)
try:
    pcq.Config(tau=-1.0)
    raise AssertionError("invalid temperature accepted")
except ValueError:
    pass
assert fast.replace({"tau": 0.5}).tau == 0.5
ok("config defaults, overrides, and rejection")

data = pcq.Dataset.generate(classes=3, dim=8, per_class=12, seed=5)
assert len(data) == 36 and data.num_classes == 3 and data.dim == 8
# Rows are rounded to f32 on generation, so norms are 1 only to f32 precision.
for row in data.features:
    assert math.isclose(sum(v * v for v in row), 1.0, rel_tol=0, abs_tol=1e-6)
assert sorted(set(data.labels)) == [1, 2, 3]
ok("dataset generation yields unit rows and 1-based labels")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "d.pcqe"
    data.write(path)
    back = pcq.Dataset.read(path)
    assert back.features == data.features  # bit-exact round trip
    assert back.labels == data.labels
ok("binary embedding file round-trips bit-exactly")

train_set, test_set = data.split(shots=4, seed=0)
assert len(train_set) == 12 and len(test_set) == 24
model = pcq.train(fast, train_set)
report = model.evaluate(test_set)
assert set(report) >= {"accuracy", "paa", "per_class", "confusion", "loss"}
assert 0.0 <= report["accuracy"] <= 1.0
history = model.history()
assert len(history) == fast.epochs
assert history[-1]["total"] <= history[0]["total"]
ok("training runs and the loss history descends")

predictions = model.predict(test_set.features)
hits = sum(p == l for p, l in zip(predictions, test_set.labels))
assert hits / len(test_set) == report["accuracy"]
ok("predict agrees with the evaluation accuracy")

# Checkpoints store parameters rounded to f32, so the first reload shifts
# metrics at that precision; a second save/load cycle must be a fixed point.
with tempfile.TemporaryDirectory() as tmp:
    model.save(tmp)
    reloaded = pcq.Model.load(tmp)
    assert reloaded.parameters().keys() == model.parameters().keys()
    assert reloaded.evaluate(test_set)["accuracy"] == report["accuracy"]
    again = Path(tmp) / "again"
    reloaded.save(again)
    twice = pcq.Model.load(again)
    assert json.dumps(twice.evaluate(test_set), sort_keys=True) == json.dumps(
        reloaded.evaluate(test_set), sort_keys=True
    )
ok("checkpoint reload is an f32 fixed point with unchanged accuracy")

grids = [
    pcq.loss_ablation(fast, data, seeds=[0, 1], shots=4, workers=w) for w in (1, 2)
]
assert json.dumps(grids[0], sort_keys=True) == json.dumps(grids[1], sort_keys=True)
assert {r["variant"] for r in grids[0]["rows"]} == {
    "align",
    "align+sep",
    "align+comp",
    "align+comp+sep",
}
assert all(r["error"] is None for r in grids[0]["rows"])
ok("loss ablation grid is worker-count invariant")

sweep = pcq.temperature_sweep(fast, data, taus=[2.0, 0.5], seeds=[0], shots=4)
assert [s["variant"] for s in sweep["summaries"]] == ["tau=2", "tau=0.5"]
ok("temperature sweep reports one summary per tau")

entries = pcq.gradient_check()
worst = max(e["max_rel_err"] for e in entries)
assert worst < 1e-4, f"gradient check worst {worst}"
ok(f"gradient suite worst relative error {worst:.2e}")

coords = pcq.project_points(data.features)
assert len(coords) == len(data) and all(len(c) == 2 for c in coords)
ok("2-D projection keeps one row per sample")

print(f"all {checks} smoke checks passed")
