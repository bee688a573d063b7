"""Smoke test for the ecgformer_py extension.

Build first:
    cargo build --release -p ecgformer-py
    cp target/release/libecgformer_py.so python/ecgformer_py.so
then run from the repository root:
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ecgformer_py as ef


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


cfg = ef.ModelConfig()
model = ef.Model(cfg)
check(model.count_params() == 185925, "default model parameter count")
check("delta" in model.param_report(), "parameter report has a delta line")

tiny = ef.ModelConfig.tiny(dropout=0.0)
check(tiny.tokens == 4, "tiny config has four tokens")

try:
    ef.ModelConfig(d_model=0).validate()
    raised = False
except ValueError:
    raised = True
check(raised, "invalid config raises ValueError")

ds = ef.synthetic_beats([40, 10, 20, 10, 20], noise=0.05, seed=3)
check(len(ds) == 100, "synthetic dataset length")
check(list(ds.class_counts()) == [40, 10, 20, 10, 20], "synthetic class counts")

sub = ef.stratified_subset(ds, 50, 1)
check(len(sub) == 50, "stratified subset size")

stats = ef.fit_normalizer(sub)
norm = ef.apply_normalizer(sub, stats)
col = [row[10] for row in norm.features]
mean = sum(col) / len(col)
check(abs(mean) < 1e-9, "normalized column has zero mean")

val = ef.apply_normalizer(ef.stratified_subset(ds, 20, 2), stats)
tiny_model, history = ef.train_model(tiny, norm, val, epochs=3, learning_rate=1e-3, seed=5)
check(len(history) == 3, "training history has one entry per epoch")
check(all(math.isfinite(h["train_loss"]) for h in history), "training losses are finite")

probs = tiny_model.predict_proba(val.features)
check(all(abs(sum(p) - 1.0) < 1e-12 for p in probs), "probabilities sum to one")
preds = tiny_model.predict(val.features)
check(preds == [max(range(5), key=p.__getitem__) for p in probs], "predict is argmax of probabilities")

rep = ef.classification_report(val.labels, preds)
check(abs(rep["accuracy"] - sum(a == b for a, b in zip(val.labels, preds)) / len(preds)) < 1e-12,
      "report accuracy matches direct count")
cm = ef.confusion_matrix(val.labels, preds)
check(sum(map(sum, cm)) == len(preds), "confusion matrix total")

g = ef.gradcheck()
check(g["passed"], f"gradcheck passes (max rel err {g['max_rel_error']:.2e})")
g = ef.gradcheck(fault_op="softmax")
check(not g["passed"], "gradcheck catches a faulty softmax backward")

with tempfile.TemporaryDirectory() as d:
    ckpt = os.path.join(d, "model.bin")
    m2, _ = ef.train_model(tiny, norm, val, epochs=2, seed=5, stats=stats, checkpoint=ckpt)
    loaded = ef.Model.load(ckpt)
    raw_val = ef.stratified_subset(ds, 20, 2)
    check(loaded.logits(raw_val.features) == m2.logits(val.features),
          "loaded checkpoint normalizes raw rows and matches bitwise")
    try:
        ef.load_csv(os.path.join(d, "missing.csv"))
        raise SystemExit("FAIL: missing CSV did not raise")
    except FileNotFoundError:
        print("ok   missing CSV raises FileNotFoundError")

print("smoke test passed")
