"""Smoke test for the pedcross Python bindings.

Build first with `cargo build -p pedcross-py --release` (or install with maturin),
then run `python crates/py/python/smoke_test.py`. Set PEDCROSS_LIB to point at a
specific shared library.
"""

import glob
import importlib
import json
import os
import shutil
import sys
import tempfile


def locate_library():
    explicit = os.environ.get("PEDCROSS_LIB")
    if explicit:
        return explicit
    root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(root, "target"))
    for profile in ("release", "debug"):
        hits = glob.glob(os.path.join(target, profile, "libpedcross_py.*"))
        hits = [h for h in hits if h.endswith((".so", ".dylib"))]
        if hits:
            return hits[0]
    return None


def import_pedcross(workdir):
    try:
        return importlib.import_module("pedcross")
    except ImportError:
        pass
    lib = locate_library()
    if lib is None:
        sys.exit("pedcross extension not found; build crates/py first or set PEDCROSS_LIB")
    shutil.copy(lib, os.path.join(workdir, "pedcross.so"))
    sys.path.insert(0, workdir)
    return importlib.import_module("pedcross")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    work = tempfile.mkdtemp(prefix="pedcross-smoke-")
    pc = import_pedcross(work)
    print("pedcross", pc.__version__)

    r = pc.rollout([[[0.5, 0.5], [0.5, 0.5]]] * 2)
    assert all(close(x, y) for x, y in zip(sum(r, []), [0.625, 0.375, 0.375, 0.625])), r

    assert pc.static_window([950, 500, 970, 560], 600, 600) == (660, 230, 600, 600)
    assert pc.dynamic_window([100, 100, 140, 200]) == (95, 95, 50, 110)

    m = pc.metrics([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
    assert close(m["accuracy"], 0.5) and close(m["auc"], 0.75), m
    try:
        pc.auc([0.3, 0.7], [1, 1])
        raise AssertionError("single-class AUC should fail")
    except ValueError:
        pass

    rows = [
        {"sample_id": f"s{i}", "label": lab, "model": name, "mode": "dynamic", "score": s}
        for name, scores in (("a", [0.9, 0.1, 0.2]), ("b", [0.2, 0.8, 0.3]))
        for i, (lab, s) in enumerate(zip([1, 0, 1], scores))
    ]
    cmp = pc.compare(rows)
    assert cmp["modes"]["dynamic"]["all_wrong"]["all_wrong"] == 1, cmp

    data = os.path.join(work, "data")
    summary = pc.synthesize(data, n=16, seed=3)
    assert summary["tracks"] == 16 and summary["crossing"] == 8, summary

    cfg = os.path.join(data, "pipeline.toml")
    pc.run(["--seed", "3", "synth", "--n", "16", "--out", data])
    store = os.path.join(work, "store")
    ckpt = os.path.join(work, "vivit.ckpt")
    report = os.path.join(work, "vivit.json")
    for args in (
        ["--config", cfg, "preprocess", "--manifest", os.path.join(data, "manifest.jsonl"), "--out", store],
        ["--config", cfg, "train", "--store", store, "--arch", "vivit", "--epochs", "1", "--out", ckpt],
        ["eval", "--ckpt", ckpt, "--store", store, "--out", report],
    ):
        code = pc.run(args)
        assert code == 0, (args, code)
    assert pc.run(["train", "--arch", "resnet", "--store", store, "--out", ckpt]) == 1

    with open(report) as fh:
        assert json.load(fh)["model"] == "vivit"

    model = pc.Checkpoint.load(ckpt)
    assert (model.architecture, model.crop_mode, model.epochs) == ("vivit", "dynamic", 1), repr(model)
    clip = sorted(glob.glob(os.path.join(store, "clips", "*.clip")))[0]
    p = model.predict(clip)
    assert 0.0 < p < 1.0, p
    e = model.explain(clip)
    assert len(e["heatmaps"]) == 8 and len(e["heatmaps"][0]) == e["size"] ** 2
    assert close(e["score"], p, 1e-6)

    shutil.rmtree(work)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
