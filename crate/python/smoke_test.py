"""Smoke test for the covlm Python bindings.

Build the extension with `cargo build -p covlm-py`, then run
`python3 python/smoke_test.py`. The script looks for the built library
under target/debug (or target/release) unless COVLM_PY_LIB points at it.
"""

import importlib.util
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    lib = os.environ.get("COVLM_PY_LIB")
    candidates = [Path(lib)] if lib else [ROOT / "target" / p / "libcovlm_py.so" for p in ("debug", "release")]
    found = next((p for p in candidates if p.exists()), None)
    if found is None:
        sys.exit("extension not built: run `cargo build -p covlm-py` first")
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "covlm_py.so"
    shutil.copy(found, target)
    spec = importlib.util.spec_from_file_location("covlm_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module, tmp


def main():
    cv, tmp = load_module()

    a = cv.BBox(0.5, 0.5, 0.4, 0.4)
    b = cv.BBox(0.55, 0.5, 0.4, 0.4)
    assert abs(a.iou(a) - 1.0) < 1e-6
    assert 0.0 < a.iou(b) < 1.0
    far = cv.BBox(0.1, 0.1, 0.1, 0.1)
    assert cv.nms([(a, 0.9), (b, 0.8), (far, 0.7)], 0.5) == [0, 2]

    vocab = cv.Vocab()
    ids = vocab.encode("the red circle")
    assert vocab.decode(ids) == "the red circle"
    text = vocab.validate("<obj> the red circle </obj> <visual> <box> [roi:0] is left of the blue square")
    assert "<visual>" in text
    try:
        vocab.validate("<obj> the red circle <visual>")
    except ValueError:
        pass
    else:
        raise AssertionError("ill-formed sequence accepted")

    scene = cv.Scene.generate(3)
    assert scene.caption and len(scene.entities()) >= 2
    assert scene.render_ppm().startswith(b"P6")

    config = json.dumps({"model": {"dim": 16, "layers": 1, "heads": 2, "ffn": 32}, "batch_size": 2, "lr": 1e-3})
    trainer = cv.Trainer(20, config)
    logs = trainer.train(3)
    assert trainer.step == 3 and len(logs) == 3
    assert all(abs(l["total_loss"] - (l["lm_loss"] + 0.025 * l["det_loss"])) < 1e-4 for l in logs)

    ckpt = tmp / "model.ckpt"
    trainer.save(str(ckpt))
    model = cv.Model.load(str(ckpt))
    assert model.num_params() == trainer.model().num_params()

    out = model.decode(scene, "the", max_tokens=8)
    assert out["text"].startswith("the")
    ppl = model.perplexity(scene, scene.caption)
    assert ppl > 1.0

    metrics, items = model.evaluate("aro", n=5)
    assert 0.0 <= metrics["top1"] <= 1.0 and len(items) == 5

    shutil.rmtree(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
