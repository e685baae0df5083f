"""Smoke test for the gksnet_py extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/gksnet-*.whl
"""

import json
import tempfile
from pathlib import Path

import gksnet_py as g


def main():
    target = g.synthetic_pair(height=40, width=40, seed=2)
    source = g.synthetic_pair(height=40, width=40, seed=1)
    assert target.shape == (40, 40)
    assert target.ground_truth() is not None

    di, classes = g.preclassify(target, seed=0)
    assert len(di) == 40 and all(0.0 <= v <= 1.0 for row in di for v in row)
    assert {v for row in classes for v in row} <= {0, 1, 2}

    cfg = g.PipelineConfig.desk()
    cfg.epochs = 2
    cfg.patch_size = 5
    assert json.loads(cfg.to_json())["train"]["epochs"] == 2

    result = g.run_pipeline(source, target, cfg, seed=3)
    m = result.metrics
    assert m.oe == m.fp + getattr(m, "fn")
    assert 0.0 <= m.pcc <= 100.0
    assert len(result.history_jsonl.splitlines()) == 2

    again = g.run_pipeline(source, target, cfg, seed=3)
    assert again.checkpoint.to_bytes() == result.checkpoint.to_bytes()
    assert again.change_map == result.change_map

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.gks"
        result.checkpoint.save(str(path))
        loaded = g.Checkpoint.load(str(path))
        assert loaded.to_bytes() == result.checkpoint.to_bytes()
        assert g.predict(target, loaded, seed=3) == result.change_map

    same = g.evaluate(target.ground_truth(), target.ground_truth())
    assert same.oe == 0 and same.pcc == 100.0

    assert g.learning_rate(100) == 1e-4 and g.learning_rate(101) == 5e-5

    try:
        g.ImagePair([[1.0, 2.0]], [[1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched extents accepted")

    basic = cfg.variant("basic")
    assert json.loads(basic.to_json())["model"]["enhance"] is False

    print(f"smoke test ok: pcc {m.pcc}, kc {m.kc}")


if __name__ == "__main__":
    main()
