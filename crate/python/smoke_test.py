"""Smoke test for the compiled bindings.

Build and copy the extension first:

    cargo build -p forestnet-py --release --features extension-module
    cp target/release/libforestnet_py.so python/forestnet_py.so
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
import forestnet_py as fn  # noqa: E402


def check_geometric_median():
    cluster = np.array([[1.0, 1.0, 1.0]] * 4) + 0.001 * np.eye(4, 3)
    outlier = np.array([[3.0, 1.0, 1.0]])
    q = np.array(fn.geometric_median(np.vstack([cluster, outlier]).tolist()))
    assert np.linalg.norm(q - cluster.mean(axis=0)) < 0.025, q


def check_reduction_factor():
    assert fn.reduction_factor(3, 2) == (7, 4)
    assert fn.reduction_factor(15, 13) == (32767, 8193)


def check_pose_error():
    a = 5.0 * math.pi / 180.0
    rot = [[math.cos(a), -math.sin(a), 0, 0], [math.sin(a), math.cos(a), 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
    ident = np.eye(4).tolist()
    t, r, ok = fn.pose_error(rot, ident)
    assert t == 0.0 and abs(r - 5.0) < 1e-9 and not ok


def check_pipeline():
    with tempfile.TemporaryDirectory() as out:
        cfg = f"""
output_dir = "{out}"
[synth.train]
frames = 3
[synth.test]
frames = 1
[features]
count = 40
samples_per_frame = 150
[forest]
n_trees = 3
max_depth = 3
n_candidates = 20
"""
        for stage in ["synth", "train-forest", "map"]:
            log = json.loads(fn.run_stage(stage, cfg))
            assert log["stage"] == stage
        forest = fn.Forest.load(str(Path(out) / "forest.json"))
        net = fn.ForestNet.from_forest(forest, "L")
        saved = fn.ForestNet.load(str(Path(out) / "fnet-L-init.json"))
        assert forest.n_trees == net.n_trees == saved.n_trees == 3
        features = [float(v) for v in np.random.default_rng(0).integers(-255, 256, forest.feature_count)]
        a = np.array(forest.predict(features))
        b = np.array(net.predict(features))
        assert np.abs(a - b).max() < 1e-6

        try:
            fn.run_stage("localize", f'output_dir = "{out}/empty"')
        except fn.ForestnetError as e:
            assert e.args[0] == "missing-artifact", e.args
        else:
            raise AssertionError("expected a missing-artifact failure")


if __name__ == "__main__":
    check_geometric_median()
    check_reduction_factor()
    check_pose_error()
    check_pipeline()
    print("smoke test passed")
