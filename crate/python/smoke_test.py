#!/usr/bin/env python3
"""Smoke test for the prgcn_py extension module.

Build the module first, then run this script:

    cargo build -p prgcn-py
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    """Copy the built cdylib next to a temp dir as an importable module."""
    candidates = [
        REPO / "target" / "debug" / "libprgcn_py.so",
        REPO / "target" / "release" / "libprgcn_py.so",
        REPO / "target" / "debug" / "libprgcn_py.dylib",
        REPO / "target" / "release" / "libprgcn_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("libprgcn_py not found; run `cargo build -p prgcn-py` first")
    stage = Path(tempfile.mkdtemp(prefix="prgcn_py_"))
    shutil.copy(built, stage / "prgcn_py.so")
    sys.path.insert(0, str(stage))
    import prgcn_py

    return prgcn_py


def main():
    m = import_module()

    # point-cloud utilities
    cloud = m.PointCloud([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
    assert len(cloud) == 3
    singleton = m.PointCloud([(0.0, 0.0, 0.0)])
    two = m.PointCloud([(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
    assert abs(m.chamfer(singleton, two) - 2.0) < 1e-12
    assert m.knn(cloud, 1) == [[1], [0], [0]]
    assert m.fps(cloud, 2)[0] == 0

    # poses and metrics
    ident = m.Pose.identity()
    shifted = m.Pose((1.0, 0.0, 0.0, 0.0), (0.1, 0.0, 0.0))
    assert shifted.apply((0.0, 0.0, 0.0)) == (0.1, 0.0, 0.0)
    add = m.add_metric(ident, shifted, cloud)
    adds = m.adds_metric(ident, shifted, cloud)
    assert abs(add - 0.1) < 1e-12 and adds <= add
    assert abs(m.auc([0.05, 0.2], 0.1) - 25.0) < 0.1
    assert m.success_rate([0.01, 0.5], 0.02) == 50.0
    assert abs(m.diameter(two) - math.sqrt(2.0)) < 1e-12

    # PLY round trip
    with tempfile.TemporaryDirectory() as tmp:
        ply = Path(tmp) / "c.ply"
        cloud.write_ply(ply)
        back = m.PointCloud.read_ply(ply)
        assert back.points() == cloud.points()

    # gradient checks on one seed
    rows = m.gradcheck(seeds=1)
    assert len(rows) >= 13 and all(ok for _, _, ok in rows)

    # a tiny end-to-end run: synthesize, train, refine, predict, evaluate
    with tempfile.TemporaryDirectory() as tmp:
        manifest = m.synthesize(
            Path(tmp) / "data",
            shape="sphere",
            count=6,
            n_points=24,
            occlusion=0.2,
            noise=0.005,
            seed=3,
            model_points=12,
        )
        pipe = m.Pipeline(
            n_raw="16",
            m_refined="32",
            k_nn="4",
            net_scale="0.05",
            latent_dim="16",
            model_points="8",
            batch_size="4",
            joint_batch_size="4",
            alt_epochs="2",
            joint_epochs="2",
            lr="0.001",
        )
        log = pipe.train(manifest)
        assert [phase for phase, _ in log] == ["prn", "pose", "joint", "joint"]
        assert all(math.isfinite(loss) for _, loss in log)

        raw = m.PointCloud.read_ply(Path(tmp) / "data" / "scene_0000_raw.ply")
        refined = pipe.refine(raw)
        assert len(refined) == 32
        pose = pipe.predict(raw)
        assert abs(sum(q * q for q in pose.quat) - 1.0) < 1e-9

        ckpt = Path(tmp) / "model.ckpt"
        pipe.save(ckpt)
        pipe.load(ckpt)

        table, failures = pipe.evaluate(manifest, use_gt=True, symmetric=True)
        assert not failures
        assert "sphere" in table and "100.00" in table

    print("smoke test passed")


if __name__ == "__main__":
    main()
