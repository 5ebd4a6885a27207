"""Smoke test for the voxelsim_py extension module."""

import json
import math
import tempfile
from pathlib import Path

import voxelsim_py as vs


def check_losses():
    assert abs(vs.neg_cosine([1.0, 1.0], [1.0, 0.0]) + math.sqrt(0.5)) < 1e-12
    assert vs.class_weights([100, 300]) == [0.75, 0.25]
    assert abs(vs.poly_lr(250, 500, 1e-3) - 5.359e-4) < 1e-6
    assert abs(vs.total_loss(0.3, -0.9, 10.0) + 8.7) < 1e-12
    assert abs(vs.soft_dice_loss([0.0] * 16, 2, [1, 1, 1, 1, 0, 0, 0, 0]) - 1 / 3) < 1e-6
    assert abs(vs.voxel_pair_similarity([1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0], 2)) < 1e-12
    try:
        vs.neg_cosine([0.0, 0.0], [1.0, 0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero-norm input accepted")


def check_metrics():
    shape = [6, 6, 6]
    a = [False] * 216
    for z in range(1, 4):
        for y in range(1, 4):
            for x in range(1, 4):
                a[x + 6 * (y + 6 * z)] = True
    assert vs.dsc(a, a) == 1.0
    assert vs.hd95(a, a, shape, [1.0, 1.0, 2.0]) == 0.0
    assert vs.assd(a, a, shape, [1.0, 1.0, 2.0]) == 0.0
    assert vs.hd95(a, [False] * 216, shape, [1.0, 1.0, 1.0]) is None


def check_sampler(volume):
    label = vs.downsample_label(volume.label, volume.shape, [s // 2 for s in volume.shape])
    plan = json.loads(vs.sample_voxels(label, [i % 7 == 0 for i in range(len(label))], seed=3))
    picked = [v for s in plan["sets"] for v in s["voxels"]]
    assert len(picked) <= 1700
    assert sum(v["tag"] == "FN" for v in picked) <= 1000
    for s in plan["sets"]:
        assert all(label[v["index"]] == s["class_id"] for v in s["voxels"])


def check_pipeline(tmp):
    manifest = vs.synthesize_dataset(str(tmp / "data"), 7, 2, 1, [16, 16, 8])
    cfg = vs.TrainConfig.desk([16, 16, 8], 3)
    cfg.epochs = 2
    assert cfg.method_label == "feature (3)"
    best, dsc, epochs = vs.train(str(manifest), cfg, str(tmp / "run"))
    assert epochs == 2 and dsc is not None
    report = vs.evaluate(str(best), str(manifest))
    assert report.label == "feature (3)" and 0.0 <= report.average_dsc <= 1.0
    rows = vs.export_embeddings(str(best), str(manifest), [1, 2], str(tmp / "emb.csv"), cap=20)
    assert 0 < rows <= 40

    stripped = tmp / "stripped.ckpt"
    vs.strip_training_only(str(best), str(stripped))
    full, lean = vs.Model.load(str(best)), vs.Model.load(str(stripped))
    assert full.has_heads and not lean.has_heads
    volume = vs.generate_phantom(99, [16, 16, 8]).preprocess(cfg)
    assert full.score_map(volume) == lean.score_map(volume)

    baseline = vs.TrainConfig.from_json(cfg.to_json())
    baseline.lam = 0.0
    assert baseline.method_label == "3D U-Net"


def main():
    check_losses()
    check_metrics()
    volume = vs.generate_phantom(1, [32, 32, 16])
    assert volume.shape == [32, 32, 16] and len(volume.label) == 32 * 32 * 16
    check_sampler(volume)
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
    print("voxelsim_py smoke test passed")


if __name__ == "__main__":
    main()
