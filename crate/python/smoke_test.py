"""Smoke test for the `dias` extension module.

Build and install first:
    maturin develop -m crates/py/Cargo.toml
Then run:
    python python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

import dias

SCENE = """
image_size = 16
min_object_size = 3
max_object_size = 6
"""

TRAIN = """
seeds = [0]
steps = 4
batch_size = 2
warmup_steps = 1
distill_warmup = 1
out_dir = "{out}"

[data]
train_count = 6
eval_count = 4

[data.scene]
image_size = 16
min_object_size = 3
max_object_size = 6

[model.encoder]
image_size = 16
hidden = 4
feature_dim = 8

[model.aggregator]
slots = 3
mlp_hidden = 16

[model.decoder]
blocks = 1
heads = 2
mlp_hidden = 16
draws = 1

[probe]
hidden = 4
steps = 5
"""


def check_scenes():
    s = dias.generate_scene(3, SCENE)
    assert (s.height, s.width) == (16, 16)
    assert len(s.image) == 16 * 16 * 3
    assert len(s.gt_masks) == 16 * 16
    assert max(s.gt_masks) == len(s.objects)
    again = dias.generate_scene(3, SCENE)
    assert again.image == s.image, "generation is not deterministic"
    assert len(dias.generate_scenes(4, seed=1, config=SCENE)) == 4
    return s


def check_metrics(scene):
    gt = scene.gt_masks
    assert dias.ari(gt, gt) == 1.0
    relabeled = [7 - g for g in gt]
    assert abs(dias.ari(gt, relabeled) - 1.0) < 1e-12
    scores = dias.discovery_scores(gt, gt)
    assert scores["ari_fg"] == 1.0 and scores["miou"] == 1.0
    empty = dias.discovery_scores([0] * 9, [0] * 9)
    assert empty["ari_fg"] is None


def check_matching_and_reduction():
    mapping, cost = dias.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assert sorted(mapping) == [0, 1, 2] and cost == 5.0
    slots = [[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]
    assert dias.cluster_slots(slots, 0.1) == [[0, 1], [2]]
    reduced, keep = dias.reduce_slots(slots, 0.1)
    assert keep == [True, False, True]
    assert reduced[0] == [1.5, 0.0] and reduced[1] == [0.0, 0.0]
    order, n_known = dias.sample_order(10, 0)
    assert sorted(order) == list(range(10)) and 0 <= n_known < 10
    try:
        dias.reduce_slots([[1.0], [1.0, 2.0]], 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("ragged slots accepted")


def check_training(tmp):
    cfg = Path(tmp) / "train.toml"
    cfg.write_text(TRAIN.format(out=Path(tmp) / "runs"))
    runs = dias.train(str(cfg))
    assert len(runs) == 1
    ckpt = dias.Checkpoint.load(runs[0])
    assert ckpt.seed == 0 and ckpt.slots == 3
    scenes = dias.generate_scenes(3, seed=99, config=SCENE)
    summary = ckpt.evaluate(scenes)
    assert 0.0 <= summary["fraction_last_better"] <= 1.0
    assert math.isfinite(summary["ari"]["mean"])
    labels = ckpt.segment(scenes[0])
    assert len(labels) == 16 * 16 and max(labels) < 3
    try:
        dias.Checkpoint.load(str(Path(tmp) / "missing"))
    except ValueError:
        pass
    else:
        raise AssertionError("missing checkpoint loaded")


def main():
    scene = check_scenes()
    check_metrics(scene)
    check_matching_and_reduction()
    with tempfile.TemporaryDirectory() as tmp:
        check_training(tmp)
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
