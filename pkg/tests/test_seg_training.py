import csv

import numpy as np
import pytest

from etta.data import generate_sample
from etta.networks import build_seg_model, full_hash, load_checkpoint, param_hash
from etta.train_seg import TrainConfig, evaluate, predict, train_source


def tiny_data(n, seed0=0, size=32):
    samples = [generate_sample(seed0 + i, size, size) for i in range(n)]
    return np.stack([s.image for s in samples])[:, None], np.stack([s.mask for s in samples])


@pytest.fixture(scope="module")
def data():
    return tiny_data(6), tiny_data(2, seed0=100)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(augment_p=1.5)


def test_empty_dataset_rejected(data):
    (_, _), (vx, vy) = data
    with pytest.raises(ValueError, match="empty"):
        train_source(build_seg_model(base_channels=4), vx[:0], vy[:0], vx, vy, TrainConfig(epochs=1))


def test_zero_lr_only_moves_running_stats(data):
    (x, y), (vx, vy) = data
    model = build_seg_model(base_channels=4, seed=1)
    before = param_hash(model)
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    train_source(model, x, y, vx, vy, TrainConfig(epochs=1, batch=4, lr=0.0))
    assert param_hash(model) == before
    assert any(buffers[k].tobytes() != v.tobytes() for k, v in model.named_buffers().items())


def test_training_is_deterministic_and_logs(tmp_path, data):
    (x, y), (vx, vy) = data
    cfg = TrainConfig(epochs=2, batch=4, lr=1e-3, seed=5)
    runs = []
    for tag in "ab":
        model = build_seg_model(base_channels=4, seed=2)
        _, hist = train_source(model, x, y, vx, vy, cfg, checkpoint=tmp_path / f"{tag}.ckpt",
                               log_csv=tmp_path / f"{tag}.csv")
        runs.append((hist, full_hash(model)))
    assert runs[0] == runs[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert list(rows[0]) == ["epoch", "train_loss", "val_dice"] and len(rows) == 2
    for row in runs[0][0]:
        assert np.isfinite(row["train_loss"]) and row["train_loss"] >= 0


def test_best_checkpoint_is_returned(tmp_path, data):
    (x, y), (vx, vy) = data
    model = build_seg_model(base_channels=4, seed=3)
    _, hist = train_source(model, x, y, vx, vy, TrainConfig(epochs=3, batch=3, lr=3e-3), checkpoint=tmp_path / "c")
    best = max(r["val_dice"] for r in hist)
    assert evaluate(model, vx, vy) == pytest.approx(best, abs=1e-12)
    saved = load_checkpoint(tmp_path / "c")
    for k, v in model.state().items():
        assert saved[k].tobytes() == v.tobytes()


def test_predict_outputs(data):
    (x, _), _ = data
    model = build_seg_model(base_channels=4)
    probs, labels = predict(model, x, batch=4)
    assert probs.shape == (6, 3, 32, 32) and labels.shape == (6, 32, 32)
    np.testing.assert_array_equal(labels, probs.argmax(axis=1))
