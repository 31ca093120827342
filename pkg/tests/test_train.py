import csv

import numpy as np
import pytest

from waterflow.config import ConfigError, RunConfig
from waterflow.data import load_dataset, write_dataset
from waterflow.train import CKPT_NAME, TrainingAborted, build_trainer, loss_weights


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, [(i, "train") for i in range(8)], 16, 16)
    return load_dataset(root)


def cfg(**kw):
    base = dict(image_size=16, iters_enhance=24, iters_detect=6, iters_joint=6, log_interval=1)
    base.update(kw)
    return RunConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_training_reduces_l1(data, tmp_path):
    tr = build_trainer(cfg(iters_enhance=60, log_interval=20), data, "enhance", tmp_path)
    tr.run()
    rows = read_rows(tmp_path / "loss.csv")
    assert rows[0] == ["iteration", "contrastive", "style", "detection", "l1", "total"]
    l1 = [float(r[4]) for r in rows[1:]]
    assert l1[-1] < l1[0]


def test_resume_is_bit_identical(data, tmp_path):
    full = build_trainer(cfg(), data, "enhance", tmp_path / "full")
    full.run()
    part = build_trainer(cfg(), data, "enhance", tmp_path / "part")
    part.run(stop_at=12)
    resumed = build_trainer(cfg(), data, "enhance", tmp_path / "part", resume=tmp_path / "part" / CKPT_NAME)
    assert resumed.iteration == 12
    resumed.run()
    assert read_rows(tmp_path / "full" / "loss.csv") == read_rows(tmp_path / "part" / "loss.csv")
    assert (tmp_path / "full" / CKPT_NAME).read_bytes() == (tmp_path / "part" / CKPT_NAME).read_bytes()


def test_same_seed_same_outputs(data, tmp_path):
    for name in ("a", "b"):
        build_trainer(cfg(iters_enhance=5), data, "enhance", tmp_path / name).run()
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_zero_detection_weight_matches_enhancement_objective(data, tmp_path):
    w = loss_weights(cfg(lambda3=0.0), with_detection=True)
    assert w.detection == 0.0
    assert loss_weights(cfg(), with_detection=False).detection == 0.0
    tr = build_trainer(cfg(lambda3=0.0), data, "joint", tmp_path, from_scratch=True)
    vals = tr.step(0)
    expected = vals["contrastive"] + 100.0 * vals["style"] + vals["l1"]
    assert vals["total"] == pytest.approx(expected, rel=1e-5)


def test_cosine_schedule(data, tmp_path):
    tr = build_trainer(cfg(lr=1e-3), data, "enhance", tmp_path)
    assert tr.learning_rate(0) == 1e-3
    assert tr.learning_rate(12) == pytest.approx(5e-4)
    assert tr.learning_rate(24) == pytest.approx(0.0, abs=1e-18)
    const = build_trainer(cfg(lr=1e-3, lr_schedule="constant"), data, "enhance", tmp_path)
    assert const.learning_rate(20) == 1e-3


def test_phase_prerequisites(data, tmp_path):
    with pytest.raises(ConfigError, match="enhance_ckpt"):
        build_trainer(cfg(), data, "detect", tmp_path)
    with pytest.raises(ConfigError, match="joint"):
        build_trainer(cfg(), data, "joint", tmp_path)
    with pytest.raises(ConfigError):
        build_trainer(cfg(), data, "finetune", tmp_path, from_scratch=True)


def test_detector_phases_chain(data, tmp_path):
    build_trainer(cfg(iters_enhance=2), data, "enhance", tmp_path / "e").run()
    c = cfg(enhance_ckpt=str(tmp_path / "e" / CKPT_NAME))
    build_trainer(c, data, "detect", tmp_path / "d").run()
    c.detect_ckpt = str(tmp_path / "d" / CKPT_NAME)
    joint = build_trainer(c, data, "joint", tmp_path / "j")
    before = {k: v.data.copy() for k, v in joint.model.named_parameters()}
    joint.run()
    rows = read_rows(tmp_path / "j" / "loss.csv")
    assert all(r[3] != "" for r in rows[1:])
    assert any(not np.array_equal(before[k], v.data) for k, v in joint.model.named_parameters())


def test_raw_detector_has_no_enhancer(data, tmp_path):
    tr = build_trainer(cfg(detect_input="raw"), data, "detect", tmp_path)
    assert tr.model is None
    tr.run()


def test_non_finite_loss_aborts_and_keeps_checkpoint(data, tmp_path):
    tr = build_trainer(cfg(iters_enhance=4), data, "enhance", tmp_path)
    tr.run(stop_at=2)
    good = (tmp_path / CKPT_NAME).read_bytes()
    name, p = next(iter(tr.model.named_parameters()))
    p.data = np.full_like(p.data, np.nan)
    with pytest.raises(TrainingAborted, match="iteration 2"):
        tr.run()
    assert (tmp_path / CKPT_NAME).read_bytes() == good


def test_joint_phase_continues_each_schedule(data, tmp_path):
    c = cfg(lr=1e-4, det_lr=1e-3, iters_enhance=30, iters_detect=10, iters_joint=10)
    tr = build_trainer(c, data, "joint", tmp_path, from_scratch=True)
    enh, det = tr.rates(0, ["flow.x", "det.y"])
    # the joint phase starts where the pretraining phases ended on one cosine curve
    assert enh == pytest.approx(1e-4 * 0.5 * (1 + np.cos(np.pi * 30 / 40)))
    assert det == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 10 / 20)))
    solo = build_trainer(c, data, "detect", tmp_path, from_scratch=True)
    assert solo.rates(0, ["det.y"]) == [1e-3]
