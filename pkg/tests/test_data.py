import numpy as np
import pytest

from waterflow.config import RunConfig
from waterflow.data import (CheckpointError, DataError, _shape_mask, checkpoint_bytes,
                            checkpoint_load, checkpoint_parse, checkpoint_save, dataset_digests,
                            generate_scene, load_dataset, ppm_bytes, ppm_decode, ppm_read,
                            ppm_write, read_manifest, write_dataset)
from waterflow.model import WaterFlow
from waterflow.physics import degrade, enhance_analytic
from waterflow.train import load_models, model_states


class TestScenes:
    def test_same_seed_is_bit_identical(self):
        a, b = generate_scene(17), generate_scene(17)
        np.testing.assert_array_equal(a.clean, b.clean)
        np.testing.assert_array_equal(a.degraded, b.degraded)
        np.testing.assert_array_equal(a.params.depth, b.params.depth)
        assert a.boxes == b.boxes

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_scene(1).clean, generate_scene(2).clean)

    def test_forced_empty_scene(self):
        sc = generate_scene(3, n_objects=0)
        assert sc.boxes == []
        assert sc.clean.shape == (3, 64, 64)

    def test_degraded_is_exactly_the_formation_model(self):
        sc = generate_scene(4)
        np.testing.assert_array_equal(sc.degraded, degrade(sc.clean, sc.params.t, sc.params.B))

    def test_analytic_inverse_recovers_clean_for_100_seeds(self):
        worst = 0.0
        for seed in range(100):
            sc = generate_scene(seed)
            rec = enhance_analytic(sc.degraded, sc.params.t, sc.params.B)
            worst = max(worst, float(np.abs(rec - sc.clean).max()))
        assert worst < 1e-5

    def test_boxes_enclose_their_shapes(self):
        for seed in range(20):
            sc = generate_scene(seed)
            for b in sc.boxes:
                assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= 1
                assert 0 <= b.cy - b.h / 2 and b.cy + b.h / 2 <= 1
                assert b.class_id in (0, 1, 2)

    def test_mask_box_is_tight(self):
        yy, xx = np.mgrid[0:64, 0:64] + 0.5
        for cls in range(3):
            mask = _shape_mask(cls, xx, yy, 30.0, 20.0, 8.0, 6.0)
            rows = np.nonzero(mask.any(axis=1))[0]
            cols = np.nonzero(mask.any(axis=0))[0]
            assert mask[rows[0]].any() and mask[rows[-1]].any()
            assert mask[:, cols[0]].any() and mask[:, cols[-1]].any()

    def test_degraded_in_unit_range(self):
        for seed in range(10):
            sc = generate_scene(seed)
            assert sc.degraded.min() >= 0.0 and sc.degraded.max() <= 1.0


class TestPpm:
    def test_black_2x2_layout(self):
        assert ppm_bytes(np.zeros((3, 2, 2))) == b"P6\n2 2\n255\n" + bytes(12)

    def test_row_major_rgb_order(self):
        img = np.zeros((3, 1, 2))
        img[0, 0, 0] = 1.0  # red at (0, 0)
        img[2, 0, 1] = 1.0  # blue at (0, 1)
        assert ppm_bytes(img)[-6:] == bytes([255, 0, 0, 0, 0, 255])

    def test_round_half_up(self):
        img = np.full((3, 1, 1), 0.5 / 255)
        assert ppm_bytes(img)[-3:] == bytes([1, 1, 1])

    def test_write_read_quantisation_bound(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(3, 9, 7))
        ppm_write(img, tmp_path / "a.ppm")
        back = ppm_read(tmp_path / "a.ppm")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1 / 510 + 1e-12

    def test_comments_in_header_are_skipped(self):
        buf = b"P6\n# made by hand\n1 1\n255\n" + bytes([10, 20, 30])
        np.testing.assert_allclose(ppm_decode(buf)[:, 0, 0], np.array([10, 20, 30]) / 255)

    def test_maxval_other_than_255_rejected(self):
        with pytest.raises(DataError, match="maxval"):
            ppm_decode(b"P6\n1 1\n65535\n" + bytes(6))

    def test_truncated_payload_reports_offset(self):
        with pytest.raises(DataError, match="byte 11"):
            ppm_decode(b"P6\n2 2\n255\n" + bytes(5))

    def test_bad_magic(self):
        with pytest.raises(DataError, match="magic"):
            ppm_decode(b"P3\n1 1\n255\n0 0 0\n")

    def test_truncated_header(self):
        with pytest.raises(DataError, match="byte"):
            ppm_decode(b"P6\n2")


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        states = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
                  "b": np.array([np.float32(np.pi)]), "scalar": np.float32(2.5) * np.ones(())}
        checkpoint_save(states, tmp_path / "c.wflo")
        back = checkpoint_load(tmp_path / "c.wflo")
        assert list(back) == list(states)
        for k in states:
            assert back[k].shape == states[k].shape
            assert back[k].tobytes() == np.asarray(states[k], dtype="<f4").tobytes()

    def test_empty_model_round_trips(self):
        assert checkpoint_parse(checkpoint_bytes({})) == {}

    def test_truncation_is_a_crc_error(self):
        data = checkpoint_bytes({"w": np.ones((4, 4), np.float32)})
        for cut in (1, 5, len(data) // 2):
            with pytest.raises(CheckpointError, match="CRC"):
                checkpoint_parse(data[:-cut])

    def test_bit_flip_is_a_crc_error(self):
        data = bytearray(checkpoint_bytes({"w": np.ones(3, np.float32)}))
        data[20] ^= 0x01
        with pytest.raises(CheckpointError, match="CRC"):
            checkpoint_parse(bytes(data))

    def test_model_round_trip_gives_identical_outputs(self, tmp_path):
        cfg = RunConfig(image_size=16)
        model = WaterFlow(cfg)
        rng = np.random.default_rng(2)
        for _, p in model.named_parameters():
            p.data = (p.data + 0.05 * rng.normal(size=p.shape)).astype(p.dtype)
        checkpoint_save(model_states(model, None), tmp_path / "m.wflo")
        back, det, _ = load_models(tmp_path / "m.wflo", RunConfig(image_size=16))
        assert det is None
        x = rng.uniform(0.1, 0.9, size=(1, 3, 16, 16))
        assert model.enhance(x)[0].data.tobytes() == back.enhance(x)[0].data.tobytes()

    def test_unknown_names_listed(self, tmp_path):
        states = model_states(WaterFlow(RunConfig(image_size=16)), None)
        states["flow.ghost"] = np.zeros(2, np.float32)
        states["zz.extra"] = np.zeros(1, np.float32)
        checkpoint_save(states, tmp_path / "m.wflo")
        with pytest.raises(KeyError, match="flow.ghost, zz.extra"):
            load_models(tmp_path / "m.wflo", RunConfig(image_size=16))

    def test_shape_mismatch_rejected(self):
        model = WaterFlow(RunConfig(image_size=16))
        states = model.state_dict()
        name = next(iter(states))
        states[name] = np.zeros(states[name].shape + (2,), np.float32)
        with pytest.raises(ValueError, match="shape mismatch"):
            model.load_state_dict(states)


class TestDataset:
    def test_manifest_reproduces_digests(self, tmp_path):
        entries = [(5, "train"), (6, "train"), (1_000_000, "val")]
        write_dataset(tmp_path / "a", entries, 32, 32)
        again = read_manifest(tmp_path / "a" / "manifest.txt")
        assert again == entries
        write_dataset(tmp_path / "b", again, 32, 32)
        assert dataset_digests(tmp_path / "a") == dataset_digests(tmp_path / "b")

    def test_load_matches_quantised_scenes(self, tmp_path):
        scenes = write_dataset(tmp_path / "d", [(7, "train"), (8, "train")], 32, 32)
        ds = load_dataset(tmp_path / "d")
        assert ds.ids == ["scene_00000007", "scene_00000008"]
        assert (ds.height, ds.width) == (32, 32)
        for i, sc in enumerate(scenes):
            assert np.abs(ds.clean[i] - sc.clean).max() <= 1 / 510 + 1e-12
            assert len(ds.boxes[i]) == len(sc.boxes)
            for a, b in zip(ds.boxes[i], sc.boxes):
                assert a.class_id == b.class_id
                assert abs(a.cx - b.cx) <= 5e-7 and abs(a.w - b.w) <= 5e-7

    def test_not_a_dataset_folder(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_malformed_manifest_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("1,train\noops\n")
        with pytest.raises(DataError, match=":2:"):
            read_manifest(tmp_path / "m.txt")
