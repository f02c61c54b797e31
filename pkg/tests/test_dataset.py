# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Tests for the synthetic dataset, colorization and preprocessing."""

import json

import numpy as np
import pytest

from fuseguard.dataset import (
    DatasetSpec,
    DatasetStore,
    Preprocessor,
    colorize_depth,
    generate,
)
from fuseguard.errors import DatasetError


class TestGenerate:
    """Rendering the train and test splits."""

    def test_split_sizes_and_ids(self, tiny_splits):
        train, test, _ = tiny_splits
        assert len(train) == 18
        assert len(test) == 6
        assert train.ids[0] == "c0-s000"
        assert set(np.unique(test.labels)) == {0, 1, 2}

    def test_last_instance_is_held_out(self, tiny_splits, tiny_spec):
        train, test, _ = tiny_splits
        held = tiny_spec.instances_per_class - 1
        assert all(int(i.split("-s")[1]) % tiny_spec.instances_per_class == held for i in test.ids)
        assert not set(train.ids) & set(test.ids)

    def test_value_ranges(self, tiny_splits, tiny_spec):
        train, _, _ = tiny_splits
        assert train.rgb.shape == (18, 3, 8, 8)
        assert train.depth.shape == (18, 3, 8, 8)
        assert train.depth_raw.shape == (18, 8, 8)
        assert train.rgb.min() >= 0.0 and train.rgb.max() <= 1.0
        assert train.depth.min() >= 0.0 and train.depth.max() <= 1.0
        assert train.depth_raw.max() <= tiny_spec.background_depth

    def test_same_seed_same_data(self, tiny_spec):
        first, _ = generate(tiny_spec)
        second, _ = generate(tiny_spec)
        np.testing.assert_array_equal(first.rgb, second.rgb)
        np.testing.assert_array_equal(first.depth_raw, second.depth_raw)

    def test_seed_changes_data(self, tiny_spec):
        first, _ = generate(tiny_spec)
        other, _ = generate(DatasetSpec(**{**tiny_spec.to_dict(), "seed": 1}))
        assert not np.array_equal(first.rgb, other.rgb)

    def test_rgb_background_clutter(self):
        spec = DatasetSpec(num_classes=3, samples_per_class=4, instances_per_class=2, image_size=16)
        plain, _ = generate(DatasetSpec(**{**spec.to_dict(), "rgb_clutter": 0.0}))
        busy, _ = generate(spec)
        np.testing.assert_array_equal(plain.depth_raw, busy.depth_raw)
        background = plain.depth_raw == spec.background_depth
        spread = lambda data: np.mean([data.rgb[i][:, background[i]].std() for i in range(len(data))])  # noqa: E731
        assert spread(plain) < 0.03
        assert spread(busy) > 2 * spread(plain)

    def test_shared_palette_pairs_classes(self):
        spec = DatasetSpec(color_policy="shared")
        assert spec.palette_index(0) == spec.palette_index(1)
        assert spec.palette_index(2) != spec.palette_index(1)
        assert DatasetSpec(color_policy="distinct").palette_index(1) == 1

    @pytest.mark.parametrize(
        "overrides",
        [
            {"num_classes": 2},
            {"image_size": 4},
            {"instances_per_class": 1},
            {"samples_per_class": 2, "instances_per_class": 3},
            {"color_policy": "rainbow"},
            {"normalization": "zscore"},
            {"rgb_clutter": -0.1},
        ],
    )
    def test_invalid_spec(self, overrides):
        with pytest.raises(DatasetError):
            generate(DatasetSpec(**overrides))

    def test_subset_keeps_alignment(self, tiny_splits):
        train, _, _ = tiny_splits
        part = train.subset([2, 0])
        assert part.ids == (train.ids[2], train.ids[0])
        np.testing.assert_array_equal(part.rgb[1], train.rgb[0])
        assert part[0].label == int(train.labels[2])


class TestColorize:
    """Surface-normal colorization of depth maps."""

    def test_flat_depth_faces_camera(self):
        out = colorize_depth(np.full((5, 5), 3.0))
        np.testing.assert_allclose(out[:, 2, 2], [0.5, 0.5, 1.0])

    def test_ramp_tilts_normal(self):
        ramp = np.tile(np.arange(6.0), (6, 1))
        out = colorize_depth(ramp, normalization="none")
        assert out[0, 3, 3] == pytest.approx((1 - 1 / np.sqrt(2)) / 2, abs=1e-6)
        assert out[1, 3, 3] == pytest.approx(0.5, abs=1e-6)

    def test_global_normalization_is_shift_invariant(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(5, 6, size=(6, 6))
        np.testing.assert_allclose(
            colorize_depth(depth, normalization="global"),
            colorize_depth(depth + 2.0, normalization="global"),
            atol=1e-6,
        )

    def test_rejects_bad_maps(self):
        with pytest.raises(DatasetError):
            colorize_depth(np.ones((1, 5)))
        with pytest.raises(DatasetError):
            colorize_depth(np.array([[1.0, np.nan], [1.0, 1.0]]))
        with pytest.raises(DatasetError):
            colorize_depth(np.ones((3, 3)), normalization="zscore")


class TestPreprocessor:
    """Per-channel mean-centering."""

    def test_train_split_is_centered(self, tiny_splits):
        train, _, pre = tiny_splits
        rgb, depth = pre.preprocess_batch(train)
        np.testing.assert_allclose(rgb.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(depth.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)

    def test_inverse(self, tiny_splits):
        train, _, pre = tiny_splits
        rgb, _ = pre.preprocess_batch(train)
        np.testing.assert_allclose(pre.inverse_preprocess(rgb, "rgb"), train.rgb, atol=1e-6)

    def test_bounds_match_display_range(self, tiny_splits):
        _, _, pre = tiny_splits
        bounds = pre.bounds(8)
        np.testing.assert_allclose(bounds.rgb_low[:, 0, 0], -pre.rgb_mean)
        np.testing.assert_allclose(bounds.depth_high[:, 0, 0], 1.0 - pre.depth_mean)
        clipped = bounds.clip(np.full((3, 8, 8), 5.0, dtype=np.float32), "rgb")
        np.testing.assert_allclose(clipped, bounds.rgb_high)

    def test_unfitted_preprocessor(self, tiny_splits):
        train, _, _ = tiny_splits
        with pytest.raises(DatasetError) as exc_info:
            Preprocessor().preprocess_batch(train)
        assert "fit" in str(exc_info.value)

    def test_dict_roundtrip(self, tiny_splits):
        _, _, pre = tiny_splits
        again = Preprocessor.from_dict(pre.to_dict())
        np.testing.assert_allclose(again.rgb_mean, pre.rgb_mean)


class TestDatasetStore:
    """Dataset directories on disk."""

    def test_save_and_load(self, tmp_path, tiny_spec, tiny_splits):
        train, test, pre = tiny_splits
        store = DatasetStore(tmp_path / "data")
        store.save(tiny_spec, train, test, pre, metadata={"run_config": {"seed": 0}})

        loaded = store.load()
        assert loaded.spec == tiny_spec
        assert loaded.test.ids == test.ids
        np.testing.assert_array_equal(loaded.train.rgb, train.rgb)
        np.testing.assert_array_equal(loaded.test.labels, test.labels)
        meta = json.loads(store.meta_path.read_text())
        assert meta["split_sizes"] == {"train": 18, "test": 6}
        assert meta["run_config"] == {"seed": 0}

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError) as exc_info:
            DatasetStore(tmp_path / "nowhere").load()
        assert exc_info.value.context["path"].endswith("nowhere")

    def test_missing_labels(self, tmp_path, tiny_spec, tiny_splits):
        train, test, pre = tiny_splits
        store = DatasetStore(tmp_path / "data")
        store.save(tiny_spec, train, test, pre)
        store.labels_path.write_text("sample_id,label\n")
        with pytest.raises(DatasetError):
            store.load()
