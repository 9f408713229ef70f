"""
数据集测试：裁剪/翻转、填充、清单读写、并行合成与批数据流
"""

import pytest
import torch

from conftest import smooth_image, write_images
from dataset_service import (
    MANIFEST_NAME, BatchStream, ManifestEntry, PairDataset, StepBatchSampler, crop_back, load_pair, load_png,
    pad_to_multiple, paired_folder_manifest, random_crop_pair, random_flips, read_manifest, resolve_kinds, save_png,
    synthesize_dataset,
)
from degradation_service import ImagePair
from exceptions import ConfigurationError, DimensionError, FormatError, ParameterError
from schemas import DegradationKind, DegradationSpec


def _coordinate_pair(height: int = 40, width: int = 48) -> ImagePair:
    rows = torch.arange(height, dtype=torch.float32).view(-1, 1).expand(height, width)
    cols = torch.arange(width, dtype=torch.float32).view(1, -1).expand(height, width)
    clean = torch.stack([rows, cols, rows * 1000 + cols])
    return ImagePair(clean, clean * 2.0, DegradationSpec(kind="noise"))


class TestAugmentation:

    def test_crop_of_full_size_is_identity(self):
        pair = _coordinate_pair(32, 32)
        cropped = random_crop_pair(pair, 32, seed=3)
        assert torch.equal(cropped.clean, pair.clean)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_crop_window_shared(self, seed):
        cropped = random_crop_pair(_coordinate_pair(), 16, seed)
        assert cropped.clean.shape == (3, 16, 16)
        assert torch.equal(cropped.degraded, cropped.clean * 2.0)
        top, left = int(cropped.clean[0, 0, 0]), int(cropped.clean[1, 0, 0])
        assert torch.equal(cropped.clean, _coordinate_pair().clean[:, top:top + 16, left:left + 16])

    def test_crop_too_large(self):
        with pytest.raises(DimensionError):
            random_crop_pair(_coordinate_pair(8, 8), 16, 0)

    @pytest.mark.parametrize("seed", range(6))
    def test_flip_is_involution(self, seed):
        pair = _coordinate_pair()
        twice = random_flips(random_flips(pair, seed), seed)
        assert torch.equal(twice.clean, pair.clean)
        once = random_flips(pair, seed)
        assert torch.equal(once.degraded, once.clean * 2.0)


class TestPadding:

    def test_pad_and_crop_back(self):
        x = torch.rand(3, 130, 127)
        padded, dims = pad_to_multiple(x, 8)
        assert padded.shape == (3, 136, 128)
        assert dims == (130, 127)
        assert torch.equal(crop_back(padded, dims), x)

    def test_divisible_input_is_identity(self):
        x = torch.rand(3, 16, 24)
        padded, dims = pad_to_multiple(x, 8)
        assert padded is x
        assert dims == (16, 24)

    def test_reflect_border(self):
        x = torch.rand(3, 7, 8)
        padded, _ = pad_to_multiple(x, 8)
        assert torch.equal(padded[:, 7], padded[:, 5])

    def test_batched_padding(self):
        padded, dims = pad_to_multiple(torch.rand(2, 3, 10, 9), 4)
        assert padded.shape == (2, 3, 12, 12)
        assert dims == (10, 9)

    def test_tiny_image_falls_back_to_replicate(self):
        padded, _ = pad_to_multiple(torch.rand(3, 2, 2), 8)
        assert padded.shape == (3, 8, 8)

    def test_multiple_must_be_power_of_two(self):
        with pytest.raises(ParameterError):
            pad_to_multiple(torch.rand(3, 8, 8), 6)


class TestImages:

    def test_png_round_trip_is_exact_on_8bit_values(self, tmp_path):
        x = torch.randint(0, 256, (3, 9, 11)).float() / 255.0
        assert torch.equal(load_png(save_png(tmp_path / "x.png", x)), x)

    def test_unreadable_png(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png")
        with pytest.raises(FormatError):
            load_png(path)


class TestManifest:

    def test_resolve_kinds(self):
        specs = resolve_kinds(["noise:sigma=15", "haze:beta=1.5"])
        assert [s.kind for s in specs] == [DegradationKind.NOISE, DegradationKind.HAZE]
        assert specs[1].params == {"beta": 1.5}

    def test_presets(self):
        assert [s.task_name() for s in resolve_kinds(preset="three")] == [
            "noise_s15", "noise_s25", "noise_s50", "haze", "rain"]
        assert len(resolve_kinds(preset="five")) == 5

    def test_empty_kinds_list_valid_kinds(self):
        with pytest.raises(ConfigurationError) as exc:
            resolve_kinds([])
        for kind in DegradationKind:
            assert kind.value in exc.value.message

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            resolve_kinds(["snow"])

    def test_line_round_trip(self):
        entry = ManifestEntry("/data/a.png", DegradationSpec(kind="noise", params={"sigma": 50.0}, seed=9), "deg/a.png")
        assert entry.to_line() == "/data/a.png\tnoise\tsigma=50\t9\tdeg/a.png"
        parsed = ManifestEntry.from_line(entry.to_line())
        assert parsed == entry
        assert parsed.task == "noise_s50"

    def test_four_column_line(self):
        entry = ManifestEntry.from_line("a.png\thaze\t\t3")
        assert entry.degraded_path is None
        assert entry.spec.seed == 3

    def test_bad_column_count(self):
        with pytest.raises(FormatError):
            ManifestEntry.from_line("a.png\tnoise")

    def test_pair_resynthesized_without_degraded_path(self, tmp_path):
        path = save_png(tmp_path / "a.png", smooth_image(0))
        (tmp_path / "m.tsv").write_text("a.png\tnoise\tsigma=25\t4\n", encoding="utf-8")
        entry = read_manifest(tmp_path / "m.tsv")[0]
        pair = load_pair(entry)
        assert entry.clean_path == str(path)
        assert not torch.equal(pair.clean, pair.degraded)
        assert torch.equal(pair.degraded, load_pair(entry).degraded)


class TestSynthesis:

    def test_manifest_line_count_and_files(self, clean_dir, tmp_path):
        specs = resolve_kinds(["noise:sigma=25", "haze", "rain"])
        manifest = synthesize_dataset(clean_dir, specs, tmp_path / "out", seed=1, workers=2)
        assert manifest.name == MANIFEST_NAME
        entries = read_manifest(manifest)
        assert len(entries) == 4 * 3
        assert all(entry.degraded_path and load_png(entry.degraded_path).shape == (3, 32, 32) for entry in entries)

    def test_parallel_matches_serial(self, clean_dir, tmp_path):
        specs = resolve_kinds(preset="five")
        serial = synthesize_dataset(clean_dir, specs, tmp_path / "serial", seed=7, workers=1)
        parallel = synthesize_dataset(clean_dir, specs, tmp_path / "parallel", seed=7, workers=4)
        assert serial.read_text(encoding="utf-8") == parallel.read_text(encoding="utf-8")
        for path in sorted((tmp_path / "serial" / "degraded").iterdir()):
            assert path.read_bytes() == (tmp_path / "parallel" / "degraded" / path.name).read_bytes()

    def test_seed_changes_content(self, clean_dir, tmp_path):
        specs = resolve_kinds(["noise:sigma=25"])
        a = read_manifest(synthesize_dataset(clean_dir, specs, tmp_path / "a", seed=1, workers=1))
        b = read_manifest(synthesize_dataset(clean_dir, specs, tmp_path / "b", seed=2, workers=1))
        assert a[0].spec.seed != b[0].spec.seed
        assert not torch.equal(load_png(a[0].degraded_path), load_png(b[0].degraded_path))

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            synthesize_dataset(tmp_path / "empty", resolve_kinds(["haze"]), tmp_path / "out")

    def test_paired_folder(self, tmp_path):
        write_images(tmp_path / "pairs" / "clean", 2)
        write_images(tmp_path / "pairs" / "degraded", 2)
        entries = paired_folder_manifest(tmp_path / "pairs", "rain")
        assert [e.task for e in entries] == ["rain", "rain"]
        assert entries[0].degraded_path.endswith("img00.png")


class TestBatchStream:

    @pytest.fixture
    def entries(self, clean_dir, tmp_path):
        specs = resolve_kinds(["noise:sigma=25", "haze"])
        return read_manifest(synthesize_dataset(clean_dir, specs, tmp_path / "data", seed=0, workers=1))

    def test_batch_shapes(self, entries):
        degraded, clean = BatchStream(entries, 3, 16, seed=0, workers=1).batch_at(0)
        assert degraded.shape == clean.shape == (3, 3, 16, 16)

    def test_batches_depend_only_on_seed_and_step(self, entries):
        a = BatchStream(entries, 2, 16, seed=5, workers=1)
        b = BatchStream(entries, 2, 16, seed=5, workers=3)
        b.batch_at(9)
        for step in (0, 3, 7):
            assert all(torch.equal(u, v) for u, v in zip(a.batch_at(step), b.batch_at(step)))

    def test_tasks_in_manifest_order(self, entries):
        stream = BatchStream(entries, 2, 16, workers=1)
        assert stream.tasks == ["noise_s25", "haze"]
        assert sorted(len(v) for v in stream.by_task.values()) == [4, 4]

    def test_validation_batch_is_center_crop(self, entries):
        degraded, clean = BatchStream(entries, 2, 16, workers=1).validation_batch(count=3)
        assert clean.shape == (3, 3, 16, 16)
        assert torch.equal(clean[0], load_png(entries[0].clean_path)[:, 8:24, 8:24])

    def test_empty_manifest(self):
        with pytest.raises(ConfigurationError):
            BatchStream([], 2, 16)

    @pytest.mark.parametrize("workers", [1, 2])
    def test_loader_matches_batch_at(self, entries, workers):
        stream = BatchStream(entries, 2, 16, seed=4, workers=workers)
        steps = []
        for step, degraded, clean in stream.batches(0, 3):
            expected_degraded, expected_clean = stream.batch_at(step)
            assert torch.equal(degraded, expected_degraded)
            assert torch.equal(clean, expected_clean)
            steps.append(step)
        assert steps == [0, 1, 2]

    def test_loader_resumes_mid_run(self, entries):
        stream = BatchStream(entries, 2, 16, seed=4, workers=1)
        full = list(stream.batches(0, 5))
        tail = list(stream.batches(3, 5))
        assert [s for s, _, _ in tail] == [3, 4]
        for (_, d1, c1), (_, d2, c2) in zip(full[3:], tail):
            assert torch.equal(d1, d2) and torch.equal(c1, c2)


class TestDatasets:

    def test_step_batch_sampler_indices(self):
        sampler = StepBatchSampler(batch_size=2, start=1, stop=3)
        assert len(sampler) == 2
        assert list(sampler) == [[2, 3], [4, 5]]

    def test_step_batch_sampler_empty_range(self):
        assert list(StepBatchSampler(batch_size=4, start=5, stop=5)) == []

    def test_pair_dataset_loads_manifest_entries(self, clean_dir, tmp_path):
        entries = read_manifest(synthesize_dataset(clean_dir, resolve_kinds(["haze"]), tmp_path / "data", workers=1))
        dataset = PairDataset(entries)
        assert len(dataset) == 4
        assert torch.equal(dataset[1].clean, load_png(entries[1].clean_path))
        assert torch.equal(dataset[1].degraded, load_png(entries[1].degraded_path))
