import os

import numpy as np
import pytest

from cfsl.data import (DataError, Dataset, DataSplits, SynthSpec, class_parts, export_folder,
                       generate_synthetic, load_folder, read_pnm, write_pnm)


def test_default_spec_values():
    s = SynthSpec()
    assert (s.n_parts, s.parts_per_class, s.n_known, s.n_novel, s.images_per_class, s.image_size) == \
        (12, 3, 20, 10, 50, 32)


def test_noise_free_images_identical_within_class():
    spec = SynthSpec(n_known=3, n_novel=2, images_per_class=5, heldout_per_class=1, noise_std=0,
                     jitter=0, intensity_jitter=0, clutter=0)
    d = generate_synthetic(spec)
    imgs = d.known_train.images[d.known_train.labels == 0]
    assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_splits_and_disjointness(tiny_splits):
    d = tiny_splits
    assert len(d.known_train) == 6 * 16 and len(d.known_heldout) == 6 * 4 and len(d.novel) == 5 * 20
    assert not set(d.known_train.class_names) & set(d.novel.class_names)
    assert d.known_train.images.min() >= 0 and d.known_train.images.max() <= 1


def test_novel_parts_are_seen(tiny_splits):
    parts = class_parts(tiny_splits)
    seen = set().union(*(parts[c] for c in tiny_splits.known_train.class_names))
    for c in tiny_splits.novel.class_names:
        assert set(parts[c]) <= seen
    combos = [tuple(sorted(v)) for v in parts.values()]
    assert len(set(combos)) == len(combos)


def test_seed_determinism():
    spec = SynthSpec(n_known=3, n_novel=2, images_per_class=6, heldout_per_class=2, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    c = generate_synthetic(SynthSpec(n_known=3, n_novel=2, images_per_class=6, heldout_per_class=2, seed=5))
    assert a.known_train.images.tobytes() == b.known_train.images.tobytes()
    assert a.known_train.images.tobytes() != c.known_train.images.tobytes()


def test_combination_space_exhausted():
    with pytest.raises(DataError, match="combinations"):
        generate_synthetic(SynthSpec(n_parts=4, parts_per_class=2, n_known=5, n_novel=2))


def test_n_novel_zero_gives_empty_split():
    d = generate_synthetic(SynthSpec(n_known=3, n_novel=0, images_per_class=4, heldout_per_class=1))
    assert len(d.novel) == 0


def test_known_novel_overlap_rejected():
    ds = Dataset(np.zeros((1, 4, 4, 1)), [0], ["a"], "known_train")
    with pytest.raises(DataError, match="both"):
        DataSplits(ds, Dataset(np.zeros((0, 4, 4, 1)), [], [], "known_heldout"),
                   Dataset(np.zeros((1, 4, 4, 1)), [0], ["a"], "novel"))


# -- files ----------------------------------------------------------------------

def test_roundtrip_is_exact(tmp_path, tiny_splits):
    export_folder(tiny_splits, tmp_path)
    back = load_folder(tmp_path)
    for a, b in zip(tiny_splits, back):
        assert a.class_names == b.class_names
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.images, b.images)
    assert back.manifest["spec.n_known"] == "6"
    assert sorted(os.listdir(tmp_path / "novel")) == tiny_splits.novel.class_names


def test_pixel_roundtrip_within_quantization(tmp_path, rng):
    img = rng.random((5, 7, 3))
    write_pnm(tmp_path / "a.ppm", img)
    back = read_pnm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pnm_with_comments(tmp_path):
    (tmp_path / "c.pgm").write_text("P2\n# hi\n2 1\n# max\n255\n0 255\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm")[:, :, 0], [[0.0, 1.0]])


def test_bad_file_names_file(tmp_path):
    root = tmp_path / "d" / "known_train" / "cls"
    root.mkdir(parents=True)
    (root / "bad.pgm").write_text("P5 nonsense")
    with pytest.raises(DataError, match="bad.pgm"):
        load_folder(tmp_path / "d")


def test_inconsistent_sizes_rejected(tmp_path):
    root = tmp_path / "known_train" / "c"
    root.mkdir(parents=True)
    write_pnm(root / "a.pgm", np.zeros((4, 4)))
    write_pnm(root / "b.pgm", np.zeros((4, 5)))
    with pytest.raises(DataError, match="b.pgm"):
        load_folder(tmp_path)


def test_single_image_and_empty_novel(tmp_path):
    (tmp_path / "known_train" / "only").mkdir(parents=True)
    (tmp_path / "novel").mkdir()
    write_pnm(tmp_path / "known_train" / "only" / "0000.pgm", np.ones((4, 4)))
    d = load_folder(tmp_path)
    assert len(d.known_train) == 1 and len(d.novel) == 0


def test_missing_root(tmp_path):
    with pytest.raises(DataError):
        load_folder(tmp_path / "nope")
