import filecmp

import numpy as np
import pytest

from cmpnet.data import (
    MANIFEST,
    DatasetManifest,
    class_motifs,
    generate_dataset,
    load_dataset,
    nearest_centroid_accuracy,
    nuisance_vs_motif_mse,
)
from cmpnet.errors import FormatError
from cmpnet.tensor import load_tensor


def dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, seed=4, num_classes=3, per_class_train=4, per_class_test=2, size=16)
    generate_dataset(b, seed=4, num_classes=3, per_class_train=4, per_class_test=2, size=16)
    assert dir_bytes(a) == dir_bytes(b)
    c = tmp_path / "c"
    generate_dataset(c, seed=5, num_classes=3, per_class_train=4, per_class_test=2, size=16)
    assert dir_bytes(a)["train/00000.cmpt"] != dir_bytes(c)["train/00000.cmpt"]


def test_default_counts(default_data_dir, default_data):
    m = DatasetManifest.parse((default_data_dir / MANIFEST).read_text())
    splits = [s[2] for s in m.samples]
    assert splits.count("train") == 512 and splits.count("test") == 128
    assert default_data.x_train.shape == (512, 3, 32, 32)
    assert default_data.x_test.shape == (128, 3, 32, 32)
    assert np.array_equal(np.bincount(default_data.y_train), [64] * 8)
    assert np.array_equal(np.bincount(default_data.y_test), [16] * 8)
    train_files = {s[0] for s in m.samples if s[2] == "train"}
    test_files = {s[0] for s in m.samples if s[2] == "test"}
    assert not train_files & test_files


def test_pixel_range(default_data):
    assert default_data.x_train.min() >= 0 and default_data.x_train.max() <= 1


def test_mean_image_oracle(default_data_dir, default_data):
    # independent averaging: straight from the files, in sorted-name order
    acc = np.zeros((3, 32, 32))
    files = sorted((default_data_dir / "train").glob("*.cmpt"))
    for f in files:
        acc += load_tensor(f)
    assert np.max(np.abs(acc / len(files) - default_data.mean)) < 1e-12


def test_round_trip_bitwise(default_data_dir, default_data):
    m = DatasetManifest.parse((default_data_dir / MANIFEST).read_text())
    train = [s for s in m.samples if s[2] == "train"]
    for i in (0, 17, 511):
        assert load_tensor(default_data_dir / train[i][0]).tobytes() == default_data.x_train[i].tobytes()
        assert train[i][1] == default_data.y_train[i]


def test_manifest_text_format(small_data_dir):
    text = (small_data_dir / MANIFEST).read_text(encoding="utf-8")
    head, _, body = text.partition("\n\n")
    assert "num_classes=4" in head.splitlines()
    assert "mean_image_file=mean.cmpt" in head.splitlines()
    first = body.splitlines()[0].split("\t")
    assert first == ["train/00000.cmpt", "0", "train"]
    assert "\r" not in text


def copy_dataset(src, dst):
    import shutil

    shutil.copytree(src, dst)
    return dst


def test_missing_file_is_format_error(small_data_dir, tmp_path):
    d = copy_dataset(small_data_dir, tmp_path / "d")
    (d / "test" / "00001.cmpt").unlink()
    with pytest.raises(FormatError, match="00001.cmpt"):
        load_dataset(d)


def test_label_out_of_range(small_data_dir, tmp_path):
    d = copy_dataset(small_data_dir, tmp_path / "d")
    path = d / MANIFEST
    text = path.read_text().replace("train/00002.cmpt\t2\t", "train/00002.cmpt\t255\t")
    path.write_text(text)
    with pytest.raises(FormatError, match="label 255"):
        load_dataset(d)


def test_corrupt_blob(small_data_dir, tmp_path):
    d = copy_dataset(small_data_dir, tmp_path / "d")
    blob = d / "train" / "00003.cmpt"
    blob.write_bytes(blob.read_bytes()[:50])
    with pytest.raises(FormatError, match="00003.cmpt"):
        load_dataset(d)


def test_bad_manifest_header(small_data_dir, tmp_path):
    d = copy_dataset(small_data_dir, tmp_path / "d")
    path = d / MANIFEST
    path.write_text("bogus=1\n" + path.read_text())
    with pytest.raises(FormatError, match="bogus"):
        load_dataset(d)


def test_generate_argument_checks(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(tmp_path / "x", num_classes=1)
    with pytest.raises(ValueError):
        generate_dataset(tmp_path / "x", size=8)


def test_class_motifs_distinct():
    combos = [class_motifs(c) for c in range(16)]
    assert len(set(combos)) == 16


def test_nuisance_dominates_motif_difference():
    within, between = nuisance_vs_motif_mse(seed=1, num_classes=8)
    assert within > between > 0


def test_nearest_centroid_is_weak(default_data):
    assert nearest_centroid_accuracy(default_data) < 0.60
