import json
import logging
from dataclasses import fields
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from rdfabric.data import (DatasetError, SampleRecord, SplitConfig, SyntheticClassSpec,
                           SyntheticTextureSpec, build_dg_corpus, export_index, extract_patches,
                           generate_synthetic, load_image, load_mask, read_index,
                           scan_mvtec_layout, split_train_val, tile_image, write_synthetic_class)
from rdfabric.teacher import IMAGENET_MEAN, IMAGENET_STD

# per-class (train, test good, test defective) counts of the industrial textile dataset
ITD = {
    "type1cam1": (272, 28, 86),
    "type2cam2": (199, 19, 39),
    "type3cam1": (588, 54, 47),
    "type4cam2": (199, 19, 11),
    "type5cam2": (199, 19, 80),
    "type6cam2": (199, 19, 73),
}


def touch_images(folder: Path, n: int, prefix=""):
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        (folder / f"{prefix}{i:04d}.png").write_bytes(b"")


def make_class(root, name, n_train, n_good, n_def, masks=True, defect="hole"):
    base = Path(root) / name
    touch_images(base / "train" / "good", n_train)
    touch_images(base / "test" / "good", n_good)
    touch_images(base / "test" / defect, n_def)
    if masks:
        gt = base / "ground_truth" / defect
        gt.mkdir(parents=True, exist_ok=True)
        for i in range(n_def):
            (gt / f"{i:04d}_mask.png").write_bytes(b"")
    return base


def test_scan_small_fixture(tmp_path):
    base = make_class(tmp_path, "fab", 5, 2, 3)
    records = scan_mvtec_layout(tmp_path, "fab")
    listed = sum(len(list(d.iterdir())) for d in
                 [base / "train" / "good", base / "test" / "good", base / "test" / "hole"])
    assert len(records) == listed == 10
    assert sum(1 for r in records if r.mask_path) == 3
    defective = [r for r in records if r.is_defective]
    assert {r.defect_type for r in defective} == {"hole"}
    assert all(Path(r.mask_path).name == Path(r.image_path).stem + "_mask.png" for r in defective)


def test_scan_train_only(tmp_path):
    make_class(tmp_path, "fab", 7, 0, 0, masks=False)
    records = scan_mvtec_layout(tmp_path, "fab")
    assert len(records) == 7 and all(r.split == "train" for r in records)


def test_scan_missing_train_folder(tmp_path):
    (tmp_path / "fab" / "test" / "good").mkdir(parents=True)
    with pytest.raises(DatasetError):
        scan_mvtec_layout(tmp_path, "fab")


def test_scan_missing_mask_warns(tmp_path, caplog):
    make_class(tmp_path, "fab", 2, 1, 2, masks=False)
    with caplog.at_level(logging.WARNING):
        records = scan_mvtec_layout(tmp_path, "fab")
    defective = [r for r in records if r.is_defective]
    assert len(defective) == 2 and all(r.mask_path is None for r in defective)
    assert "no ground-truth mask" in caplog.text


def test_scan_alternate_mask_suffix(tmp_path):
    base = make_class(tmp_path, "fab", 1, 0, 1, masks=False)
    gt = base / "ground_truth" / "hole"
    gt.mkdir(parents=True)
    (gt / "0000_gt.png").write_bytes(b"")
    rec = [r for r in scan_mvtec_layout(tmp_path, "fab", mask_suffix="_gt") if r.is_defective][0]
    assert rec.mask_path.endswith("0000_gt.png")


def test_scan_itd_class_counts(tmp_path):
    make_class(tmp_path, "type1cam1", *ITD["type1cam1"])
    records = scan_mvtec_layout(tmp_path, "type1cam1")
    assert sum(r.split == "train" for r in records) == 272
    assert sum(r.split == "test" and not r.is_defective for r in records) == 28
    assert sum(r.is_defective for r in records) == 86


def test_dg_corpus_itd_total(tmp_path):
    for name, counts in ITD.items():
        make_class(tmp_path, name, *counts)
    pooled = build_dg_corpus([(str(tmp_path), name) for name in ITD])
    assert len(pooled) == 1656
    assert all(r.split == "train" for r in pooled)


def test_dg_corpus_synthetic_and_errors(tmp_path):
    make_class(tmp_path, "a", 50, 1, 1)
    make_class(tmp_path, "b", 50, 1, 1)
    pooled = build_dg_corpus([(tmp_path, "a"), (tmp_path, "b")])
    assert len(pooled) == 100
    assert sum(r.class_name == "a" for r in pooled) == 50
    with pytest.raises(DatasetError):
        build_dg_corpus([(tmp_path, "a"), (tmp_path, "a")])
    with pytest.raises(DatasetError):
        build_dg_corpus([(tmp_path, "a")])


def test_index_roundtrip(tmp_path):
    make_class(tmp_path, "fab", 3, 1, 2)
    records = scan_mvtec_layout(tmp_path, "fab")
    export_index(records, tmp_path / "index.jsonl")
    lines = (tmp_path / "index.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {f.name for f in fields(SampleRecord)}
    assert read_index(tmp_path / "index.jsonl") == records


def test_record_invariants():
    with pytest.raises(ValueError):
        SampleRecord("x.png", "c", "train", "defective")
    with pytest.raises(ValueError):
        SampleRecord("x.png", "c", "test", "good", mask_path="m.png")


# --- tiling -----------------------------------------------------------------

@pytest.mark.parametrize("w,h,n,rows,cols", [
    (4096, 256, 16, 1, 16),
    (3088, 2076, 96, 8, 12),
    (256, 256, 1, 1, 1),
])
def test_patch_counts(w, h, n, rows, cols):
    grid = extract_patches(w, h, 256)
    assert len(grid) == n and (grid.rows, grid.cols) == (rows, cols)
    assert grid.offsets[0] == (0, 0)


def test_patch_too_small():
    with pytest.raises(ValueError):
        extract_patches(255, 1000, 256)


@settings(max_examples=100, deadline=None)
@given(st.integers(8, 700), st.integers(8, 700), st.integers(8, 200))
def test_tiling_properties(w, h, p):
    if w < p or h < p:
        with pytest.raises(ValueError):
            extract_patches(w, h, p)
        return
    grid = extract_patches(w, h, p)
    cover = np.zeros((h, w), dtype=int)
    for x, y in grid.offsets:
        assert x % p == 0 and y % p == 0
        assert x + p <= w and y + p <= h
        cover[y:y + p, x:x + p] += 1
    assert cover.max() == 1
    assert cover.sum() == grid.rows * grid.cols * p * p


def test_tile_image_contents():
    img = np.arange(600 * 520 * 3, dtype=np.float32).reshape(520, 600, 3)
    grid = extract_patches(600, 520, 256)
    patches = tile_image(img, grid)
    assert patches.shape == (4, 256, 256, 3)
    np.testing.assert_array_equal(patches[3], img[256:512, 256:512])


# --- splitting ----------------------------------------------------------------

def train_records(n):
    return [SampleRecord(f"{i}.png", "c", "train", "good") for i in range(n)]


def test_split_sizes():
    a, b = split_train_val(train_records(1000), SplitConfig(0.7))
    assert (len(a), len(b)) == (700, 300)
    a, b = split_train_val(train_records(3), SplitConfig(0.7))
    assert (len(a), len(b)) == (2, 1)


def test_split_deterministic_and_disjoint():
    recs = train_records(10)
    first = split_train_val(recs, SplitConfig(0.7, seed=5))
    second = split_train_val(recs, SplitConfig(0.7, seed=5))
    assert first == second
    assert not {r.image_path for r in first[0]} & {r.image_path for r in first[1]}
    assert len(first[0]) + len(first[1]) == 10


def test_split_edge_cases(caplog):
    with pytest.raises(DatasetError):
        split_train_val([], SplitConfig())
    with caplog.at_level(logging.WARNING):
        a, b = split_train_val(train_records(1), SplitConfig())
    assert len(a) == 1 and b == [] and "single training sample" in caplog.text
    with pytest.raises(ValueError):
        SplitConfig(train_fraction=0.0)


# --- image loading --------------------------------------------------------------

def test_load_image_resizes(tmp_path):
    path = tmp_path / "big.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (512, 512, 3), dtype=np.uint8)).save(path)
    assert load_image(str(path), 256).shape == (256, 256, 3)


def test_load_white_image_normalization(tmp_path):
    path = tmp_path / "white.png"
    Image.fromarray(np.full((300, 300, 3), 255, dtype=np.uint8)).save(path)
    img = load_image(SampleRecord(str(path), "c", "train", "good"), 256)
    expected = (1.0 - np.asarray(IMAGENET_MEAN)) / np.asarray(IMAGENET_STD)
    np.testing.assert_allclose(img, np.broadcast_to(expected, img.shape), rtol=1e-6)


def test_load_grayscale_replicates_channels(tmp_path):
    path = tmp_path / "gray.png"
    gray = np.random.default_rng(1).integers(0, 255, (256, 256), dtype=np.uint8)
    Image.fromarray(gray).save(path)
    img = load_image(str(path), 256, mean=(0, 0, 0), std=(1, 1, 1))
    np.testing.assert_allclose(img[..., 0], gray / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(img[..., 0], img[..., 1])
    np.testing.assert_array_equal(img[..., 0], img[..., 2])


def test_load_unreadable(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="broken.png"):
        load_image(str(path))


def test_load_mask(tmp_path):
    m = np.zeros((64, 64), dtype=np.uint8)
    m[10:20, 5:9] = 255
    Image.fromarray(m).save(tmp_path / "m.png")
    out = load_mask(str(tmp_path / "m.png"), 64)
    assert out.sum() == 40
    assert load_mask(None, 32).sum() == 0


# --- synthetic textures ----------------------------------------------------------

def test_synthetic_no_defect_has_empty_mask():
    _, mask = generate_synthetic(SyntheticTextureSpec(pattern="stripes", defect="none"), seed=3)
    assert mask.sum() == 0


def test_synthetic_rectangle_area():
    spec = SyntheticTextureSpec(pattern="stripes", defect="rectangle", defect_size=(20, 20))
    _, mask = generate_synthetic(spec, seed=3)
    assert mask.sum() == 400


def test_synthetic_deterministic():
    spec = SyntheticTextureSpec(pattern="checker", defect="blob")
    a = generate_synthetic(spec, seed=9)
    b = generate_synthetic(spec, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_synthetic_size_precondition():
    with pytest.raises(ValueError):
        SyntheticTextureSpec(size=32)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["plain", "stripes", "checker"]),
       st.sampled_from(["rectangle", "blob", "line_cut"]),
       st.floats(0.01, 0.9), st.integers(0, 2 ** 31 - 1))
def test_synthetic_differs_from_twin_exactly_on_mask(pattern, defect, magnitude, seed):
    spec = SyntheticTextureSpec(pattern=pattern, defect=defect, defect_magnitude=magnitude, size=64)
    image, mask, clean = generate_synthetic(spec, seed, return_clean=True)
    differs = (image != clean).any(axis=-1)
    assert mask.sum() > 0
    assert np.array_equal(differs, mask.astype(bool))


def test_write_synthetic_class_layout(tmp_path):
    spec = SyntheticClassSpec("syn", SyntheticTextureSpec(size=64), n_train=4, n_test_good=2,
                              n_test_defective=3, defect="rectangle")
    write_synthetic_class(tmp_path, spec)
    records = scan_mvtec_layout(tmp_path, "syn")
    assert len(records) == 9
    masks = [load_mask(r.mask_path, 64) for r in records if r.is_defective]
    assert len(masks) == 3 and all(m.sum() > 0 for m in masks)
