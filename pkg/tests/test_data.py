import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from swinmae.data import (
    BACKGROUND,
    DataError,
    DatasetManifest,
    ImageRecord,
    ManifestEntry,
    ManifestError,
    Modality,
    SplitPolicy,
    generate_synthetic,
    ingest_image,
    ingest_manifest,
    load_manifest,
    make_splits,
    prepare,
    resize_nearest,
    subset_fraction,
    synth_corpus,
    write_manifest,
)


def _write_lines(path, objs):
    path.write_text("\n".join(json.dumps(o) for o in objs) + "\n")
    return path


# -- manifests ---------------------------------------------------------------

def test_load_three_line_manifest(tmp_path):
    m = load_manifest(_write_lines(tmp_path / "m.jsonl", [
        {"id": "a", "path": "a.png", "modality": "MR"},
        {"id": "b", "path": "b.png", "modality": "CT_PET", "class_label": 1},
        {"id": "c", "path": "c.png", "modality": "US"},
    ]))
    assert len(m) == 3 and m.ids == ["a", "b", "c"]
    assert m.entries[0].class_label is None and m.entries[0].mask_path is None
    assert m.entries[1].modality is Modality.CT_PET


def test_duplicate_id_is_named(tmp_path):
    with pytest.raises(ManifestError, match="'a'"):
        load_manifest(_write_lines(tmp_path / "m.jsonl", [
            {"id": "a", "path": "1.png", "modality": "MR"},
            {"id": "a", "path": "2.png", "modality": "MR"},
        ]))


def test_labels_within_class_count(tmp_path):
    objs = [{"id": str(i), "path": "x.png", "modality": "XRAY", "class_label": i} for i in range(3)]
    p = tmp_path / "m.jsonl"
    _write_lines(p, [{"_meta": {"class_count": 3}}] + objs)
    assert load_manifest(p).class_count == 3
    _write_lines(p, [{"_meta": {"class_count": 2}}] + objs)
    with pytest.raises(ManifestError, match="outside"):
        load_manifest(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a", "path": "a.png", "modality": "MR"}\n{not json\n')
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(p)


def test_unknown_key_and_bad_modality(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [{"id": "a", "path": "a.png", "modality": "MR", "colour": 1}])
    with pytest.raises(ManifestError, match="colour"):
        load_manifest(p)
    _write_lines(p, [{"id": "a", "path": "a.png", "modality": "PET"}])
    with pytest.raises(ManifestError, match=":1:"):
        load_manifest(p)


def test_dangling_mask_path(tmp_path):
    p = _write_lines(tmp_path / "m.jsonl", [{"id": "a", "path": "a.png", "modality": "MR", "mask_path": "nope.png"}])
    with pytest.raises(ManifestError, match="nope.png"):
        load_manifest(p)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(tmp_path / "absent.jsonl")


def test_manifest_roundtrip_and_filter(tmp_path):
    m = DatasetManifest([ManifestEntry("a", "a.png", Modality.MR, 1), ManifestEntry("b", "b.png", Modality.US)],
                        class_count=2, target_size=(32, 32))
    write_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.entries == m.entries and back.class_count == 2 and back.target_size == (32, 32)
    assert back.filter("US").ids == ["b"]
    assert back.filter(None).ids == ["a", "b"]


# -- ingestion ---------------------------------------------------------------

def test_constant_image_maps_to_zero():
    out, _ = prepare(np.full((8, 8), 77.0), (16, 16))
    assert out.shape == (16, 16, 1) and np.all(out == 0)


def test_ramp_min_max():
    ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
    out, _ = prepare(ramp, (4, 4))
    assert np.allclose(out[:, :, 0], ramp / 15, atol=1e-7)


def test_mask_mismatch_before_resize():
    with pytest.raises(DataError, match="does not match"):
        prepare(np.zeros((8, 8)), (8, 8), mask=np.zeros((6, 6), int))


def test_nearest_mask_resize_keeps_labels():
    mask = np.array([[0, 1], [2, 3]])
    up = resize_nearest(mask, (4, 4))
    assert np.array_equal(up, np.kron(mask, np.ones((2, 2), int)))
    assert set(np.unique(resize_nearest(np.random.default_rng(0).integers(0, 4, (9, 7)), (5, 13)))) <= {0, 1, 2, 3}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_ingest_idempotent_on_normalized_input(seed):
    x = np.random.default_rng(seed).random((16, 16, 1))
    x = (x - x.min()) / (x.max() - x.min())
    once, _ = prepare(x, (16, 16))
    twice, _ = prepare(once, (16, 16))
    assert np.array_equal(once, twice)


def test_ingest_16bit_png_and_mask(tmp_path):
    px = (np.arange(64, dtype=np.uint16).reshape(8, 8) * 1000)
    Image.fromarray(px).save(tmp_path / "img.png")
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4, 2:4] = 2
    Image.fromarray(mask).save(tmp_path / "mask.png")
    rec = ingest_image(ManifestEntry("x", "img.png", Modality.CT_PET, 0, "mask.png"), (8, 8), tmp_path)
    assert rec.pixels.dtype == np.float32 and rec.pixels.shape == (8, 8, 1)
    assert np.allclose(rec.pixels[:, :, 0], px / px.max(), atol=1e-7)
    assert np.array_equal(rec.seg_mask, mask.astype(np.int64))


def test_ingest_rgb(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (10, 12, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    rec = ingest_image(ManifestEntry("c", "c.png", Modality.COLOR), (8, 8), tmp_path)
    assert rec.pixels.shape == (8, 8, 3)
    assert rec.pixels.min() == 0.0 and rec.pixels.max() == 1.0


def test_ingest_undecodable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="cannot decode"):
        ingest_image(ManifestEntry("b", "bad.png", Modality.MR), (8, 8), tmp_path)


def test_image_record_invariants():
    with pytest.raises(DataError):
        ImageRecord("x", np.full((4, 4, 1), 1.5, np.float32))
    with pytest.raises(DataError):
        ImageRecord("x", np.zeros((4, 4, 1), np.float32), seg_mask=np.zeros((3, 4), np.int64))


# -- splits ------------------------------------------------------------------

def _ids(n):
    return [f"id{i:05d}" for i in range(n)]


def test_kfold_100():
    s = make_splits(_ids(100), seed=0)
    assert s.policy is SplitPolicy.KFOLD_CV and len(s.folds) == 5
    for f in s.folds:
        assert (len(f.train), len(f.val), len(f.test)) == (72, 8, 20)


def test_holdout_5000():
    s = make_splits(_ids(5000), seed=0)
    assert s.policy is SplitPolicy.HOLDOUT and len(s.folds) == 1
    f = s.folds[0]
    assert (len(f.train), len(f.val), len(f.test)) == (3600, 400, 1000)


def test_too_few_entries():
    with pytest.raises(DataError):
        make_splits(_ids(8), seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 300), st.integers(0, 2**32 - 1))
def test_kfold_partition_properties(n, seed):
    ids = _ids(n)
    s = make_splits(ids, seed)
    tested = []
    for f in s.folds:
        parts = [set(f.train), set(f.val), set(f.test)]
        assert sum(map(len, parts)) == n and set().union(*parts) == set(ids)
        tested += f.test
    assert sorted(tested) == ids


@pytest.mark.parametrize("n", [4000, 4001, 4999, 6123])
def test_holdout_proportions(n):
    f = make_splits(_ids(n), seed=1).folds[0]
    assert abs(len(f.test) - 0.2 * n) <= 1 and abs(len(f.val) - 0.08 * n) <= 1
    assert len(f.train) + len(f.val) + len(f.test) == n


def test_split_is_seed_driven():
    assert make_splits(_ids(50), 3) == make_splits(_ids(50), 3)
    assert make_splits(_ids(50), 3) != make_splits(_ids(50), 4)


def test_subset_identity_and_nesting():
    s = make_splits(_ids(125), seed=0)
    assert set(subset_fraction(s, 1.0, 7).folds[0].train) == set(s.folds[0].train)
    a, b, c = (subset_fraction(s, f, 7) for f in (0.1, 0.5, 0.8))
    for k in range(5):
        assert set(a.folds[k].train) <= set(b.folds[k].train) <= set(c.folds[k].train)
        assert a.folds[k].test == s.folds[k].test and a.folds[k].val == s.folds[k].val


def test_subset_sizes_are_ceiled():
    s = make_splits(_ids(1000), 0)
    n = len(s.folds[0].train)
    assert n == 720
    assert len(subset_fraction(s, 0.1, 0).folds[0].train) == 72
    assert len(subset_fraction(s, 0.013, 0).folds[0].train) == 10  # ceil(9.36)


@pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
def test_subset_bad_fraction(f):
    with pytest.raises(ValueError):
        subset_fraction(make_splits(_ids(20), 0), f, 0)


# -- synthetic corpus ------------------------------------------------------------

def test_noiseless_mask_matches_bright_pixels():
    rec = generate_synthetic(1, (64, 64), 3, noise=0.0, seed=5)[0]
    assert rec.seg_mask.any()
    assert np.array_equal(rec.seg_mask > 0, rec.pixels[:, :, 0] > BACKGROUND + 1e-6)
    assert set(np.unique(rec.seg_mask)) == {0, rec.class_label}


def test_label_coverage():
    labels = [r.class_label for r in generate_synthetic(200, (32, 32), 3, 0.05, 0)]
    counts = np.bincount(labels, minlength=4)
    assert counts[0] == 0 and np.all(counts[1:] >= 1)


@pytest.mark.parametrize("k", [1, 6])
def test_synth_class_count_range(k):
    with pytest.raises(ValueError):
        generate_synthetic(4, (32, 32), k)


def _digest(records):
    h = hashlib.sha256()
    for r in records:
        h.update(r.pixels.tobytes())
        h.update(r.seg_mask.tobytes())
    return h.hexdigest()


def test_synth_determinism():
    a = generate_synthetic(20, (32, 32), 4, 0.1, 9)
    assert _digest(a) == _digest(generate_synthetic(20, (32, 32), 4, 0.1, 9))
    assert _digest(a) != _digest(generate_synthetic(20, (32, 32), 4, 0.1, 10))


def test_synth_corpus_on_disk_roundtrip(tmp_path):
    manifest, records = synth_corpus(6, (32, 32), 2, 0.05, 1, out_dir=tmp_path)
    assert manifest.class_count == 3
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert loaded.ids == [r.id for r in records]
    back = ingest_manifest(loaded)
    for a, b in zip(records, back):
        assert np.array_equal(a.seg_mask, b.seg_mask)
        # 16-bit quantization followed by per-image min-max
        want = (a.pixels - a.pixels.min()) / (a.pixels.max() - a.pixels.min())
        assert np.allclose(b.pixels, want, atol=1e-4)
    files = sorted(p.name for p in (tmp_path / "images").iterdir())
    raw = [(tmp_path / "images" / f).read_bytes() for f in files]
    synth_corpus(6, (32, 32), 2, 0.05, 1, out_dir=tmp_path / "again")
    assert raw == [(tmp_path / "again" / "images" / f).read_bytes() for f in files]
