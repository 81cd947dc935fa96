import hashlib

import numpy as np
import pytest
from PIL import Image

from semifss.dataset import (
    SHAPE_FAMILIES,
    STYLES,
    class_names,
    generate_shapes_dataset,
    load_class_dataset,
    load_image_pool,
    rasterize_shape,
    render_sample,
    split_classes,
)
from semifss.errors import (
    CorruptImage,
    DegenerateSplit,
    EmptyClass,
    MissingMask,
    UnsupportedClassCount,
)


def _write_pair(directory, stem, size=(40, 40), with_mask=True, rng=None):
    rng = rng or np.random.default_rng(0)
    directory.mkdir(parents=True, exist_ok=True)
    img = (rng.uniform(size=size + (3,)) * 255).astype(np.uint8)
    Image.fromarray(img).save(directory / f"{stem}.png")
    if with_mask:
        m = np.zeros(size, np.uint8)
        m[5:20, 8:30] = 255
        Image.fromarray(m).save(directory / f"{stem}_mask.png")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_load_two_classes(tmp_path):
    for c in ("c0", "c1"):
        for j in range(3):
            _write_pair(tmp_path / c, f"{j}")
    ds = load_class_dataset(tmp_path, (32, 32))
    assert ds.classes == ("c0", "c1")
    assert all(ds.n_entries(c) == 3 for c in ds.classes)
    assert ds.image_size == (32, 32)
    assert ds.image("c0", 0).shape == (32, 32, 3)
    assert ds.image("c0", 0).dtype == np.float32
    assert 0.0 <= ds.images["c0"].min() and ds.images["c0"].max() <= 1.0
    assert set(np.unique(ds.masks["c1"])) <= {0, 1}


def test_missing_mask_names_stem(tmp_path):
    _write_pair(tmp_path / "c0", "a")
    _write_pair(tmp_path / "c0", "lonely", with_mask=False)
    with pytest.raises(MissingMask, match="lonely"):
        load_class_dataset(tmp_path, (32, 32))


def test_empty_class(tmp_path):
    _write_pair(tmp_path / "c0", "a")
    (tmp_path / "c1").mkdir()
    with pytest.raises(EmptyClass):
        load_class_dataset(tmp_path, (32, 32))


def test_corrupt_image(tmp_path):
    _write_pair(tmp_path / "c0", "a")
    (tmp_path / "c0" / "b.png").write_bytes(b"definitely not a png")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "c0" / "b_mask.png")
    with pytest.raises(CorruptImage):
        load_class_dataset(tmp_path, (32, 32))


def test_masks_stay_binary_after_resize(tmp_path):
    d = tmp_path / "c0"
    d.mkdir()
    Image.fromarray((np.random.default_rng(1).uniform(size=(37, 53, 3)) * 255).astype(np.uint8)).save(d / "x.png")
    # anti-aliased mask with intermediate grey levels
    m = np.zeros((37, 53), np.uint8)
    m[10:30, 10:40] = 255
    m[9, 10:40] = 128
    Image.fromarray(m).save(d / "x_mask.png")
    ds = load_class_dataset(tmp_path, (24, 24))
    assert set(np.unique(ds.mask("c0", 0))) == {0, 1}


def test_generator_round_trip(tmp_path):
    ds = generate_shapes_dataset(12, 10, (64, 64), seed=7, out_root=tmp_path / "a")
    assert len(ds.classes) == 12 and len(ds) == 120
    assert len(list((tmp_path / "a").rglob("*_mask.png"))) == 120
    again = load_class_dataset(tmp_path / "a", (64, 64))
    assert again.classes == ds.classes
    for c in ds.classes:
        np.testing.assert_array_equal(again.masks[c], ds.masks[c])
    generate_shapes_dataset(12, 10, (64, 64), seed=7, out_root=tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_generator_seed_changes_images(tmp_path):
    generate_shapes_dataset(3, 2, (32, 32), seed=1, out_root=tmp_path / "a")
    generate_shapes_dataset(3, 2, (32, 32), seed=2, out_root=tmp_path / "b")
    a = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*.png")}
    b = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*.png")}
    assert a.keys() == b.keys()
    assert all(a[k] != b[k] for k in a if not k.stem.endswith("_mask"))


def test_generated_masks_are_exact_shape_support(shapes):
    for c in shapes.classes:
        assert shapes.masks[c].reshape(shapes.n_entries(c), -1).any(axis=1).all()
    # conftest corpus uses seed 3; re-render class 2, sample 4
    name = class_names(6)[2]
    image, mask = render_sample(2, (32, 32), np.random.default_rng([3, 2, 4]))
    np.testing.assert_array_equal(shapes.mask(name, 4), mask)
    np.testing.assert_allclose(shapes.image(name, 4), np.round(image * 255) / 255, atol=1e-6)


def test_rasterize_disk_matches_brute_force():
    size, cy, cx, r = (20, 20), 9.3, 10.1, 5.5
    got = rasterize_shape("disk", size, cy, cx, r, 0.0)
    for y in range(20):
        for x in range(20):
            assert got[y, x] == ((y + 0.5 - cy) ** 2 + (x + 0.5 - cx) ** 2 <= r * r)


@pytest.mark.parametrize("family", SHAPE_FAMILIES)
def test_every_family_rasterizes(family):
    m = rasterize_shape(family, (32, 32), 16, 16, 9, 0.3)
    assert 0 < m.sum() < 32 * 32


def test_unsupported_class_count(tmp_path):
    with pytest.raises(UnsupportedClassCount):
        generate_shapes_dataset(len(SHAPE_FAMILIES) * len(STYLES) + 1, 2, (16, 16), 0, tmp_path)


def test_split_twelve_classes(shapes_root, tmp_path):
    ds = generate_shapes_dataset(12, 2, (16, 16), 0, tmp_path)
    s = split_classes(ds, 1 / 3, seed=0)
    assert len(s.train_classes) == 8 and len(s.test_classes) == 4
    assert not (s.train_classes & s.test_classes)
    assert s.train_classes | s.test_classes == set(ds.classes)
    assert split_classes(ds, 1 / 3, seed=0) == s


def test_split_boundary_rule(tmp_path):
    ds = generate_shapes_dataset(2, 2, (16, 16), 0, tmp_path)
    s = split_classes(ds, 0.99, seed=5)
    assert len(s.train_classes) == 1 and len(s.test_classes) == 1


def test_split_degenerate(tmp_path):
    for j in range(2):
        _write_pair(tmp_path / "only", str(j))
    ds = load_class_dataset(tmp_path, (16, 16))
    with pytest.raises(DegenerateSplit):
        split_classes(ds, 0.5, 0)
    with pytest.raises(ValueError):
        split_classes(ds, 1.0, 0)


def test_image_pool_skips_masks(shapes_root):
    pool = load_image_pool(shapes_root, (32, 32))
    assert len(pool) == 6 * 7
    assert pool[0].shape == (32, 32, 3)
