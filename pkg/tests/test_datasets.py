import numpy as np
import pytest

from scenedecomp.datasets import (
    BLOCK,
    HEADER,
    TETRIS_COLORS,
    DatasetError,
    GeneratorSpec,
    ambiguous_tetris_fixture,
    generate_multi_dsprites,
    generate_shapes,
    generate_tetris,
    images_as_float,
    load_arrays,
    load_dataset,
    read_header,
    rerender,
    save_dataset,
    tetromino_variants,
)

import oracles

KIND_GENERATORS = {
    "tetris": lambda n, seed, **kw: generate_tetris(n, seed, **kw),
    "multi-dsprites": lambda n, seed, **kw: generate_multi_dsprites(n, seed, **kw),
    "multi-dsprites-bin": lambda n, seed, **kw: generate_multi_dsprites(n, seed, binarized=True, **kw),
    "shapes": lambda n, seed, **kw: generate_shapes(n, seed, **kw),
}


def check_partition(rec):
    """Object masks are disjoint and, with the background, cover every pixel once."""
    layers = np.concatenate([rec.masks, rec.background_mask[None]]) > 0
    assert set(np.unique(rec.masks)) <= {0, 255}
    assert np.all(layers.sum(axis=0) == 1)
    assert not rec.masks[rec.object_count :].any()


# ------------------------------------------------------------------ tetris


def test_variant_enumeration_matches_brute_force():
    variants = tetromino_variants()
    brute = oracles.polyomino_variants(4)
    assert len(brute) == 19
    assert {frozenset(v) for v in variants} == brute
    assert len(variants) == 19


def test_tetris_records():
    header, records = generate_tetris(60, seed=3, canvas=20, pieces=2)
    assert (header.height, header.width, header.channels, header.max_objects) == (20, 20, 3, 2)
    palette = {tuple(c) for c in TETRIS_COLORS}
    variants = {frozenset(v) for v in tetromino_variants()}
    for rec in records:
        check_partition(rec)
        fg = rec.image.any(axis=-1)
        assert fg.sum() == 2 * 100
        assert np.array_equal(fg, rec.background_mask == 0)
        assert {tuple(p) for p in rec.image[fg]} <= palette
        for mask in rec.masks > 0:
            # blocks on the 5 px lattice, fully on or off, forming a tetromino
            blocks = mask.reshape(4, BLOCK, 4, BLOCK)
            per_block = blocks.sum(axis=(1, 3))
            assert set(np.unique(per_block)) <= {0, BLOCK * BLOCK}
            cells = {(int(r), int(c)) for r, c in zip(*np.nonzero(per_block))}
            r0, c0 = min(r for r, _ in cells), min(c for _, c in cells)
            assert frozenset((r - r0, c - c0) for r, c in cells) in variants


def test_tetris_default_canvas_counts():
    _, records = generate_tetris(5, seed=0)
    for rec in records:
        assert rec.image.shape == (35, 35, 3)
        assert rec.image.any(axis=-1).sum() == 300


def test_tetris_canvas_too_small():
    with pytest.raises(ValueError):
        generate_tetris(1, seed=0, canvas=15, pieces=1)


def test_unknown_kind():
    with pytest.raises(ValueError):
        GeneratorSpec("clevr").header(1, 0)


def test_ambiguous_fixture_is_one_colour_bar():
    rec = ambiguous_tetris_fixture(20)
    check_partition(rec)
    fg = rec.image.any(axis=-1)
    rows, cols = np.nonzero(fg)
    assert fg.sum() == 200
    assert rows.max() - rows.min() + 1 == 2 * BLOCK and cols.max() - cols.min() + 1 == 4 * BLOCK
    assert len({tuple(p) for p in rec.image[fg]}) == 1


# ----------------------------------------------------------------- sprites


def test_multi_dsprites():
    _, records = generate_multi_dsprites(40, seed=4)
    counts = {r.object_count for r in records}
    assert counts <= {2, 3, 4, 5} and len(counts) > 1
    for rec in records:
        check_partition(rec)
        bg = rec.image[rec.background_mask > 0]
        assert np.all(bg[:, 0] == bg[:, 1]) and np.all(bg[:, 1] == bg[:, 2])
        assert 32 <= bg[0, 0] <= 224


def test_multi_dsprites_binarized():
    _, records = generate_multi_dsprites(40, seed=5, binarized=True)
    for rec in records:
        check_partition(rec)
        assert 2 <= rec.object_count <= 3
        assert set(np.unique(rec.image)) <= {0, 255}


def test_later_sprites_occlude_earlier_ones():
    _, records = generate_multi_dsprites(40, seed=6)
    from scenedecomp.datasets import sprite_mask

    occluded = 0
    for rec in records:
        for i in range(rec.object_count):
            shape, _, x, y, scale, angle = (int(v) for v in rec.factors[i])
            full = sprite_mask(shape, x, y, scale, angle, 64, 64)
            visible = rec.masks[i] > 0
            assert np.all(full[visible])
            later = np.zeros_like(full)
            for j in range(i + 1, rec.object_count):
                s, _, xx, yy, sc, an = (int(v) for v in rec.factors[j])
                later |= sprite_mask(s, xx, yy, sc, an, 64, 64)
            assert np.array_equal(visible, full & ~later)
            occluded += int((full & later).any())
    assert occluded > 0


def test_shapes():
    header, records = generate_shapes(40, seed=7)
    assert header.channels == 1
    for rec in records:
        check_partition(rec)
        assert rec.object_count == 3
        assert rec.image.shape == (28, 28, 1)
        assert set(np.unique(rec.image)) <= {0, 255}


@pytest.mark.parametrize("kind", sorted(KIND_GENERATORS))
def test_rerender_from_factors_is_bitwise(kind):
    _, records = KIND_GENERATORS[kind](20, 8)
    for rec in records:
        image, masks = rerender(rec, kind)
        assert np.array_equal(image, rec.image)
        assert np.array_equal(masks, rec.masks)


# ------------------------------------------------------------- determinism


@pytest.mark.parametrize("kind", sorted(KIND_GENERATORS))
def test_fixed_seed_is_reproducible(kind):
    _, a = KIND_GENERATORS[kind](10, 11)
    _, b = KIND_GENERATORS[kind](10, 11)
    assert a == b
    _, c = KIND_GENERATORS[kind](10, 12)
    assert a != c


def test_records_do_not_depend_on_order_or_count():
    _, full = generate_tetris(30, seed=9, canvas=20, pieces=2)
    spec = GeneratorSpec("tetris", 20, 2)
    assert spec.make(9, 17) == full[17]
    _, short = generate_tetris(5, seed=9, canvas=20, pieces=2)
    assert short == full[:5]


def test_parallel_matches_serial(tmp_path):
    h1, serial = generate_tetris(128, seed=10, canvas=20, pieces=2, workers=1)
    h2, parallel = generate_tetris(128, seed=10, canvas=20, pieces=2, workers=2)
    assert serial == parallel
    assert save_dataset(tmp_path / "a.bin", h1, serial) == save_dataset(tmp_path / "b.bin", h2, parallel)


# -------------------------------------------------------------------- file


def test_round_trip(tmp_path):
    header, records = generate_multi_dsprites(12, seed=12)
    path = tmp_path / "d.bin"
    digest = save_dataset(path, header, records)
    assert len(digest) == 64
    assert read_header(path) == header
    loaded = list(load_dataset(path))
    assert len(loaded) == header.record_count
    assert loaded == records
    resaved = tmp_path / "e.bin"
    save_dataset(resaved, read_header(path), loaded)
    assert resaved.read_bytes() == path.read_bytes()
    _, arrays = load_arrays(path)
    assert np.array_equal(arrays["image"], np.stack([r.image for r in records]))
    x = images_as_float(arrays)
    assert x.shape == (12, 3, 64, 64) and x.dtype == np.float32 and x.max() <= 1.0


def test_header_layout(tmp_path):
    header, records = generate_tetris(2, seed=1, canvas=20, pieces=2)
    path = tmp_path / "d.bin"
    save_dataset(path, header, records)
    raw = path.read_bytes()
    assert raw[:4] == b"MOBD"
    assert HEADER.size == 4 + 4 + 1 + 2 + 2 + 2 + 1 + 8 + 8
    assert len(raw) == HEADER.size + 2 * (20 * 20 * 3 + 1 + 2 * 20 * 20 + 20 * 20 + 2 * 6 * 2)


def test_truncated_file_names_offset(tmp_path):
    header, records = generate_tetris(3, seed=1, canvas=20, pieces=2)
    path = tmp_path / "d.bin"
    save_dataset(path, header, records)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="byte offset"):
        list(load_dataset(path))
    with pytest.raises(DatasetError, match="byte offset"):
        load_arrays(path)


def test_bad_magic_and_trailing_bytes(tmp_path):
    header, records = generate_tetris(1, seed=1, canvas=20, pieces=2)
    path = tmp_path / "d.bin"
    save_dataset(path, header, records)
    good = path.read_bytes()
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(DatasetError, match="magic"):
        list(load_dataset(path))
    path.write_bytes(good + b"\0")
    with pytest.raises(DatasetError):
        list(load_dataset(path))
    with pytest.raises(DatasetError):
        load_arrays(path)


def test_save_rejects_count_mismatch(tmp_path):
    header, records = generate_tetris(2, seed=1, canvas=20, pieces=2)
    with pytest.raises(DatasetError):
        save_dataset(tmp_path / "d.bin", header, records[:1])
    assert not (tmp_path / "d.bin").exists()
