import hashlib

import numpy as np
import pytest

from tests.synth import make_dataset, write_tree
from vce.data import (BACKGROUND_ALPHABETS, EVALUATION_ALPHABETS, CacheError,
                      CharacterClass, Episode, GlyphDataset, GlyphImage,
                      IngestError, SamplingError, SplitError, area_resize,
                      episode_arrays, ingest, load_cache, preprocess,
                      sample_episode, save_cache, split_dataset)
from vce.images import write_png_gray


def nearest_row(src_row: int, n_in: int, n_out: int) -> int:
    """Oracle: nearest-neighbor downscale row mapping."""
    return min(int((src_row + 0.5) * n_out / n_in), n_out - 1)


class TestPreprocess:
    def test_all_background_raw_becomes_zero(self):
        out = preprocess(np.full((105, 105), 255, dtype=np.uint8))
        np.testing.assert_array_equal(out, np.zeros((28, 28), dtype=np.float32))

    def test_all_stroke_raw_becomes_one(self):
        out = preprocess(np.zeros((105, 105), dtype=np.uint8))
        np.testing.assert_allclose(out, np.ones((28, 28)), atol=1e-6)

    def test_single_black_row_maps_proportionally(self):
        src_row = 40
        raw = np.full((105, 105), 255, dtype=np.uint8)
        raw[src_row, :] = 0
        out = preprocess(raw)
        bright = np.nonzero(out.sum(axis=1))[0]
        # a 1px row lands in at most two adjacent 3.75px output rows
        assert 1 <= len(bright) <= 2
        assert np.all(np.diff(bright) == 1) if len(bright) == 2 else True
        assert nearest_row(src_row, 105, 28) in bright
        # the row's total mass is conserved up to the box scale
        np.testing.assert_allclose(out.sum(), 28.0 * 28.0 / 105.0, rtol=1e-5)

    def test_idempotent_on_normalized_28x28(self):
        glyph = make_dataset(1, 1, 2, seed=3).classes[0].exemplars[0].pixels
        once = preprocess(glyph)
        twice = preprocess(once)
        np.testing.assert_allclose(twice, once, atol=1e-6)

    def test_values_always_in_unit_interval(self, rng):
        raw = rng.integers(0, 256, size=(64, 80), dtype=np.uint8)
        out = preprocess(raw)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == (28, 28)

    def test_rejects_bad_inputs(self):
        with pytest.raises(Exception):
            preprocess(np.zeros((4, 4, 3), dtype=np.uint8))
        with pytest.raises(Exception):
            preprocess(np.full((28, 28), 9.0, dtype=np.float32))

    def test_area_resize_identity_at_same_size(self, rng):
        img = rng.uniform(size=(28, 28))
        np.testing.assert_allclose(area_resize(img, 28), img, atol=1e-12)

    def test_area_resize_preserves_mean(self, rng):
        img = rng.uniform(size=(105, 105))
        out = area_resize(img, 28)
        np.testing.assert_allclose(out.mean(), img.mean(), rtol=1e-10)


class TestIngest:
    def test_fixture_tree_roundtrip(self, tmp_path):
        ds = make_dataset(2, 3, drawers=4, seed=11)
        write_tree(tmp_path / "tree", ds)
        loaded = ingest(tmp_path / "tree")
        assert len(loaded.classes) == 6
        assert all(len(c.exemplars) == 4 for c in loaded.classes)
        assert loaded.alphabets == ["alpha00", "alpha01"]
        # pixels survive the PNG+invert round trip to u8 precision
        orig = ds.classes[0].exemplars[0].pixels
        back = loaded.classes[0].exemplars[0].pixels
        np.testing.assert_allclose(back, orig, atol=1.0 / 255.0 + 1e-6)

    def test_missing_root_raises(self, tmp_path):
        with pytest.raises(IngestError):
            ingest(tmp_path / "nope")

    def test_empty_directory_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(IngestError):
            ingest(tmp_path / "empty")

    def test_corrupt_file_listed_in_error(self, tmp_path):
        ds = make_dataset(1, 1, drawers=3, seed=5)
        write_tree(tmp_path / "tree", ds)
        bad = tmp_path / "tree" / "alpha00" / "char00" / "char00_99.png"
        bad.write_bytes(b"not an image at all")
        with pytest.raises(IngestError) as err:
            ingest(tmp_path / "tree")
        assert "char00_99.png" in str(err.value)

    def test_canonical_layout_detected(self, tmp_path):
        ds = make_dataset(1, 2, drawers=3, seed=6)
        write_tree(tmp_path / "tree", ds, canonical_layout=True)
        loaded = ingest(tmp_path / "tree")
        assert len(loaded.classes) == 2

    def test_single_exemplar_class_rejected(self, tmp_path):
        d = tmp_path / "tree" / "alpha" / "char"
        d.mkdir(parents=True)
        write_png_gray(d / "only_00.png", np.full((28, 28), 255, dtype=np.uint8))
        with pytest.raises(IngestError):
            ingest(tmp_path / "tree")

    def test_ingest_writes_cache(self, tmp_path):
        ds = make_dataset(1, 2, drawers=3, seed=8)
        write_tree(tmp_path / "tree", ds)
        cache = tmp_path / "glyphs.vced"
        ingest(tmp_path / "tree", cache_path=cache)
        assert cache.exists()
        reloaded = load_cache(cache)
        assert len(reloaded.classes) == 2


class TestCache:
    def test_roundtrip_is_exact(self, tmp_path):
        ds = make_dataset(2, 2, drawers=5, seed=21)
        path = tmp_path / "c.vced"
        save_cache(ds, path)
        back = load_cache(path)
        assert len(back.classes) == len(ds.classes)
        for a, b in zip(ds.classes, back.classes):
            assert a.class_id == b.class_id
            for ea, eb in zip(a.exemplars, b.exemplars):
                np.testing.assert_allclose(eb.pixels, ea.pixels, atol=1.0 / 255.0 / 2 + 1e-7)

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = make_dataset(1, 2, drawers=3, seed=22)
        p1, p2 = tmp_path / "a.vced", tmp_path / "b.vced"
        save_cache(ds, p1)
        save_cache(ds, p2)
        assert hashlib.sha256(p1.read_bytes()).hexdigest() == \
               hashlib.sha256(p2.read_bytes()).hexdigest()

    def test_second_save_load_cycle_is_bit_stable(self, tmp_path):
        ds = make_dataset(1, 1, drawers=3, seed=23)
        p1, p2 = tmp_path / "a.vced", tmp_path / "b.vced"
        save_cache(ds, p1)
        save_cache(load_cache(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_cache_raises(self, tmp_path):
        ds = make_dataset(1, 1, drawers=3, seed=24)
        path = tmp_path / "c.vced"
        save_cache(ds, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CacheError):
            load_cache(path)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "c.vced"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CacheError):
            load_cache(path)


class TestSplit:
    def test_proportional_two_alphabets(self):
        ds = make_dataset(2, 2, drawers=3, seed=31)
        sp = split_dataset(ds, seed=0)
        assert len(sp.train_alphabets) == 1 and len(sp.test_alphabets) == 1

    def test_same_seed_same_split(self):
        ds = make_dataset(6, 2, drawers=3, seed=32)
        a = split_dataset(ds, seed=7)
        b = split_dataset(ds, seed=7)
        assert a.train_alphabets == b.train_alphabets
        assert a.test_alphabets == b.test_alphabets

    def test_disjoint_for_many_seeds(self):
        ds = make_dataset(5, 2, drawers=3, seed=33)
        for seed in range(25):
            sp = split_dataset(ds, seed=seed)
            assert not set(sp.train_alphabets) & set(sp.test_alphabets)
            assert set(sp.train_alphabets) | set(sp.test_alphabets) == set(ds.alphabets)

    def test_canonical_names_trigger_fixed_split(self):
        names = sorted(BACKGROUND_ALPHABETS)[:3] + sorted(EVALUATION_ALPHABETS)[:2]
        classes = []
        for name in names:
            src = make_dataset(1, 1, drawers=3, seed=34).classes[0]
            exemplars = [GlyphImage(e.pixels, (name, "char00"), e.drawer_id)
                         for e in src.exemplars]
            classes.append(CharacterClass(name, "char00", exemplars))
        ds = GlyphDataset(classes)
        for seed in (0, 1, 2):
            sp = split_dataset(ds, seed=seed)
            assert set(sp.train_alphabets) <= BACKGROUND_ALPHABETS
            assert set(sp.test_alphabets) <= EVALUATION_ALPHABETS
        assert len(BACKGROUND_ALPHABETS) == 30
        assert len(EVALUATION_ALPHABETS) == 20

    def test_single_alphabet_raises(self):
        ds = make_dataset(1, 2, drawers=3, seed=35)
        with pytest.raises(SplitError):
            split_dataset(ds, seed=0)


class TestEpisodes:
    def test_full_support_uses_all_other_drawers(self):
        ds = make_dataset(1, 1, drawers=20, seed=41)
        rng = np.random.default_rng(0)
        ep = sample_episode(ds.classes, support_size=19, rng=rng)
        ids = {g.drawer_id for g in ep.support}
        assert len(ep.support) == 19
        assert ep.condition.drawer_id not in ids
        assert ids | {ep.condition.drawer_id} == set(range(20))

    def test_support_size_one(self):
        ds = make_dataset(1, 1, drawers=5, seed=42)
        ep = sample_episode(ds.classes, 1, np.random.default_rng(1))
        assert len(ep.support) == 1
        assert ep.support[0].drawer_id != ep.condition.drawer_id

    def test_oversized_support_raises(self):
        ds = make_dataset(1, 1, drawers=5, seed=43)
        with pytest.raises(SamplingError):
            sample_episode(ds.classes, 5, np.random.default_rng(2))

    def test_invariants_hold_over_many_draws(self):
        ds = make_dataset(2, 3, drawers=8, seed=44)
        rng = np.random.default_rng(3)
        for _ in range(2000):
            ep = sample_episode(ds.classes, 4, rng)
            assert ep.condition.class_id == ep.class_id
            assert all(g.class_id == ep.class_id for g in ep.support)
            assert all(g.drawer_id != ep.condition.drawer_id for g in ep.support)
            assert len({g.drawer_id for g in ep.support}) == 4

    def test_class_choice_uniform_chi_square(self):
        ds = make_dataset(1, 5, drawers=4, seed=45)
        rng = np.random.default_rng(4)
        n, k = 10_000, len(ds.classes)
        counts = {c.class_id: 0 for c in ds.classes}
        for _ in range(n):
            counts[sample_episode(ds.classes, 2, rng).class_id] += 1
        expected = n / k
        chi2 = sum((v - expected) ** 2 / expected for v in counts.values())
        # chi-square df=4: mean 4, var 8 -> 3 sigma above mean
        assert chi2 < 4 + 3 * np.sqrt(8.0)

    def test_episode_arrays_shapes(self):
        ds = make_dataset(1, 1, drawers=6, seed=46)
        ep = sample_episode(ds.classes, 3, np.random.default_rng(5))
        xs, q = episode_arrays(ep)
        assert xs.shape == (3, 28, 28) and xs.dtype == np.float32
        assert q.shape == (28, 28) and q.dtype == np.float32

    def test_determinism_given_rng_state(self):
        ds = make_dataset(2, 2, drawers=6, seed=47)
        e1 = sample_episode(ds.classes, 3, np.random.default_rng(9))
        e2 = sample_episode(ds.classes, 3, np.random.default_rng(9))
        assert e1.class_id == e2.class_id
        assert e1.condition.drawer_id == e2.condition.drawer_id
        assert [g.drawer_id for g in e1.support] == [g.drawer_id for g in e2.support]
