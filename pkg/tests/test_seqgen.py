import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sodade.dataio import N_PROPS, PROPERTY_NAMES, DataError, PropertySchema, SolventRecord, load_spange
from sodade.seqgen import (
    SkipRecord, TypeVocab, collate, expected_mask_fraction, item_rng, iter_batches, one_out_example,
    sample_epoch, sample_training_item, unmasked_example,
)

UNIT = PropertySchema(PROPERTY_NAMES, (0.0,) * N_PROPS, (1.0,) * N_PROPS)
# n-pentane row of the published table, missing N_density and f_n
PENTANE = (31.0, 0.0, 0.0, -0.08, 0.0, 0.073, 0.593, 0.0, None, 1.358, None, 14.5)


@pytest.fixture
def pentane():
    return SolventRecord("n-pentane", "alkane", "CCCCC", PENTANE)


def test_loaded_pentane_matches_fixture(data_dir, pentane):
    assert load_spange(data_dir / "spange_table1.csv")["n-pentane"] == pentane


def test_identity_permutation(pentane):
    ex = unmasked_example(pentane, UNIT)
    np.testing.assert_array_equal(ex.prop_idx, np.arange(12))
    assert ex.missing.tolist() == [v is None for v in PENTANE]
    np.testing.assert_array_equal(ex.values, [0.0 if v is None else v for v in PENTANE])
    assert not ex.masked.any() and np.isnan(ex.target).all()


def test_reversed_permutation(pentane):
    perm = np.arange(12)[::-1]
    ex = unmasked_example(pentane, UNIT, perm)
    assert ex.prop_idx.tolist() == list(range(11, -1, -1))
    assert ex.values[0] == 14.5 and ex.values[-1] == 31.0
    assert ex.missing[1] and ex.missing[3]


def test_bad_permutation_rejected(pentane):
    with pytest.raises(ValueError):
        unmasked_example(pentane, UNIT, [0] * 12)


def test_missing_count_conserved(pentane):
    rng = item_rng(0, 1)
    for _ in range(50):
        ex = sample_training_item(pentane, UNIT, rng)
        assert ex.missing.sum() == 2
        assert set(ex.prop_idx[ex.missing].tolist()) == {8, 10}


def test_mask_rate_zero_masks_exactly_one(pentane):
    rng = item_rng(0, 2)
    for _ in range(50):
        assert sample_training_item(pentane, UNIT, rng, mask_rate=0.0).masked.sum() == 1


def test_mask_rate_one_masks_every_present(pentane):
    ex = sample_training_item(pentane, UNIT, item_rng(0, 3), mask_rate=1.0)
    np.testing.assert_array_equal(ex.masked, ~ex.missing)


def test_mask_fraction_statistics():
    rec = SolventRecord("x", "t", None, tuple(float(i) for i in range(12)))
    rng = item_rng(5, 0)
    n = 100_000
    frac = np.mean([sample_training_item(rec, UNIT, rng).masked.sum() / 12 for _ in range(n)])
    # independent oracle: E[max(K, 1)] / 12 with K ~ Binomial(12, 0.3) = (12 * 0.3 + 0.7**12) / 12
    oracle = (3.6 + 0.7 ** 12) / 12
    assert oracle == pytest.approx(0.30115, abs=1e-5)
    assert expected_mask_fraction(0.3) == pytest.approx(oracle, abs=1e-12)
    assert 0.29 <= frac <= 0.37
    assert abs(frac - oracle) < 0.003


def test_too_few_present_properties_skipped():
    rec = SolventRecord("x", "t", None, (1.0,) + (None,) * 11)
    with pytest.raises(SkipRecord):
        sample_training_item(rec, UNIT, item_rng(0))
    assert sample_epoch([rec], UNIT, 0, 0) == []


def test_collate_singleton_and_flags(pentane):
    ex = sample_training_item(pentane, UNIT, item_rng(0, 4))
    b = collate([ex])
    assert len(b) == 1 and b.values.shape == (1, 12)
    np.testing.assert_array_equal(b.missing[0], ex.missing)
    np.testing.assert_array_equal(b.masked[0], ex.masked)
    with pytest.raises(ValueError):
        collate([])
    with pytest.raises(ValueError):
        list(iter_batches([], 4))


def test_iter_batches_sizes(pentane):
    items = [unmasked_example(pentane, UNIT)] * 10
    assert [len(b) for b in iter_batches(items, 4)] == [4, 4, 2]


def test_epoch_sampling_deterministic(synth):
    table, _ = synth
    recs = list(table)[:20]
    a = collate(sample_epoch(recs, UNIT, 7, 3))
    b = collate(sample_epoch(recs, UNIT, 7, 3))
    c = collate(sample_epoch(recs, UNIT, 7, 4))
    for f in ("prop_idx", "values", "masked", "missing"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.prop_idx.tobytes() != c.prop_idx.tobytes()


def test_type_vocab():
    v = TypeVocab(["b", "a", "a"])
    assert v.types == ("<unk>", "a", "b")
    assert v.index("a") == 1 and v.index("zzz") == 0


def test_type_token_from_vocab(pentane):
    vocab = TypeVocab(["alcohol", "alkane"])
    assert unmasked_example(pentane, UNIT, vocab=vocab).type_token == 2


def test_one_out_places_target_last(pentane):
    ex = one_out_example(pentane, UNIT, 0)
    assert ex.prop_idx[-1] == 0 and ex.masked.tolist() == [False] * 11 + [True]
    assert ex.target[-1] == 31.0 and ex.values[-1] == 0.0
    with pytest.raises(DataError):
        one_out_example(pentane, UNIT, 8)


props = st.tuples(*[st.one_of(st.none(), st.floats(-100, 100)) for _ in range(12)]).filter(
    lambda t: sum(v is not None for v in t) >= 2)


@given(props, st.integers(0, 2 ** 32), st.floats(0.0, 1.0))
def test_masking_invariants(values, seed, rate):
    rec = SolventRecord("s", "t", None, values)
    ex = sample_training_item(rec, UNIT, item_rng(seed), mask_rate=rate)
    assert not np.any(ex.masked & ex.missing)
    assert ex.masked.any()
    assert np.all(np.isfinite(ex.target) == ex.masked)
    assert np.all(ex.values[ex.masked | ex.missing] == 0.0)
    assert ex.missing.sum() == 12 - rec.n_present
    assert sorted(ex.prop_idx.tolist()) == list(range(12))
