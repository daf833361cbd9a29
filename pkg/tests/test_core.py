import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchseg.core import (
    CtStack,
    ScoreVolume,
    StackCorruptionError,
    StackFormatError,
    load_scores,
    load_stack,
    save_scores,
    save_stack,
    split_folds,
)


def random_stack(rng, d=3, h=16, with_mask=True, stack_id="s0"):
    frames = rng.integers(-1024, 3071, size=(d, h, h)).astype(np.int16)
    mask = (rng.random((d, h, h)) < 0.1).astype(np.uint8) if with_mask else None
    return CtStack(stack_id=stack_id, frames=frames, mask=mask)


def test_roundtrip_identity(tmp_path, rng):
    stack = random_stack(rng)
    save_stack(stack, tmp_path / "s0")
    loaded = load_stack(tmp_path / "s0")
    assert loaded.stack_id == stack.stack_id
    assert np.array_equal(loaded.frames, stack.frames)
    assert np.array_equal(loaded.mask, stack.mask)


def test_roundtrip_bytes_identical(tmp_path, rng):
    stack = random_stack(rng)
    save_stack(stack, tmp_path / "a")
    save_stack(load_stack(tmp_path / "a"), tmp_path / "b")
    for name in ("frames.bin", "mask.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_no_mask_roundtrip(tmp_path, rng):
    stack = random_stack(rng, with_mask=False)
    save_stack(stack, tmp_path / "s")
    assert load_stack(tmp_path / "s").mask is None


def test_missing_header_is_format_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(StackFormatError):
        load_stack(tmp_path / "empty")


def test_garbled_header_is_format_error(tmp_path, rng):
    save_stack(random_stack(rng), tmp_path / "s")
    (tmp_path / "s" / "header.json").write_text("{not json")
    with pytest.raises(StackFormatError):
        load_stack(tmp_path / "s")


def test_declared_depth_mismatch_is_corruption(tmp_path, rng):
    # Header says D=5 but the payload holds fewer frames.
    save_stack(random_stack(rng, d=4), tmp_path / "s")
    header = json.loads((tmp_path / "s" / "header.json").read_text())
    header["D"] = 5
    (tmp_path / "s" / "header.json").write_text(json.dumps(header))
    with pytest.raises(StackCorruptionError):
        load_stack(tmp_path / "s")


def test_score_volume_roundtrip(tmp_path, rng):
    scores = rng.random((3, 8, 8)).astype(np.float32)
    vol = ScoreVolume(stack_id="v", scores=scores)
    save_scores(vol, tmp_path / "v")
    loaded = load_scores(tmp_path / "v")
    assert np.array_equal(loaded.scores, scores)


def test_score_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        ScoreVolume(stack_id="v", scores=np.full((1, 2, 2), 1.5))


def test_stack_invariants():
    with pytest.raises(ValueError):
        CtStack("s", np.zeros((2, 4, 5), dtype=np.int16))
    with pytest.raises(ValueError):
        CtStack("s", np.zeros((2, 4, 4), dtype=np.int16), np.full((2, 4, 4), 2, np.uint8))


def test_split_folds_even_partition():
    split = split_folds([f"s{i}" for i in range(8)], 4, seed=0)
    sizes = [len(split.fold_ids(f)) for f in range(4)]
    assert sizes == [2, 2, 2, 2]


def test_split_folds_deterministic():
    ids = [f"s{i}" for i in range(11)]
    a = split_folds(ids, 4, seed=5)
    b = split_folds(ids, 4, seed=5)
    assert a.assignment == b.assignment
    assert a.assignment != split_folds(ids, 4, seed=6).assignment


def test_split_folds_too_many_folds():
    with pytest.raises(ValueError):
        split_folds(["a", "b", "c"], 4, seed=0)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=40),
    folds=st.integers(min_value=1, max_value=8),
    seed=st.integers(min_value=0, max_value=1000),
)
def test_split_folds_partition_property(n, folds, seed):
    ids = [f"s{i}" for i in range(n)]
    if folds > n:
        with pytest.raises(ValueError):
            split_folds(ids, folds, seed)
        return
    split = split_folds(ids, folds, seed)
    all_assigned = [sid for f in range(folds) for sid in split.fold_ids(f)]
    assert sorted(all_assigned) == sorted(ids)
    sizes = [len(split.fold_ids(f)) for f in range(folds)]
    assert max(sizes) - min(sizes) <= 1
