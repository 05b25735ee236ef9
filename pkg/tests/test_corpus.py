import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regenrec.corpus import (
    Dataset,
    DatasetError,
    Sequence,
    generate_synthetic,
    leave_one_out_split,
    load_dataset,
    save_dataset,
)


def write(tmp_path, text):
    path = tmp_path / "data.txt"
    path.write_text(text, encoding="utf-8")
    return path


def test_load_basic(tmp_path):
    ds = load_dataset(write(tmp_path, "7 1 2 3\n8 3 4\n"))
    assert [s.user_id for s in ds] == [7, 8]
    assert ds.sequences[0].items == (1, 2, 3)
    assert ds.num_items == 4


def test_truncation_keeps_suffix(tmp_path):
    items = " ".join(str(i) for i in range(1, 61))
    ds = load_dataset(write(tmp_path, f"0 {items}\n"), max_len=50)
    assert ds.sequences[0].items == tuple(range(11, 61))


def test_remap_is_dense(tmp_path):
    ds = load_dataset(write(tmp_path, "0 100 7 100\n1 42\n"), remap=True)
    assert ds.item_lists() == [(1, 2, 1), (3,)]
    assert ds.num_items == 3


@pytest.mark.parametrize(
    "text, needle",
    [
        ("0 1 2\n1 3 x\n", "line 2"),
        ("0 1 0 2\n", "line 1"),
        ("5\n", "line 1"),
    ],
)
def test_load_errors_name_line(tmp_path, text, needle):
    with pytest.raises(DatasetError, match=needle):
        load_dataset(write(tmp_path, text))


def test_empty_file(tmp_path):
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(write(tmp_path, "\n"))


def test_save_load_roundtrip(tmp_path):
    ds = generate_synthetic(20, 15, [(1, 2, 3), (4, 5)], 0.2, seed=3)
    save_dataset(ds, tmp_path / "out.txt")
    back = load_dataset(tmp_path / "out.txt", max_len=None, num_items=15)
    assert back.sequences == ds.sequences


def test_split_example():
    ds = Dataset((Sequence(0, (1, 2, 3, 4)),), num_items=4)
    split = leave_one_out_split(ds)
    assert split.train.sequences[0].items == (1, 2)
    assert split.val_targets[0] == ((1, 2), 3)
    assert split.test_targets[0] == ((1, 2, 3), 4)


def test_split_excludes_short(caplog):
    ds = Dataset((Sequence(0, (1, 2)), Sequence(1, (1, 2, 3))), num_items=3)
    split = leave_one_out_split(ds)
    assert split.excluded == 1
    assert len(split.train) == 1
    assert "excluded" in caplog.text


def test_split_all_short_errors():
    with pytest.raises(DatasetError):
        leave_one_out_split(Dataset((Sequence(0, (1, 2)),), num_items=2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(1, 9), min_size=1, max_size=15), min_size=1, max_size=10))
def test_split_reassembles(rows):
    ds = Dataset(tuple(Sequence(u, tuple(r)) for u, r in enumerate(rows)), num_items=9)
    if all(len(r) < 3 for r in rows):
        return
    split = leave_one_out_split(ds)
    kept = {s.user_id: s.items for s in ds if len(s) >= 3}
    assert list(split.user_ids) == list(kept)
    for train, (vp, v), (tp, t), u in zip(split.train, split.val_targets, split.test_targets, split.user_ids):
        assert train.items + (v, t) == kept[u]
        assert vp == train.items and tp == train.items + (v,)


def test_synthetic_noiseless():
    ds = generate_synthetic(30, 5, [(1, 2, 3)], 0.0, seed=0)
    for s in ds:
        assert len(s) % 3 == 0
        assert s.items == (1, 2, 3) * (len(s) // 3)


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic(50, 30, [(1, 2, 3), (4, 5)], 0.3, seed=11)
    b = generate_synthetic(50, 30, [(1, 2, 3), (4, 5)], 0.3, seed=11)
    save_dataset(a, tmp_path / "a.txt")
    save_dataset(b, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_synthetic_noise_fraction():
    # each position is noise with probability r, so the expected noise share is r
    _, masks = generate_synthetic(1000, 30, [(1, 2, 3, 4), (5, 6, 7)], 0.3, seed=0, with_labels=True)
    flat = np.concatenate([np.array(m, dtype=bool) for m in masks])
    assert abs(flat.mean() - 0.3) <= 0.03


def test_synthetic_argument_errors():
    with pytest.raises(ValueError):
        generate_synthetic(5, 10, [], 0.1, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(5, 10, [(1, 11)], 0.1, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(5, 10, [(1, 2)], 1.5, seed=0)
