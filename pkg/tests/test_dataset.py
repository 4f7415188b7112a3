import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from macr.dataset import (DataError, InteractionDataset, SplitSpec, build_debiased_split, group_by_count,
                          item_popularity, load_interactions, load_split, sample_negatives, save_split)


def write(tmp_path, text, name="log.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_collapses_duplicates(tmp_path):
    data, ids = load_interactions(write(tmp_path, "a\tx\na\tx\nb\ty\n"))
    assert (data.n_users, data.n_items, len(data)) == (2, 2, 2)
    assert ids.users == ["a", "b"] and ids.items == ["x", "y"]


def test_load_skips_comments_and_blank_lines(tmp_path):
    data, _ = load_interactions(write(tmp_path, "# header\n\na\tx\n  \nb\tx\n"))
    assert data.positives == {(0, 0), (1, 0)}


def test_load_custom_delimiter(tmp_path):
    data, _ = load_interactions(write(tmp_path, "a,x\nb,y\n"), delimiter=",")
    assert len(data) == 2


def test_empty_file_rejected(tmp_path):
    with pytest.raises(DataError, match="zero users or zero items"):
        load_interactions(write(tmp_path, ""))


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(DataError, match=":2:"):
        load_interactions(write(tmp_path, "a\tx\nbroken\n"))


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        load_interactions(tmp_path / "missing.tsv")


def test_adjacencies_invert_positives():
    data = InteractionDataset.from_pairs(3, 4, [(0, 1), (0, 3), (2, 1), (1, 0)])
    rebuilt = {(u, i) for u, items in enumerate(data.per_user_positives) for i in items.tolist()}
    assert rebuilt == data.positives
    rebuilt = {(u, i) for i, users in enumerate(data.per_item_positives) for u in users.tolist()}
    assert rebuilt == data.positives


def test_out_of_range_index_rejected():
    with pytest.raises(DataError):
        InteractionDataset(2, 2, np.array([0, 2]), np.array([0, 1]))


def random_dataset(seed, n_users=30, n_items=12, density=0.3):
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    mask[rng.integers(n_users, size=n_items), np.arange(n_items)] = True
    u, i = np.nonzero(mask)
    return InteractionDataset(n_users, n_items, u, i)


def test_split_sizes_floor():
    data = InteractionDataset.from_pairs(20, 10, [(u, i) for u in range(20) for i in range(10) if (u + i) % 2 == 0])
    assert len(data) == 100
    split = build_debiased_split(data, SplitSpec(0.1, 0.1, 0))
    assert len(split.test) == 10 and len(split.valid) == 10 and len(split.train) == 80


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), test=st.floats(0.05, 0.4), valid=st.floats(0.05, 0.4))
def test_split_partitions_the_source(seed, test, valid):
    data = random_dataset(seed)
    split = build_debiased_split(data, SplitSpec(test, valid, seed))
    tr = split.train.positives
    va = set(map(tuple, split.valid.tolist()))
    te = set(map(tuple, split.test.tolist()))
    assert len(va) == len(split.valid) and len(te) == len(split.test)
    assert not (tr & va) and not (tr & te) and not (va & te)
    assert tr | va | te == data.positives
    assert len(te) == int(np.floor(test * len(data)))
    assert split.train.n_users == data.n_users and split.train.n_items == data.n_items


def test_split_is_deterministic():
    data = random_dataset(3)
    a = build_debiased_split(data, SplitSpec(0.2, 0.1, 42))
    b = build_debiased_split(data, SplitSpec(0.2, 0.1, 42))
    c = build_debiased_split(data, SplitSpec(0.2, 0.1, 43))
    assert np.array_equal(a.test, b.test) and np.array_equal(a.valid, b.valid)
    assert not np.array_equal(a.test, c.test)


def test_split_is_uniform_over_items():
    # item 0 has 1000 interactions, item 1 only 200; uniform-over-items
    # sampling must still pick them equally often
    pairs = [(u, 0) for u in range(1000)] + [(u, 1) for u in range(200)]
    data = InteractionDataset.from_pairs(1000, 2, pairs)
    counts = np.zeros(2)
    for seed in range(200):
        split = build_debiased_split(data, SplitSpec(0.1, 0.05, seed))
        counts += np.bincount(split.test[:, 1], minlength=2)
    assert abs(counts[0] - counts[1]) / counts.mean() < 0.05


def test_exhausted_items_leave_the_pool():
    # item 1 has one interaction; after it is taken every draw must hit item 0
    pairs = [(u, 0) for u in range(50)] + [(0, 1)]
    data = InteractionDataset.from_pairs(50, 2, pairs)
    split = build_debiased_split(data, SplitSpec(0.3, 0.3, 1))
    assert len(split.test) == 15 and len(split.valid) == 15


def test_split_rejects_bad_fractions():
    with pytest.raises(DataError):
        SplitSpec(0.6, 0.5, 0)
    with pytest.raises(DataError):
        SplitSpec(0.0, 0.1, 0)


def test_split_rejects_item_without_interactions():
    data = InteractionDataset.from_pairs(2, 3, [(0, 0), (1, 1)])
    with pytest.raises(DataError):
        build_debiased_split(data, SplitSpec(0.1, 0.1, 0))


def test_split_files_round_trip(tmp_path):
    data, ids = load_interactions(write(tmp_path, "".join(f"u{u}\ti{(u * 7 + k) % 9}\n" for u in range(30) for k in range(3))))
    split = build_debiased_split(data, SplitSpec(0.1, 0.1, 5), ids)
    save_split(split, tmp_path / "s", 5)
    back = load_split(tmp_path / "s")
    assert back.train.positives == split.train.positives
    assert np.array_equal(back.valid, split.valid) and np.array_equal(back.test, split.test)
    assert back.id_map.users == ids.users
    meta = (tmp_path / "s" / "meta.jsonl").read_text()
    assert '"seed": 5' in meta and '"n_items": 9' in meta


def test_negatives_count_and_labels():
    train = InteractionDataset.from_pairs(1, 3, [(0, 0)])
    batch = sample_negatives(train, 1, 0)
    assert len(batch) == 2
    assert batch.labels.tolist() == [1.0, 0.0]
    assert batch.items[1] != 0


def test_negatives_never_hit_positives():
    train = random_dataset(7, density=0.6)
    batch = sample_negatives(train, 4, 1)
    neg = batch.labels == 0
    assert neg.sum() == 4 * len(train)
    assert not train.contains(batch.users[neg], batch.items[neg]).any()


def test_negatives_fail_for_saturated_user():
    train = InteractionDataset.from_pairs(2, 2, [(0, 0), (0, 1), (1, 0)])
    with pytest.raises(DataError, match="user 0"):
        sample_negatives(train, 1, 0)


def test_negatives_fail_for_bad_ratio():
    with pytest.raises(DataError):
        sample_negatives(InteractionDataset.from_pairs(1, 3, [(0, 0)]), 0, 0)


def test_negatives_uniform_over_non_interacted_items():
    train = InteractionDataset.from_pairs(1, 8, [(0, 2), (0, 5)])
    batch = sample_negatives(train, 30000, 11)
    items = batch.items[batch.labels == 0]
    counts = np.bincount(items, minlength=8)
    assert counts[2] == counts[5] == 0
    observed = counts[[0, 1, 3, 4, 6, 7]]
    assert stats.chisquare(observed).pvalue > 0.01


def test_popularity_counts():
    train = InteractionDataset.from_pairs(2, 2, [(0, 0), (1, 0), (0, 1)])
    prof = item_popularity(train)
    assert prof.item_counts.tolist() == [2, 1]
    assert prof.item_counts.sum() == len(train)


def test_popularity_equal_counts_collapse_to_one_group():
    train = InteractionDataset.from_pairs(2, 3, [(0, 0), (1, 1), (0, 2)])
    prof = item_popularity(train)
    assert prof.n_groups == 1 and set(prof.groups.tolist()) == {0}


def test_popularity_groups_partition_and_order():
    train = random_dataset(9, n_users=200, n_items=40, density=0.2)
    for policy in ("width", "quantile"):
        prof = item_popularity(train, 5, policy)
        assert sorted(np.concatenate([prof.members(g) for g in range(prof.n_groups)]).tolist()) == list(range(40))
        means = [prof.item_counts[prof.members(g)].mean() for g in range(prof.n_groups)]
        assert means == sorted(means)


def test_group_by_count_rejects_unknown_policy():
    with pytest.raises(ValueError):
        group_by_count([1, 2], 2, "log")
