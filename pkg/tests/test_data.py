import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrl import collect, data, envs
from icrl.collect import TRANSITION_DTYPE, LearningHistory
from icrl.errors import FormatError, UsageError


def _history(episode_lengths, success=(), goal=(0, 0)):
    """Synthetic history whose episodes have the given lengths; listed episodes end with reward 1."""
    rows = []
    for i, n in enumerate(episode_lengths):
        for t in range(n):
            last = t == n - 1
            rows.append((t % 81, t % 5, 1.0 if last and i in success else 0.0, last, t))
    return LearningHistory(envs.dark_room(9, goal), np.array(rows, dtype=TRANSITION_DTYPE))


def test_parse_name():
    n = data.parse_name("K2D13-500-1-early")
    assert (n.env, n.grid_size, n.n_targets, n.histories_per_target, n.expertise) == ("K2D", 13, 500, 1, "early")
    assert str(n) == "K2D13-500-1-early"
    assert str(data.parse_name("DR9-70-5")) == "DR9-70-5"
    with pytest.raises(UsageError):
        data.parse_name("DR9-70")


def test_expertise_split_thirds():
    h = _history([3] * 10)
    early, mid, late = data.split_expertise(h)
    assert (early.n_episodes, mid.n_episodes, late.n_episodes) == (3, 3, 4)
    with pytest.raises(UsageError):
        data.split_expertise(_history([2, 2]))


def test_subsample_every_kth():
    h = _history([1, 2, 3, 4, 5, 6, 7])
    assert list(data.subsample(h, 3).episode_lengths()) == [1, 4, 7]
    assert data.subsample(h, 1) is h
    with pytest.raises(UsageError):
        data.subsample(h, 0)


def test_discounted_return():
    assert data.discounted_return([0, 0, 1], 0.5) == pytest.approx(0.25)


def test_sorted_random_orders_by_return():
    h = _history([5, 2, 8, 3], success=(0, 1, 2, 3))
    out = data.reorder_history(h, "sorted_random", 0.9, np.random.default_rng(0))
    # longer successful episodes have smaller discounted return
    assert list(out.episode_lengths()) == [8, 5, 3, 2]


def test_reorder_preserves_multiset(small_dataset):
    ds = data.reorder(small_dataset, "random", seed=3)
    assert ds.manifest.ordering == "random"
    for a, b in zip(small_dataset.histories, ds.histories):
        assert sorted(map(bytes, (e.tobytes() for e in a.episodes()))) == sorted(
            map(bytes, (e.tobytes() for e in b.episodes()))
        )
    with pytest.raises(UsageError):
        data.reorder(small_dataset, "learning_history")


def test_manifest_counts(small_dataset):
    m = small_dataset.manifest
    assert m.counts["histories"] == 3
    assert m.counts["trajectories"] == 36
    assert m.counts["transitions"] == small_dataset.n_transitions
    assert len(small_dataset.test_tasks()) == 2


def test_split_dataset_renames(small_dataset):
    late = data.split_dataset(small_dataset, "late")
    assert late.name == "DR9-3-1-late" and late.manifest.expertise == "late"
    with pytest.raises(UsageError):
        data.split_dataset(late, "early")


def test_round_trip_bit_exact(small_dataset, tmp_path):
    blob = data.dumps_dataset(small_dataset)
    back = data.loads_dataset(blob)
    assert back == small_dataset
    assert data.dumps_dataset(back) == blob
    p = tmp_path / "d.icrl"
    data.write_dataset(small_dataset, p)
    assert p.read_bytes() == blob


def test_format_errors(small_dataset):
    blob = data.dumps_dataset(small_dataset)
    with pytest.raises(FormatError) as e:
        data.loads_dataset(b"XXXX" + blob[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError):
        data.loads_dataset(blob[:4] + b"\x07" + blob[5:])
    corrupted = bytearray(blob)
    corrupted[len(blob) // 2] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        data.loads_dataset(bytes(corrupted))
    with pytest.raises(FormatError):
        data.loads_dataset(blob[:-10])


def test_context_batch_short_history_is_left_padded():
    h = _history([3, 3])
    ds = data.make_dataset("DR9-1-1", [h])
    b = data.sample_context_batch(ds, 2, 10, seed=0)
    assert b.shape == (2, 10)
    assert b.pad_mask[:, :4].sum() == 0 and b.pad_mask[:, 4:].all()
    assert b.prev_action[0, 4] == data.SENTINEL_ACTION and b.prev_done[0, 4] == 1.0
    assert list(b.obs[0, 4:]) == [0, 1, 2, 0, 1, 2]
    # previous fields shift the taken transition by one
    assert np.array_equal(b.prev_action[0, 5:], b.actions[0, 4:-1])
    assert not b.td_mask[:, -1].any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), seq_len=st.integers(1, 40), batch=st.integers(1, 8))
def test_context_batch_matches_history(seed, seq_len, batch):
    hs = [_history([4, 7, 2, 9], success=(1,)), _history([5] * 6, success=(0, 2))]
    ds = data.make_dataset("DR9-2-1", hs)
    b = data.sample_context_batch(ds, batch, seq_len, seed)
    for i in range(batch):
        tr = ds.histories[b.history_index[i]].transitions
        real = np.flatnonzero(b.pad_mask[i])
        seg = tr[b.start[i] : b.start[i] + len(real)]
        assert np.array_equal(b.obs[i, real], seg["obs"])
        assert np.array_equal(b.actions[i, real], seg["action"])
        assert np.array_equal(b.rewards[i, real], seg["reward"])
        # the predecessor of the first real token comes from the history, if any
        if b.start[i] > 0:
            assert b.prev_action[i, real[0]] == tr[b.start[i] - 1]["action"]
        else:
            assert b.prev_action[i, real[0]] == data.SENTINEL_ACTION


def test_generate_is_deterministic():
    cfg = collect.QLearnConfig(n_episodes=5)
    a = data.generate("DR9-4-1", seed=2, cfg=cfg)
    b = data.generate("DR9-4-1", seed=2, cfg=cfg)
    assert data.dumps_dataset(a) == data.dumps_dataset(b)
    assert len(a.test_tasks()) == 77
    early = data.generate("DR9-4-1-early", seed=2, cfg=cfg)
    assert early.manifest.expertise == "early"
