import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lohp.nn import make_rng
from lohp.store import (FLAG_FULL_SPAN, OfflineTrajectory, StoreFormatError, SubTrajectorySample, aligned_pairs,
                        decode_store, encode_store, read_episodes, read_store, record_size,
                        sample_subtrajectories, truncate_trajectory, write_episodes, write_store)
from lohp.tasks import make_blob_episodes


def traj(T, dim=3, seed=0, policy="sgd"):
    states = make_rng(seed).standard_normal((T + 1, dim))
    return OfflineTrajectory(7, policy, False, states, np.arange(T + 1, dtype=float))


def random_samples(rng, count, dim=4, T=10):
    out = []
    for i in range(count):
        m = int(rng.integers(0, T))
        n = int(rng.integers(m + 1, T + 1))
        out.append(SubTrajectorySample(int(rng.integers(0, 2**63)), m, n, T, rng.standard_normal(dim),
                                       rng.standard_normal(dim), rng.standard_normal((3, 2)),
                                       rng.standard_normal(dim), int(rng.integers(0, 8))))
    return out


def test_alignment_rule(rng):
    for s in sample_subtrajectories(traj(10), 5, 2, rng):
        assert s.m in range(0, 11, 2) and s.n in range(0, 11, 2) and s.m < s.n


def test_k1_admits_all_pairs():
    assert len(aligned_pairs(6, 1)) == 6 * 7 // 2


def test_short_trajectory_rejected(rng):
    with pytest.raises(ValueError, match="shorter than one segment"):
        sample_subtrajectories(traj(1), 1, 2, rng)


def test_uniform_over_pairs_chi_square(rng):
    pairs = aligned_pairs(10, 2)
    counts = Counter((s.m, s.n) for s in sample_subtrajectories(traj(10), 10_000, 2, rng))
    assert set(counts) == set(pairs)
    expected = 10_000 / len(pairs)
    chi2 = sum((counts[p] - expected) ** 2 / expected for p in pairs)
    # 14 degrees of freedom; the 0.999 quantile is 36.12
    assert chi2 < 36.12


def test_full_span_probability(rng):
    samples = sample_subtrajectories(traj(11), 4000, 2, rng, full_span_prob=0.5)
    full = [s for s in samples if (s.m, s.n) == (0, 10)]
    assert all(s.flags & FLAG_FULL_SPAN for s in full)
    # forced half plus the uniform share 1/15 of the rest
    assert abs(len(full) / 4000 - (0.5 + 0.5 / 15)) < 0.03


def test_sampling_deterministic():
    a = sample_subtrajectories(traj(10), 20, 2, make_rng(4))
    b = sample_subtrajectories(traj(10), 20, 2, make_rng(4))
    assert a == b


def test_truncate_makes_T_multiple_of_k():
    t = truncate_trajectory(traj(11), 3)
    assert t.T == 9 and t.states.shape[0] == 10


def test_empty_store(tmp_path):
    path = tmp_path / "empty.lohp"
    assert write_store(path, []) == 0
    assert read_store(path) == []
    assert os.path.getsize(path) == 14


def test_round_trip_100(tmp_path, rng):
    samples = random_samples(rng, 100)
    write_store(tmp_path / "s.lohp", samples)
    assert read_store(tmp_path / "s.lohp") == samples


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_round_trip_property(count, dim, seed):
    samples = random_samples(make_rng(seed), count, dim)
    assert decode_store(encode_store(samples)) == samples


def test_round_trip_preserves_special_values():
    s = SubTrajectorySample(1, 0, 1, 1, np.array([-0.0, np.inf]), np.array([5e-324, -np.inf]),
                            np.zeros((0, 0)), np.array([np.nan, 1.0]))
    back = decode_store(encode_store([s]))[0]
    assert back == s and np.signbit(back.theta_m[0])


def test_size_independent_of_T(tmp_path, rng):
    a = sample_subtrajectories(traj(10, dim=5), 50, 2, rng, conditioning=np.ones((4, 2)))
    b = sample_subtrajectories(traj(1000, dim=5), 50, 2, rng, conditioning=np.ones((4, 2)))
    write_store(tmp_path / "a", a)
    write_store(tmp_path / "b", b)
    assert os.path.getsize(tmp_path / "a") == os.path.getsize(tmp_path / "b") == 14 + 50 * record_size(5, 4, 2)


def test_size_linear_in_count(rng):
    one = len(encode_store(random_samples(rng, 1)))
    ten = len(encode_store(random_samples(rng, 10)))
    assert ten - 14 == 10 * (one - 14)


def test_bad_magic():
    buf = bytearray(encode_store([]))
    buf[:4] = b"XXXX"
    with pytest.raises(StoreFormatError) as exc:
        decode_store(bytes(buf))
    assert exc.value.offset == 0


def test_bad_version():
    buf = bytearray(encode_store([]))
    buf[4] = 99
    with pytest.raises(StoreFormatError, match="version"):
        decode_store(bytes(buf))


def test_truncation_reports_offset(rng):
    buf = encode_store(random_samples(rng, 2))
    with pytest.raises(StoreFormatError) as exc:
        decode_store(buf[:-5])
    assert 14 < exc.value.offset < len(buf)
    with pytest.raises(StoreFormatError, match="trailing"):
        decode_store(buf + b"\0")


def test_invalid_indices_rejected():
    with pytest.raises(ValueError):
        SubTrajectorySample(0, 3, 3, 5, np.zeros(1), np.zeros(1), np.zeros((0, 0)), np.zeros(1))


def test_episode_file_round_trip(tmp_path):
    eps = make_blob_episodes(make_rng(2), 3, 3, 2, 5)
    write_episodes(tmp_path / "e", eps)
    back = read_episodes(tmp_path / "e")
    for a, b in zip(eps, back):
        assert a.task_id == b.task_id and a.n_classes == b.n_classes
        for f in ("unlabeled_x", "x_train", "y_train", "x_eval", "y_eval"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
