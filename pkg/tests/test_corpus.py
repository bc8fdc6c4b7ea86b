import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epimetric import corpus as cp
from epimetric.corpus import (
    Action,
    CorpusError,
    SynthConfig,
    UserHistory,
    author_labels,
    chronological_split,
    filter_users,
    ingest_jsonl,
    make_batch,
    query_target_episodes,
    sample_episode,
    synth_corpus,
    write_jsonl,
)
from epimetric.tokenizer import time_feature

# chi-square critical value, 16 dof, p = 0.001
CHI2_CRIT_16_P001 = 39.2524


def history(user_id, n, start=0):
    return UserHistory(user_id, [Action(start + i, f"t{i}") for i in range(n)])


def test_ingest_sorts_and_defaults(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [
        {"user_id": "u1", "ts": 200, "text": "later", "context": "s"},
        {"user_id": "u1", "ts": 100, "text": "earlier"},
        {"user_id": "u2", "ts": "2016-09-15T07:03:00Z", "text": "iso"},
    ]
    path.write_text("\n".join(json.dumps(l) for l in lines))
    corpus = ingest_jsonl(path)
    assert [a.timestamp for a in corpus["u1"].actions] == [100, 200]
    assert corpus["u1"].actions[0].context == "unk"
    assert time_feature(corpus["u2"].actions[0].timestamp) == 7


def test_ingest_skips_malformed_and_counts(tmp_path, caplog):
    path = tmp_path / "c.jsonl"
    path.write_text('{"user_id": "u1", "ts": 1, "text": "ok"}\nnot json\n{"ts": 2}\n')
    with caplog.at_level("WARNING"):
        corpus = ingest_jsonl(path)
    assert len(corpus["u1"]) == 1
    assert "skipped 2 malformed" in caplog.text
    with pytest.raises(CorpusError):
        ingest_jsonl(path, strict=True)


def test_ingest_unreadable_is_fatal(tmp_path):
    with pytest.raises(OSError):
        ingest_jsonl(tmp_path / "missing.jsonl")


def test_filter_users_bounds():
    corpus = {u: history(u, n) for u, n in [("u1", 50), ("u2", 100), ("u3", 500), ("u4", 501)]}
    assert set(filter_users(corpus, 100, 500)) == {"u2", "u3"}
    assert set(filter_users(corpus, 1, 10**9)) == {"u1", "u2", "u3", "u4"}
    assert filter_users({}, 100, 500) == {}


def test_chronological_split_examples():
    early, late = chronological_split(history("u", 100), 0.75)
    assert (len(early), len(late)) == (75, 25)
    early, late = chronological_split(history("u", 1), 0.75)
    assert (len(early), len(late)) == (1, 0)
    early, late = chronological_split(history("u", 4), 0.5)
    assert (len(early), len(late)) == (2, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=1, max_value=200), st.floats(min_value=0.01, max_value=0.99))
def test_chronological_split_is_a_partition(n, fraction):
    h = history("u", n)
    early, late = chronological_split(h, fraction)
    assert early + late == h.actions


def test_sample_episode_contract():
    h = history("u", 100)
    rng = np.random.default_rng(0)
    ep = sample_episode(h, 16, rng)
    assert len(ep) == 16
    start = h.actions.index(ep.actions[0])
    assert h.actions[start : start + 16] == ep.actions  # contiguous in source

    # n == L: always the unique full window
    h2 = history("u", 5)
    for _ in range(5):
        assert sample_episode(h2, 5, rng).actions == h2.actions

    with pytest.raises(CorpusError, match="u"):
        sample_episode(h2, 6, rng)

    a = sample_episode(h, 16, np.random.default_rng(7)).actions
    b = sample_episode(h, 16, np.random.default_rng(7)).actions
    assert a == b


def test_sample_episode_windows_uniform_chi_square():
    h = history("u", 20)
    rng = np.random.default_rng(123)
    n_windows = 17  # n=20, L=4
    draws = 100_000
    counts = np.zeros(n_windows)
    for _ in range(draws):
        ep = sample_episode(h, 4, rng)
        counts[ep.actions[0].timestamp] += 1
    expected = draws / n_windows
    stat = ((counts - expected) ** 2 / expected).sum()
    assert stat < CHI2_CRIT_16_P001, f"chi-square {stat}"


def test_make_batch_basics():
    corpus = {"u1": history("u1", 10)}
    rng = np.random.default_rng(0)
    batch = make_batch(corpus, 2, 4, rng)
    assert [lbl for _, lbl in batch] == [0, 0]
    assert make_batch(corpus, 0, 4, rng) == []
    with pytest.raises(CorpusError):
        make_batch({"u1": history("u1", 2)}, 1, 4, rng)


def test_make_batch_users_uniform_within_3_sigma():
    users = 5
    corpus = {f"u{i}": history(f"u{i}", 1) for i in range(users)}
    rng = np.random.default_rng(42)
    draws = 100_000
    batch = make_batch(corpus, draws, 1, rng)
    counts = np.bincount([lbl for _, lbl in batch], minlength=users)
    p = 1.0 / users
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() < 3 * sigma


def test_labels_dense_and_sorted():
    corpus = {"zeta": history("zeta", 1), "alpha": history("alpha", 1)}
    assert author_labels(corpus) == {"alpha": 0, "zeta": 1}


def test_synth_corpus_deterministic(tmp_path):
    config = SynthConfig(num_authors=3, actions_per_author=20, seed=9)
    a, b = synth_corpus(config), synth_corpus(SynthConfig(num_authors=3, actions_per_author=20, seed=9))
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, pa)
    write_jsonl(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_synth_sigma_zero_shares_one_distribution():
    config = SynthConfig(num_authors=4, actions_per_author=60, signature_strength=0.0,
                         background_vocab_size=10, seed=1)
    corpus = synth_corpus(config)
    token_sets = [set(" ".join(a.text for a in h.actions).split()) for h in corpus.values()]
    union = set().union(*token_sets)
    assert len(union) <= 10  # only the shared background vocabulary occurs


def test_synth_sigma_one_disjoint_vocabularies():
    config = SynthConfig(num_authors=4, actions_per_author=30, signature_strength=1.0,
                         disjoint_signatures=True, seed=2)
    corpus = synth_corpus(config)
    token_sets = [set(" ".join(a.text for a in h.actions).split()) for h in corpus.values()]
    for i in range(len(token_sets)):
        for j in range(i + 1, len(token_sets)):
            assert not (token_sets[i] & token_sets[j])


def test_synth_invalid_probability_rejected():
    with pytest.raises(CorpusError):
        synth_corpus(SynthConfig(num_authors=2, actions_per_author=5, signature_strength=1.5))


def test_synth_hour_bands_respected():
    config = SynthConfig(num_authors=4, actions_per_author=40, hour_band_width=6,
                         disjoint_hour_bands=True, seed=3)
    corpus = synth_corpus(config)
    for idx, user in enumerate(sorted(corpus)):
        band_start = (idx % 4) * 6
        band = {(band_start + h) % 24 for h in range(6)}
        hours = {time_feature(a.timestamp) for a in corpus[user].actions}
        assert hours <= band


def test_synth_timestamps_increase():
    corpus = synth_corpus(SynthConfig(num_authors=2, actions_per_author=50, seed=4))
    for h in corpus.values():
        ts = [a.timestamp for a in h.actions]
        assert ts == sorted(ts)


def test_query_target_episodes_time_ordering():
    corpus = synth_corpus(SynthConfig(num_authors=3, actions_per_author=64, seed=5))
    rng = np.random.default_rng(0)
    queries, targets = query_target_episodes(corpus, L=4, rng=rng)
    assert set(queries) == set(targets) == set(corpus)
    for user in queries:
        q_last = queries[user].actions[-1].timestamp
        t_first = targets[user].actions[0].timestamp
        assert q_last <= t_first


def test_corpus_round_trip_jsonl(tmp_path):
    corpus = synth_corpus(SynthConfig(num_authors=2, actions_per_author=10, seed=6))
    path = tmp_path / "c.jsonl"
    write_jsonl(corpus, path)
    loaded = ingest_jsonl(path)
    assert set(loaded) == set(corpus)
    for user in corpus:
        assert loaded[user].actions == corpus[user].actions


def test_episode_file_round_trip(tmp_path):
    corpus = synth_corpus(SynthConfig(num_authors=2, actions_per_author=24, seed=7))
    rng = np.random.default_rng(1)
    eps = cp.sample_user_episodes(corpus, n_per_user=2, L=4, rng=rng)
    path = tmp_path / "eps.jsonl"
    cp.write_episodes_jsonl(eps, path)
    loaded = cp.read_episodes_jsonl(path)
    assert len(loaded) == len(eps)
    for x, y in zip(loaded, eps):
        assert x.user_id == y.user_id and x.actions == y.actions


def test_query_target_boundary_by_timestamp():
    corpus = {"u": history("u", 40)}  # timestamps 0..39; held-out = 30..39
    rng = np.random.default_rng(0)
    queries, targets = query_target_episodes(corpus, L=3, rng=rng, query_boundary=36)
    assert all(a.timestamp < 36 for a in queries["u"].actions)
    assert all(a.timestamp >= 36 for a in targets["u"].actions)


def test_filter_users_requires_positive_min():
    with pytest.raises(CorpusError):
        filter_users({}, 0, 10)
