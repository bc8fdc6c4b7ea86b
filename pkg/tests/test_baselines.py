import math

import numpy as np
import pytest

from epimetric.baselines import (
    BaselineError,
    TfidfIndex,
    baseline_rank,
    baseline_scores,
    episode_terms,
    scap_profile,
    scap_similarity,
    tfidf_cosine,
)
from epimetric.corpus import Action, Episode, SynthConfig, synth_corpus
from epimetric.evaluation import RankingTask, build_ranking_task


def ep(text, user="u", context="c"):
    return Episode(user, [Action(0, text, context)])


# ---------------------------------------------------------------------------
# tf-idf
# ---------------------------------------------------------------------------

def test_tfidf_hand_computed_example():
    d1, d2 = ep("a b"), ep("a c")
    index = TfidfIndex.fit([d1, d2], "word")
    q = index.vectorize(ep("a b"))
    v1 = index.vectorize(d1)
    v2 = index.vectorize(d2)
    assert tfidf_cosine(q, v1) == pytest.approx(1.0)
    # idf: a -> 1, b=c -> ln(3/2)+1; cosine = 1 / (1 + (ln(3/2)+1)^2)
    expected = 1.0 / (1.0 + (math.log(3 / 2) + 1.0) ** 2)
    assert tfidf_cosine(q, v2) == pytest.approx(expected)
    assert round(tfidf_cosine(q, v2), 3) == 0.336


def test_tfidf_self_similarity_one():
    index = TfidfIndex.fit([ep("x y z"), ep("y w")], "word")
    for text in ("x y z", "completely novel words"):
        v = index.vectorize(ep(text))
        assert tfidf_cosine(v, v) == pytest.approx(1.0)


def test_tfidf_disjoint_vocabulary_zero():
    index = TfidfIndex.fit([ep("a b"), ep("c d")], "word")
    assert tfidf_cosine(index.vectorize(ep("a b")), index.vectorize(ep("c d"))) == 0.0


def test_tfidf_empty_document_zero_vector():
    index = TfidfIndex.fit([ep("a")], "word")
    assert index.vectorize(ep("")) == {}


def test_tfidf_modes_and_terms():
    episode = Episode("u", [Action(0, "ab cd", "sub1"), Action(1, "ef", "sub2")])
    assert episode_terms(episode, "word") == ["ab", "cd", "ef"]
    assert episode_terms(episode, "char_trigram") == ["ab ", "b c", " cd", "cd ", "d e", " ef"]
    assert episode_terms(episode, "context_bag") == ["sub1", "sub2"]
    with pytest.raises(BaselineError):
        episode_terms(episode, "bigram")


# ---------------------------------------------------------------------------
# SCAP profiles
# ---------------------------------------------------------------------------

def test_scap_profile_hand_example():
    a, b = ep("abab"), ep("abab")
    pa, pb = scap_profile(a), scap_profile(b)
    assert pa.ngrams == {"aba", "bab"}
    assert scap_similarity(pa, pb) == 2


def test_scap_disjoint_zero():
    assert scap_similarity(scap_profile(ep("abab")), scap_profile(ep("cdcd"))) == 0


def test_scap_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    letters = np.array(list("abcdefgh"))
    for _ in range(10):
        ta = "".join(rng.choice(letters, size=200))
        tb = "".join(rng.choice(letters, size=200))
        pa, pb = scap_profile(ep(ta)), scap_profile(ep(tb))
        assert scap_similarity(pa, pb) == scap_similarity(pb, pa)
        assert 0 <= scap_similarity(pa, pb) <= 64
        assert len(pa.ngrams) <= 64


def test_scap_empty_text_empty_profile():
    profile = scap_profile(ep(""))
    assert profile.ngrams == frozenset()
    assert scap_similarity(profile, scap_profile(ep("abcdef"))) == 0


def test_scap_profile_invariant_to_harmless_repetition():
    # extra repetitions that do not change the top-64 ordering keep the profile
    base = "xyz " * 30 + "abc " * 20
    more = "xyz " * 40 + "abc " * 20
    assert scap_profile(ep(base), profile_len=4).ngrams == scap_profile(ep(more), profile_len=4).ngrams


def test_scap_tie_break_lexicographic():
    profile = scap_profile(ep("abcd"), n=3, profile_len=1)
    assert profile.ngrams == {"abc"}  # "abc" and "bcd" both occur once


# ---------------------------------------------------------------------------
# ranking harness
# ---------------------------------------------------------------------------

def task_from(queries, targets):
    return RankingTask(queries=queries, targets=targets, metric="cosine")


def test_baseline_rank_identical_episode_wins():
    q = ep("alpha beta gamma", user="a")
    t_other = ep("delta epsilon", user="b")
    task = task_from([(q, "a")], [(q, "a"), (t_other, "b")])
    for method in ("tfidf-word", "tfidf-char3", "scap"):
        report = baseline_rank(task, method)
        assert report.ranks == [1], method


def test_baseline_unknown_method():
    q = ep("x", user="a")
    task = task_from([(q, "a")], [(q, "a")])
    with pytest.raises(BaselineError):
        baseline_scores(task, "bm25")


def test_disjoint_vocabulary_corpus_perfect_word_recall():
    corpus = synth_corpus(SynthConfig(num_authors=6, actions_per_author=64,
                                      signature_strength=1.0, disjoint_signatures=True, seed=3))
    task = build_ranking_task(corpus, L=8, rng=np.random.default_rng(0))
    report = baseline_rank(task, "tfidf-word")
    assert report.recall[1] == 1.0


def test_no_signal_corpus_ranks_near_chance():
    corpus = synth_corpus(SynthConfig(num_authors=50, actions_per_author=64,
                                      signature_strength=0.0, background_vocab_size=50,
                                      num_contexts=1, contexts_per_author=1,
                                      hour_band_width=24, tokens_per_action=10, seed=4))
    task = build_ranking_task(corpus, L=8, rng=np.random.default_rng(1))
    report = baseline_rank(task, "tfidf-word")
    n = 50
    expected_mrr = sum(1.0 / r for r in range(1, n + 1)) / n
    second_moment = sum(1.0 / r**2 for r in range(1, n + 1)) / n
    sigma = math.sqrt((second_moment - expected_mrr**2) / len(task.queries))
    assert abs(report.mrr - expected_mrr) < 3 * sigma, f"MRR {report.mrr} vs chance {expected_mrr}"


def test_baseline_report_uses_shared_metrics_code():
    q = ep("alpha beta", user="a")
    task = task_from([(q, "a")], [(q, "a"), (ep("alpha beta", user="b"), "b")])
    report = baseline_rank(task, "tfidf-word")
    # identical targets tie -> pessimistic rank 2
    assert report.ranks == [2]
    assert report.mrr == 0.5
    assert report.num_targets == 2
    assert report.metric == "tfidf-word"
