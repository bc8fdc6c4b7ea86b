import itertools
import math
from collections import Counter

import numpy as np
import pytest

from epimetric.corpus import Action, Episode, SynthConfig, synth_corpus, sample_user_episodes
from epimetric.encoder import ModelConfig, init_params
from epimetric.evaluation import (
    EvaluationError,
    RankingTask,
    affinity_propagation,
    build_ranking_task,
    cluster_metrics,
    embed_all,
    rank,
    rank_task,
    ranking_metrics,
    verify_pair_embeddings,
)
from epimetric.tokenizer import ContextVocab, Vocabulary, learn_bpe


# ---------------------------------------------------------------------------
# independent brute-force oracles (kept deliberately naive)
# ---------------------------------------------------------------------------

def oracle_rank(scores_row, true_idx):
    true_score = scores_row[true_idx]
    r = 1
    for j, s in enumerate(scores_row):
        if j == true_idx:
            continue
        if s >= true_score:  # strictly better or tied both count above
            r += 1
    return r


def oracle_metrics(ranks, ks):
    n = len(ranks)
    mrr = math.fsum(1.0 / r for r in ranks) / n
    median = sorted(ranks)[(n - 1) // 2]
    recall = {k: sum(1 for r in ranks if r <= k) / n for k in ks}
    return mrr, median, recall


def oracle_cluster_scores(pred, truth):
    n = len(pred)
    joint = Counter(zip(truth, pred))
    pc = Counter(pred)
    tc = Counter(truth)

    def H(counter):
        return -sum(c / n * math.log(c / n) for c in counter.values())

    mi = 0.0
    for (t, p), c in joint.items():
        mi += c / n * math.log((c / n) / ((tc[t] / n) * (pc[p] / n)))
    h_t, h_p = H(tc), H(pc)
    hom = 1.0 if h_t == 0 else 1.0 - (h_t - mi) / h_t
    com = 1.0 if h_p == 0 else 1.0 - (h_p - mi) / h_p
    nmi = 1.0 if h_t + h_p == 0 else 2 * mi / (h_t + h_p)
    return nmi, hom, com


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def test_rank_unique_maximum():
    ranks = rank(np.array([[0.1, 0.9, 0.3]]), np.array([1]))
    assert ranks.tolist() == [1]


def test_rank_hand_example():
    ranks = rank(np.array([[0.9, 0.5, 0.1]]), np.array([1]))
    assert ranks.tolist() == [2]


def test_rank_all_ties_pessimistic():
    ranks = rank(np.full((1, 10), 0.5), np.array([3]))
    assert ranks.tolist() == [10]


def test_rank_invariant_under_increasing_transform():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(20, 30))
    true_idx = rng.integers(0, 30, size=20)
    base = rank(scores, true_idx)
    for f in (np.exp, lambda s: 3 * s + 7, np.tanh):
        np.testing.assert_array_equal(rank(f(scores), true_idx), base)


def test_ranking_metrics_fixture_bit_for_bit():
    report = ranking_metrics([1, 2, 4], ks=(1, 2, 4))
    assert report.mrr == (1.0 + 0.5 + 0.25) / 3
    assert round(report.mrr, 5) == 0.58333
    assert report.median_rank == 2
    assert report.recall == {1: 1 / 3, 2: 2 / 3, 4: 1.0}


def test_ranking_metrics_all_first():
    report = ranking_metrics([1, 1, 1, 1])
    assert report.mrr == 1.0 and report.median_rank == 1
    assert all(v == 1.0 for v in report.recall.values())


def test_ranking_metrics_rejects_bad_input():
    with pytest.raises(EvaluationError):
        ranking_metrics([])
    with pytest.raises(EvaluationError):
        ranking_metrics([0, 1])


def test_rank_and_metrics_match_oracle_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        q = int(rng.integers(1, 12))
        n = int(rng.integers(2, 50))
        scores = np.round(rng.normal(size=(q, n)), 2)  # rounding forces ties
        true_idx = rng.integers(0, n, size=q)
        got = rank(scores, true_idx)
        expected = [oracle_rank(scores[i], true_idx[i]) for i in range(q)]
        assert got.tolist() == expected
        report = ranking_metrics(got)
        mrr, median, recall = oracle_metrics(got.tolist(), report.recall.keys())
        assert abs(report.mrr - mrr) < 1e-15
        assert report.median_rank == median
        assert report.recall == recall


def test_lower_median_on_even_counts():
    assert ranking_metrics([1, 2]).median_rank == 1
    assert ranking_metrics([1, 2, 3, 4]).median_rank == 2


def test_mrr_never_below_recall_at_1():
    rng = np.random.default_rng(7)
    for _ in range(20):
        ranks = rng.integers(1, 40, size=25)
        report = ranking_metrics(ranks)
        assert report.mrr >= report.recall[1]


def test_ranking_task_validation():
    ep = Episode("u", [Action(0, "x")])
    with pytest.raises(EvaluationError, match="multiple targets"):
        RankingTask(queries=[(ep, "u")], targets=[(ep, "u"), (ep, "u")])
    with pytest.raises(EvaluationError, match="no target"):
        RankingTask(queries=[(ep, "v")], targets=[(ep, "u")])


def test_rank_task_end_to_end_with_direct_embeddings():
    ep = Episode("q", [Action(0, "x")])
    task = RankingTask(
        queries=[(ep, "a"), (ep, "b")],
        targets=[(ep, "a"), (ep, "b"), (ep, "c")],
        metric="cosine",
    )
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.array([[1.0, 0.05], [0.1, 1.0], [0.7, 0.7]])
    report = rank_task(task, q, t)
    assert report.ranks == [1, 1]
    assert report.num_targets == 3 and report.metric == "cosine"


# ---------------------------------------------------------------------------
# affinity propagation
# ---------------------------------------------------------------------------

def net_similarity(S, pref, labels, exemplars):
    total = 0.0
    for i, lbl in enumerate(labels):
        k = exemplars[lbl]
        total += pref if i == k else S[i, k]
    return total


def test_affinity_propagation_three_points_matches_exhaustive_oracle():
    pts = np.array([0.0, 0.1, 10.0])
    S = -((pts[:, None] - pts[None, :]) ** 2)
    result = affinity_propagation(S.copy())
    # expected grouping: the two nearby points together, the far point alone
    assert result.labels[0] == result.labels[1] != result.labels[2]

    # the chosen exemplar set attains the exhaustive-maximum net similarity
    off = S[~np.eye(3, dtype=bool)]
    pref = float(np.median(off))
    best = -np.inf
    for r in range(1, 4):
        for combo in itertools.combinations(range(3), r):
            total = sum(max(S[i, k] for k in combo) if i not in combo else pref for i in range(3))
            best = max(best, total)
    achieved = net_similarity(S, pref, result.labels, result.exemplars)
    assert achieved == pytest.approx(best)


def test_affinity_propagation_single_point():
    result = affinity_propagation(np.zeros((1, 1)))
    assert result.labels.tolist() == [0]
    assert result.exemplars.tolist() == [0]
    assert result.converged


def test_affinity_propagation_three_blobs():
    # damping 0.5 oscillates on symmetric blob structure; 0.9 settles cleanly
    rng = np.random.default_rng(3)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts = np.concatenate([c + 0.3 * rng.normal(size=(17, 2)) for c in centers])[:50]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    result = affinity_propagation(-d2, damping=0.9)
    truth = [i // 17 for i in range(50)]
    report = cluster_metrics(result.labels.tolist(), truth)
    assert result.converged
    assert report.num_clusters == 3
    assert report.nmi >= 0.95


def test_affinity_propagation_deterministic():
    rng = np.random.default_rng(5)
    S = rng.normal(size=(12, 12))
    S = (S + S.T) / 2
    a = affinity_propagation(S.copy())
    b = affinity_propagation(S.copy())
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.exemplars, b.exemplars)


def test_affinity_propagation_errors_and_convergence_flag():
    with pytest.raises(EvaluationError, match="square"):
        affinity_propagation(np.zeros((2, 3)))
    rng = np.random.default_rng(6)
    S = rng.normal(size=(8, 8))
    result = affinity_propagation(S, max_iter=3)
    assert not result.converged  # came back with an assignment anyway
    assert len(result.labels) == 8


def test_exemplars_assigned_to_themselves():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(15, 2)) * 4
    S = -((pts[:, None] - pts[None, :]) ** 2).sum(-1)
    result = affinity_propagation(S)
    for cluster, k in enumerate(result.exemplars.tolist()):
        assert result.labels[k] == cluster


# ---------------------------------------------------------------------------
# clustering scores
# ---------------------------------------------------------------------------

def test_cluster_metrics_perfect():
    report = cluster_metrics([5, 5, 2, 2], ["a", "a", "b", "b"])
    assert report.nmi == report.homogeneity == report.completeness == 1.0
    assert report.num_clusters == 2


def test_cluster_metrics_single_cluster():
    report = cluster_metrics([0, 0, 0, 0], ["a", "a", "b", "b"])
    assert report.completeness == 1.0
    assert report.homogeneity == 0.0
    assert report.nmi == 0.0


def test_cluster_metrics_independent_labelings():
    report = cluster_metrics([0, 1, 0, 1], [0, 0, 1, 1])
    assert report.nmi == pytest.approx(0.0, abs=1e-12)
    assert report.homogeneity == pytest.approx(0.0, abs=1e-12)
    assert report.completeness == pytest.approx(0.0, abs=1e-12)


def test_cluster_metrics_relabeling_invariance():
    rng = np.random.default_rng(10)
    truth = rng.integers(0, 4, size=40).tolist()
    pred = rng.integers(0, 5, size=40).tolist()
    base = cluster_metrics(pred, truth)
    remap_p = {k: f"p{9 - k}" for k in range(5)}
    remap_t = {k: f"t{(k + 2) % 4}" for k in range(4)}
    again = cluster_metrics([remap_p[p] for p in pred], [remap_t[t] for t in truth])
    assert base == again


def test_cluster_metrics_match_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(2, 50))
        truth = rng.integers(0, int(rng.integers(1, 6)) + 1, size=n).tolist()
        pred = rng.integers(0, int(rng.integers(1, 6)) + 1, size=n).tolist()
        report = cluster_metrics(pred, truth)
        nmi, hom, com = oracle_cluster_scores(pred, truth)
        assert report.nmi == pytest.approx(max(0.0, nmi), abs=1e-12)
        assert report.homogeneity == pytest.approx(max(0.0, hom), abs=1e-12)
        assert report.completeness == pytest.approx(max(0.0, com), abs=1e-12)


def test_cluster_metrics_rejects_mismatched_lengths():
    with pytest.raises(EvaluationError):
        cluster_metrics([0, 1], [0])


# ---------------------------------------------------------------------------
# embedding + verification
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_encoder():
    corpus = synth_corpus(SynthConfig(num_authors=3, actions_per_author=32, seed=1))
    texts = [a.text for h in corpus.values() for a in h.actions]
    ctxs = [a.context for h in corpus.values() for a in h.actions]
    vocab = Vocabulary(subword=learn_bpe(texts, 300), context=ContextVocab.fit(ctxs, K=8), T=8)
    config = ModelConfig(vocab_size=vocab.subword.size, num_contexts=vocab.context.size,
                         d_embed=8, conv_widths=(2,), filters_per_conv=4, attn_layers=1,
                         attn_heads=2, d_hidden=8, D=6, dropout_rate=0.0)
    return corpus, vocab, init_params(config, seed=2)


def test_embed_all_matches_single_and_handles_empty(tiny_encoder):
    corpus, vocab, enc = tiny_encoder
    rng = np.random.default_rng(0)
    eps = sample_user_episodes(corpus, n_per_user=2, L=4, rng=rng, train_fraction=None)
    mat = embed_all(enc, vocab, eps, batch_size=3)
    assert mat.shape == (len(eps), 6)
    dupes = embed_all(enc, vocab, [eps[0], eps[0]])
    np.testing.assert_array_equal(dupes[0], dupes[1])
    assert embed_all(enc, vocab, []).shape == (0, 6)


def test_build_ranking_task_shapes(tiny_encoder):
    corpus, vocab, enc = tiny_encoder
    task = build_ranking_task(corpus, L=2, rng=np.random.default_rng(1))
    assert len(task.targets) == len(corpus)
    assert {a for _, a in task.queries} == set(corpus)


def test_verify_identical_episode_pair_classified_same():
    rng = np.random.default_rng(12)
    D = 8
    same = rng.normal(size=(40, D))
    za = np.concatenate([same, rng.normal(size=(40, D))])
    zb = np.concatenate([same, rng.normal(size=(40, D))])  # first 40 pairs identical vectors
    y = np.array([1.0] * 40 + [0.0] * 40)
    report = verify_pair_embeddings(za, zb, y, method="cosine")
    assert report.test_accuracy >= 0.9
    assert report.threshold is not None and report.threshold < 1.0


def test_verify_random_embeddings_near_half():
    rng = np.random.default_rng(13)
    n = 800
    za, zb = rng.normal(size=(n, 10)), rng.normal(size=(n, 10))
    y = (np.arange(n) % 2).astype(float)
    report = verify_pair_embeddings(za, zb, y, method="cosine")
    sigma = math.sqrt(0.25 / (n / 4))
    assert abs(report.test_accuracy - 0.5) < 3 * sigma


def test_verify_mlp_learns_separable_pairs():
    rng = np.random.default_rng(14)
    n, D = 400, 6
    base = rng.normal(size=(n, D))
    za = base
    zb = np.where((np.arange(n) % 2 == 1)[:, None], base + 0.05 * rng.normal(size=(n, D)),
                  rng.normal(size=(n, D)))
    y = (np.arange(n) % 2).astype(float)
    report = verify_pair_embeddings(za, zb, y, method="mlp", epochs=150)
    assert report.test_accuracy >= 0.9


def test_verify_rejects_bad_input():
    with pytest.raises(EvaluationError):
        verify_pair_embeddings(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(EvaluationError, match="method"):
        verify_pair_embeddings(np.ones((4, 2)), np.ones((4, 2)), np.ones(4), method="svm")
    with pytest.raises(EvaluationError, match="empty split"):
        verify_pair_embeddings(np.ones((2, 2)), np.ones((2, 2)), np.ones(2), splits=["train", "train"])


def test_embed_all_threads_bit_identical(tiny_encoder):
    corpus, vocab, enc = tiny_encoder
    rng = np.random.default_rng(2)
    eps = sample_user_episodes(corpus, n_per_user=4, L=3, rng=rng, train_fraction=None)
    serial = embed_all(enc, vocab, eps, batch_size=2, threads=1)
    threaded = embed_all(enc, vocab, eps, batch_size=2, threads=3)
    assert serial.tobytes() == threaded.tobytes()
