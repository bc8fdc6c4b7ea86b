"""Open-world evaluation over episode embeddings: author ranking, affinity
propagation clustering with information-theoretic scores, and same-author pair
verification."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, Episode, query_target_episodes
from .encoder import EncoderParams, encode_episode_batch, episodes_to_arrays
from .objectives import similarity_matrix
from .tokenizer import Vocabulary

DEFAULT_KS = (1, 2, 4, 8, 16, 32)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def embed_all(enc: EncoderParams, vocab: Vocabulary, episodes: list[Episode],
              batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Row i = eval-mode embedding of episodes[i]; empty input gives (0, D).

    Evaluation is read-only on the parameters, so chunks may be embedded by a
    small thread pool; results are ordered and independent of ``threads``.
    """
    if not episodes:
        return np.zeros((0, enc.config.D))
    chunks = [episodes[i : i + batch_size] for i in range(0, len(episodes), batch_size)]

    def embed_chunk(chunk: list[Episode]) -> np.ndarray:
        with ad.no_grad():
            text, hour, ctx = episodes_to_arrays(vocab, chunk)
            return encode_episode_batch(enc, text, hour, ctx, mode="eval").data

    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(embed_chunk, chunks))
    else:
        rows = [embed_chunk(chunk) for chunk in chunks]
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

@dataclass
class RankingTask:
    """Queries ranked against targets; exactly one target per query's author."""

    queries: list[tuple[Episode, str]]
    targets: list[tuple[Episode, str]]
    metric: str = "cosine"

    def __post_init__(self):
        target_authors = [a for _, a in self.targets]
        dupes = [a for a, c in Counter(target_authors).items() if c > 1]
        if dupes:
            raise EvaluationError(f"multiple targets for author(s) {dupes[:3]}")
        missing = {a for _, a in self.queries} - set(target_authors)
        if missing:
            raise EvaluationError(f"no target for query author(s) {sorted(missing)[:3]}")
        self.target_index = {a: i for i, (_, a) in enumerate(self.targets)}


@dataclass
class RankingReport:
    mrr: float
    median_rank: int
    recall: dict[int, float]
    num_queries: int
    num_targets: int
    metric: str
    ranks: list[int] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"mrr": self.mrr, "median_rank": self.median_rank,
                "recall": {str(k): v for k, v in sorted(self.recall.items())},
                "num_queries": self.num_queries, "num_targets": self.num_targets,
                "metric": self.metric}


def rank(scores: np.ndarray, true_idx: np.ndarray) -> np.ndarray:
    """Per-query rank of the true target given a (Q, N) score matrix.

    rank = 1 + strictly-better targets; other targets tied with the true one
    count as ranked above it (pessimistic, deterministic)."""
    scores = np.asarray(scores, dtype=np.float64)
    true_idx = np.asarray(true_idx)
    q = np.arange(scores.shape[0])
    true_scores = scores[q, true_idx]
    better = (scores > true_scores[:, None]).sum(axis=1)
    tied = (scores == true_scores[:, None]).sum(axis=1) - 1  # exclude the target itself
    return 1 + better + tied


def ranking_metrics(ranks, ks=DEFAULT_KS) -> RankingReport:
    """MRR, lower-median rank, and recall-at-k from per-query ranks."""
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no ranks to aggregate")
    if ranks.min() < 1:
        raise EvaluationError("ranks must be >= 1")
    mrr = float((1.0 / ranks).mean())
    median = int(np.sort(ranks)[(ranks.size - 1) // 2])
    recall = {int(k): float((ranks <= k).mean()) for k in ks}
    if 1 in recall:
        assert mrr >= recall[1] - 1e-12, "reciprocal ranks cannot fall below top-1 recall"
    return RankingReport(mrr=mrr, median_rank=median, recall=recall,
                         num_queries=int(ranks.size), num_targets=0, metric="",
                         ranks=ranks.tolist())


def rank_task(task: RankingTask, query_emb: np.ndarray, target_emb: np.ndarray,
              ks=DEFAULT_KS) -> RankingReport:
    scores = similarity_matrix(query_emb, target_emb, task.metric)
    true_idx = np.array([task.target_index[a] for _, a in task.queries])
    report = ranking_metrics(rank(scores, true_idx), ks)
    report.num_targets = len(task.targets)
    report.metric = task.metric
    return report


def run_ranking(enc: EncoderParams, vocab: Vocabulary, task: RankingTask,
                batch_size: int = 64, ks=DEFAULT_KS, threads: int = 1) -> RankingReport:
    query_emb = embed_all(enc, vocab, [ep for ep, _ in task.queries], batch_size, threads)
    target_emb = embed_all(enc, vocab, [ep for ep, _ in task.targets], batch_size, threads)
    return rank_task(task, query_emb, target_emb, ks)


def build_ranking_task(corpus: Corpus, L: int, rng: np.random.Generator,
                       metric: str = "cosine", query_users: list[str] | None = None,
                       train_fraction: float = 0.75) -> RankingTask:
    """Queries from the early half of each user's held-out window, targets from
    the late half, one target per author."""
    queries, targets = query_target_episodes(corpus, L, rng, train_fraction)
    if query_users is None:
        query_users = sorted(queries)
    missing = [u for u in query_users if u not in queries]
    if missing:
        raise EvaluationError(f"query user(s) without held-out episodes: {missing[:3]}")
    return RankingTask(
        queries=[(queries[u], u) for u in query_users],
        targets=[(targets[u], u) for u in sorted(targets)],
        metric=metric,
    )


# ---------------------------------------------------------------------------
# affinity propagation
# ---------------------------------------------------------------------------

@dataclass
class ClusterResult:
    labels: np.ndarray
    exemplars: np.ndarray
    converged: bool
    iterations: int


def affinity_propagation(S: np.ndarray, damping: float = 0.5,
                         preference: float | None = None, max_iter: int = 1000,
                         convergence_window: int = 50) -> ClusterResult:
    """Responsibility/availability message passing on a similarity matrix.

    Deterministic: no noise injection, ties resolved by lowest index. The
    diagonal of ``S`` is replaced by ``preference`` (default: median of the
    off-diagonal similarities).
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise EvaluationError(f"similarity matrix must be square, got {S.shape}")
    n = S.shape[0]
    if n == 1:
        return ClusterResult(labels=np.zeros(1, dtype=np.int64),
                             exemplars=np.zeros(1, dtype=np.int64), converged=True, iterations=0)
    if preference is None:
        off = S[~np.eye(n, dtype=bool)]
        preference = float(np.median(off))
    # an index-descending infinitesimal tilt on the preferences breaks exact
    # ties deterministically (lower index preferred as exemplar); it is far
    # below the similarity scale, so non-degenerate inputs are unaffected
    span = float(S.max() - S.min()) if n > 1 else 1.0
    tilt = 1e-9 * max(1.0, span, abs(preference))
    np.fill_diagonal(S, preference + tilt * (np.arange(n, 0, -1) / n))

    R = np.zeros_like(S)
    A = np.zeros_like(S)
    idx = np.arange(n)

    def self_choosers() -> np.ndarray:
        return np.flatnonzero((R.diagonal() + A.diagonal()) > 0)

    stable = 0
    prev: frozenset[int] = frozenset()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # responsibilities
        AS = A + S
        first_idx = AS.argmax(axis=1)
        first = AS[idx, first_idx]
        AS[idx, first_idx] = -np.inf
        second = AS.max(axis=1)
        Rnew = S - first[:, None]
        Rnew[idx, first_idx] = S[idx, first_idx] - second
        R = damping * R + (1.0 - damping) * Rnew

        # availabilities
        Rp = np.maximum(R, 0.0)
        np.fill_diagonal(Rp, R.diagonal())
        colsum = Rp.sum(axis=0)
        Anew = colsum[None, :] - Rp
        diag = Anew.diagonal().copy()
        Anew = np.minimum(0.0, Anew)
        np.fill_diagonal(Anew, diag)
        A = damping * A + (1.0 - damping) * Anew

        exemplars = frozenset(self_choosers().tolist())
        if exemplars and exemplars == prev:
            stable += 1
            if stable >= convergence_window:
                converged = True
                break
        else:
            stable = 0
            prev = exemplars

    exemplar_idx = self_choosers()
    if exemplar_idx.size == 0:
        exemplar_idx = np.array([int((R.diagonal() + A.diagonal()).argmax())])
    labels = S[:, exemplar_idx].argmax(axis=1)
    labels[exemplar_idx] = np.arange(exemplar_idx.size)  # exemplars belong to themselves
    return ClusterResult(labels=labels.astype(np.int64), exemplars=exemplar_idx.astype(np.int64),
                         converged=converged, iterations=it)


# ---------------------------------------------------------------------------
# clustering quality
# ---------------------------------------------------------------------------

@dataclass
class ClusterReport:
    nmi: float
    homogeneity: float
    completeness: float
    num_clusters: int

    def to_dict(self) -> dict:
        return {"nmi": self.nmi, "homogeneity": self.homogeneity,
                "completeness": self.completeness, "num_clusters": self.num_clusters}


def _entropy(counts: np.ndarray, total: int) -> float:
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def cluster_metrics(predicted, truth) -> ClusterReport:
    """NMI (arithmetic-mean normalization), homogeneity, completeness."""
    predicted = list(predicted)
    truth = list(truth)
    if len(predicted) != len(truth):
        raise EvaluationError(f"label lengths differ: {len(predicted)} vs {len(truth)}")
    if not predicted:
        raise EvaluationError("empty labelings")
    n = len(predicted)
    pred_ids = {lbl: i for i, lbl in enumerate(dict.fromkeys(predicted))}
    true_ids = {lbl: i for i, lbl in enumerate(dict.fromkeys(truth))}
    table = np.zeros((len(true_ids), len(pred_ids)))
    for t, p in zip(truth, predicted):
        table[true_ids[t], pred_ids[p]] += 1

    h_true = _entropy(table.sum(axis=1), n)
    h_pred = _entropy(table.sum(axis=0), n)
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(n * table[nz] / outer[nz])).sum())
    mi = max(mi, 0.0)

    h_true_given_pred = h_true - mi
    h_pred_given_true = h_pred - mi
    homogeneity = 1.0 if h_true == 0.0 else 1.0 - h_true_given_pred / h_true
    completeness = 1.0 if h_pred == 0.0 else 1.0 - h_pred_given_true / h_pred
    nmi = 1.0 if (h_true + h_pred) == 0.0 else 2.0 * mi / (h_true + h_pred)
    clip = lambda v: float(min(1.0, max(0.0, v)))
    return ClusterReport(nmi=clip(nmi), homogeneity=clip(homogeneity),
                         completeness=clip(completeness), num_clusters=len(pred_ids))


def cluster_episodes(enc: EncoderParams, vocab: Vocabulary, episodes: list[Episode],
                     damping: float = 0.5, preference: float | None = None,
                     max_iter: int = 1000, threads: int = 1) -> tuple[ClusterReport, ClusterResult]:
    """Embed episodes, cluster by cosine similarity, score against true authors."""
    emb = embed_all(enc, vocab, episodes, threads=threads)
    S = similarity_matrix(emb, emb, "cosine")
    result = affinity_propagation(S, damping=damping, preference=preference, max_iter=max_iter)
    report = cluster_metrics(result.labels.tolist(), [ep.user_id for ep in episodes])
    return report, result


# ---------------------------------------------------------------------------
# pair verification
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    method: str
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {"method": self.method, "train_accuracy": self.train_accuracy,
                "val_accuracy": self.val_accuracy, "test_accuracy": self.test_accuracy,
                "threshold": self.threshold}


def _auto_split(n: int) -> list[str]:
    # deterministic contiguous 50/25/25 blocks
    train_end = max(1, n // 2)
    val_end = max(train_end + 1, (3 * n) // 4)
    return ["train" if i < train_end else "val" if i < val_end else "test" for i in range(n)]


def _pair_features(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    cos = np.einsum("ij,ij->i", za, zb) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
    return np.concatenate([np.abs(za - zb), za * zb, cos[:, None]], axis=1)


def verify_pairs(enc: EncoderParams, vocab: Vocabulary,
                 pairs: list[tuple[Episode, Episode, bool]], method: str = "cosine",
                 splits: list[str] | None = None, seed: int = 0,
                 epochs: int = 300, lr: float = 0.05, threads: int = 1) -> VerificationReport:
    """Same-author pair classification on frozen embeddings.

    ``cosine``: pick the validation-best cosine threshold, report test accuracy.
    ``mlp``: one-hidden-layer classifier on [|za-zb|, za*zb, cos], binary cross
    entropy, validation-best epoch snapshot.
    """
    if not pairs:
        raise EvaluationError("no pairs given")
    za = embed_all(enc, vocab, [a for a, _, _ in pairs], threads=threads)
    zb = embed_all(enc, vocab, [b for _, b, _ in pairs], threads=threads)
    y = np.array([bool(s) for _, _, s in pairs], dtype=np.float64)
    return verify_pair_embeddings(za, zb, y, method=method, splits=splits,
                                  seed=seed, epochs=epochs, lr=lr)


def verify_pair_embeddings(za: np.ndarray, zb: np.ndarray, y: np.ndarray,
                           method: str = "cosine", splits: list[str] | None = None,
                           seed: int = 0, epochs: int = 300, lr: float = 0.05) -> VerificationReport:
    if method not in ("cosine", "mlp"):
        raise EvaluationError(f"unknown verification method {method!r}")
    if len(za) == 0:
        raise EvaluationError("no pairs given")
    splits = splits or _auto_split(len(za))
    if len(splits) != len(za):
        raise EvaluationError("splits length mismatch")
    masks = {name: np.array([s == name for s in splits]) for name in ("train", "val", "test")}
    empty = [name for name, m in masks.items() if not m.any()]
    if empty:
        raise EvaluationError(f"empty split(s): {empty}")
    y = np.asarray(y, dtype=np.float64)

    if method == "cosine":
        cos = np.einsum("ij,ij->i", za, zb) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
        cand = np.unique(cos[masks["val"]])
        thresholds = np.concatenate([[cand[0] - 1e-9], (cand[:-1] + cand[1:]) / 2.0, [cand[-1] + 1e-9]])
        accs = [((cos[masks["val"]] >= t) == y[masks["val"]].astype(bool)).mean() for t in thresholds]
        best = int(np.argmax(accs))  # first max: lowest threshold on ties
        tau = float(thresholds[best])
        acc = {name: float(((cos[m] >= tau) == y[m].astype(bool)).mean()) for name, m in masks.items()}
        return VerificationReport(method="cosine", train_accuracy=acc["train"],
                                  val_accuracy=acc["val"], test_accuracy=acc["test"], threshold=tau)

    feats = _pair_features(za, zb)
    mu = feats[masks["train"]].mean(axis=0)
    sd = feats[masks["train"]].std(axis=0)
    sd[sd == 0] = 1.0
    feats = (feats - mu) / sd

    rng = np.random.default_rng(seed)
    dim = feats.shape[1]
    bound = math.sqrt(6.0 / (dim + 64))
    params = {
        "w1": Tensor(rng.uniform(-bound, bound, size=(dim, 64)), requires_grad=True),
        "b1": Tensor(np.zeros(64), requires_grad=True),
        "w2": Tensor(rng.uniform(-math.sqrt(6.0 / 65), math.sqrt(6.0 / 65), size=(64, 1)), requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    }

    def logits_of(x: np.ndarray) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(Tensor(x), params["w1"]), params["b1"]))
        return ad.reshape(ad.add(ad.matmul(h, params["w2"]), params["b2"]), (x.shape[0],))

    def bce(logits: Tensor, target: np.ndarray) -> Tensor:
        # stable: relu(x) - x*y + log(1 + exp(-|x|))
        absx = ad.add(ad.relu(logits), ad.relu(ad.mul(logits, Tensor(-1.0))))
        soft = ad.log(ad.add(Tensor(1.0), ad.exp(ad.mul(absx, Tensor(-1.0)))))
        per = ad.add(ad.sub(ad.relu(logits), ad.mul(logits, Tensor(target))), soft)
        return ad.tmean(per)

    x_train, y_train = feats[masks["train"]], y[masks["train"]]
    best_val, best_state = -1.0, None
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    for _ in range(epochs):
        for p in params.values():
            p.grad = None
        loss = bce(logits_of(x_train), y_train)
        loss.backward()
        for k, p in params.items():
            velocity[k] = 0.9 * velocity[k] + p.grad
            p.data -= lr * velocity[k]
        with ad.no_grad():
            val_pred = logits_of(feats[masks["val"]]).data > 0
        val_acc = float((val_pred == y[masks["val"]].astype(bool)).mean())
        if val_acc > best_val:
            best_val = val_acc
            best_state = {k: p.data.copy() for k, p in params.items()}
    for k, p in params.items():
        p.data = best_state[k]

    acc = {}
    with ad.no_grad():
        for name, m in masks.items():
            pred = logits_of(feats[m]).data > 0
            acc[name] = float((pred == y[m].astype(bool)).mean())
    return VerificationReport(method="mlp", train_accuracy=acc["train"],
                              val_accuracy=acc["val"], test_accuracy=acc["test"])
