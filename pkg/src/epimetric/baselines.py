"""Classical comparison methods: TF-IDF episode vectors (word, character
trigram, or context bag) ranked by cosine, and SCAP top-n-gram profile
intersection. Both share the ranking harness of the evaluation module."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Episode
from .evaluation import DEFAULT_KS, RankingReport, RankingTask, rank, ranking_metrics

TFIDF_MODES = ("word", "char_trigram", "context_bag")


class BaselineError(ValueError):
    pass


def episode_terms(episode: Episode, mode: str) -> list[str]:
    """The bag of terms a ranking method sees for one episode."""
    if mode == "word":
        return " ".join(a.text for a in episode.actions).split()
    if mode == "char_trigram":
        text = " ".join(a.text for a in episode.actions)
        return [text[i : i + 3] for i in range(len(text) - 2)]
    if mode == "context_bag":
        return [a.context for a in episode.actions]
    raise BaselineError(f"unknown tf-idf mode {mode!r} (expected one of {TFIDF_MODES})")


@dataclass
class TfidfIndex:
    """Smoothed-idf weighting fitted on target-side documents, L2-normalized:
    tf raw count, idf = ln((1+N)/(1+df)) + 1."""

    mode: str
    num_docs: int = 0
    df: Counter = field(default_factory=Counter)

    @classmethod
    def fit(cls, episodes: list[Episode], mode: str) -> "TfidfIndex":
        index = cls(mode=mode)
        for ep in episodes:
            index.num_docs += 1
            for term in set(episode_terms(ep, mode)):
                index.df[term] += 1
        return index

    def idf(self, term: str) -> float:
        return math.log((1 + self.num_docs) / (1 + self.df.get(term, 0))) + 1.0

    def vectorize(self, episode: Episode) -> dict[str, float]:
        counts = Counter(episode_terms(episode, self.mode))
        vec = {term: tf * self.idf(term) for term, tf in counts.items()}
        norm = math.sqrt(sum(v * v for v in vec.values()))
        if norm == 0.0:
            return {}
        return {term: v / norm for term, v in vec.items()}


def tfidf_cosine(a: dict[str, float], b: dict[str, float]) -> float:
    if len(b) < len(a):
        a, b = b, a
    return sum(v * b.get(term, 0.0) for term, v in a.items())


# ---------------------------------------------------------------------------
# SCAP profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScapProfile:
    ngrams: frozenset[str]


def scap_profile(episode: Episode, n: int = 3, profile_len: int = 64) -> ScapProfile:
    """Top ``profile_len`` character n-grams by frequency; frequency ties broken
    lexicographically. Empty text gives an empty profile."""
    text = " ".join(a.text for a in episode.actions)
    grams = Counter(text[i : i + n] for i in range(len(text) - n + 1))
    ranked = sorted(grams.items(), key=lambda kv: (-kv[1], kv[0]))
    return ScapProfile(frozenset(g for g, _ in ranked[:profile_len]))


def scap_similarity(a: ScapProfile, b: ScapProfile) -> int:
    return len(a.ngrams & b.ngrams)


# ---------------------------------------------------------------------------
# shared ranking harness
# ---------------------------------------------------------------------------

BASELINE_METHODS = ("tfidf-word", "tfidf-char3", "tfidf-context", "scap")


def baseline_scores(task: RankingTask, method: str, scap_n: int = 3,
                    scap_profile_len: int = 64) -> np.ndarray:
    """(Q, N) similarity matrix for one baseline method over a ranking task."""
    queries = [ep for ep, _ in task.queries]
    targets = [ep for ep, _ in task.targets]
    if method == "scap":
        qp = [scap_profile(ep, scap_n, scap_profile_len) for ep in queries]
        tp = [scap_profile(ep, scap_n, scap_profile_len) for ep in targets]
        return np.array([[scap_similarity(q, t) for t in tp] for q in qp], dtype=np.float64)
    mode = {"tfidf-word": "word", "tfidf-char3": "char_trigram", "tfidf-context": "context_bag"}.get(method)
    if mode is None:
        raise BaselineError(f"unknown baseline method {method!r} (expected one of {BASELINE_METHODS})")
    index = TfidfIndex.fit(targets, mode)
    qv = [index.vectorize(ep) for ep in queries]
    tv = [index.vectorize(ep) for ep in targets]
    return np.array([[tfidf_cosine(q, t) for t in tv] for q in qv], dtype=np.float64)


def baseline_rank(task: RankingTask, method: str, ks=DEFAULT_KS, scap_n: int = 3,
                  scap_profile_len: int = 64) -> RankingReport:
    scores = baseline_scores(task, method, scap_n, scap_profile_len)
    true_idx = np.array([task.target_index[a] for _, a in task.queries])
    report = ranking_metrics(rank(scores, true_idx), ks)
    report.num_targets = len(task.targets)
    report.metric = method
    return report
