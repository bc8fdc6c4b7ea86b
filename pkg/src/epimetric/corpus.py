"""Corpus model: user actions and histories, ingestion, splits, episode sampling,
and a deterministic synthetic-corpus generator for desk-scale experiments."""

from __future__ import annotations

import json
import logging
import math
import string
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

log = logging.getLogger(__name__)

UNK_CONTEXT = "unk"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    """One user event: when, what was written, and in which context."""

    timestamp: int
    text: str
    context: str = UNK_CONTEXT

    def __post_init__(self):
        if self.timestamp < 0:
            raise CorpusError(f"negative timestamp {self.timestamp}")
        if not self.context:
            object.__setattr__(self, "context", UNK_CONTEXT)


@dataclass
class UserHistory:
    user_id: str
    actions: list[Action] = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


@dataclass
class Episode:
    """A contiguous, chronologically ordered window of one user's actions."""

    user_id: str
    actions: list[Action]

    def __len__(self):
        return len(self.actions)


@dataclass
class SplitSpec:
    train_fraction: float = 0.75
    min_actions: int = 100
    max_actions: int = 500
    # optional timestamp separating query-side from target-side held-out actions
    query_boundary: int | None = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise CorpusError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.min_actions > self.max_actions:
            raise CorpusError("min_actions > max_actions")


Corpus = dict[str, UserHistory]


def _parse_timestamp(ts) -> int:
    if isinstance(ts, bool):
        raise CorpusError(f"bad timestamp {ts!r}")
    if isinstance(ts, (int, float)):
        return int(ts)
    if isinstance(ts, str):
        text = ts.replace("Z", "+00:00") if ts.endswith("Z") else ts
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    raise CorpusError(f"bad timestamp {ts!r}")


def ingest_jsonl(path, strict: bool = False) -> Corpus:
    """Read one action per line ({user_id, ts, text, context}); group and sort per user.

    Malformed lines are skipped with a warning (fatal under ``strict``).
    """
    corpus: Corpus = {}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                action = Action(
                    timestamp=_parse_timestamp(obj["ts"]),
                    text=str(obj.get("text", "")),
                    context=str(obj.get("context") or UNK_CONTEXT),
                )
                user_id = str(obj["user_id"])
            except (KeyError, ValueError, TypeError) as exc:
                if strict:
                    raise CorpusError(f"{path}:{lineno}: {exc}") from exc
                skipped += 1
                log.warning("%s:%d: skipping malformed line (%s)", path, lineno, exc)
                continue
            corpus.setdefault(user_id, UserHistory(user_id)).actions.append(action)
    for history in corpus.values():
        history.actions.sort(key=lambda a: a.timestamp)
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    return corpus


def write_jsonl(corpus: Corpus, path) -> None:
    """Persist a corpus back to the action-per-line schema (lossless)."""
    with open(path, "w", encoding="utf-8") as fh:
        for user_id in corpus:
            for a in corpus[user_id].actions:
                fh.write(json.dumps(
                    {"user_id": user_id, "ts": a.timestamp, "text": a.text, "context": a.context},
                    ensure_ascii=False, sort_keys=True))
                fh.write("\n")


def filter_users(corpus: Corpus, min_actions: int, max_actions: int) -> Corpus:
    """Keep exactly the users with min_actions <= |actions| <= max_actions."""
    if min_actions < 1:
        raise CorpusError("min_actions must be >= 1")
    return {u: h for u, h in corpus.items() if min_actions <= len(h) <= max_actions}


def chronological_split(history: UserHistory, fraction: float) -> tuple[list[Action], list[Action]]:
    """(first ceil(fraction*n) actions, remainder); concatenation reproduces the input."""
    if not 0.0 < fraction < 1.0:
        raise CorpusError(f"fraction must be in (0,1), got {fraction}")
    cut = math.ceil(fraction * len(history.actions))
    return history.actions[:cut], history.actions[cut:]


def sample_episode(history: UserHistory, L: int, rng: np.random.Generator) -> Episode:
    """Uniformly random contiguous window of length L from one user's history."""
    return _sample_window(history.user_id, history.actions, L, rng)


def _sample_window(user_id: str, actions: list[Action], L: int, rng: np.random.Generator) -> Episode:
    n = len(actions)
    if n < L:
        raise CorpusError(f"user {user_id!r} has {n} actions, fewer than episode length {L}")
    start = int(rng.integers(0, n - L + 1))
    return Episode(user_id, actions[start : start + L])


def author_labels(corpus: Corpus) -> dict[str, int]:
    """Dense 0..Y-1 label per user, deterministic (sorted user ids)."""
    return {u: i for i, u in enumerate(sorted(corpus))}


def make_batch(corpus: Corpus, B: int, L: int, rng: np.random.Generator,
               labels: dict[str, int] | None = None) -> list[tuple[Episode, int]]:
    """B training examples: users uniform with replacement, one episode each."""
    eligible = sorted(u for u, h in corpus.items() if len(h) >= L)
    if not eligible:
        raise CorpusError(f"no users with at least {L} actions")
    if labels is None:
        labels = author_labels(corpus)
    batch = []
    for _ in range(B):
        user = eligible[int(rng.integers(0, len(eligible)))]
        batch.append((sample_episode(corpus[user], L, rng), labels[user]))
    return batch


# ---------------------------------------------------------------------------
# evaluation episode assembly
# ---------------------------------------------------------------------------

def query_target_episodes(corpus: Corpus, L: int, rng: np.random.Generator,
                          train_fraction: float = 0.75,
                          query_boundary: int | None = None,
                          ) -> tuple[dict[str, Episode], dict[str, Episode]]:
    """Per user: one query episode from the first half of the held-out window and
    one target episode from the second half. The halves split at the action
    count midpoint, or at ``query_boundary`` (a timestamp) when given. Users
    whose held-out window cannot fit both are skipped."""
    queries: dict[str, Episode] = {}
    targets: dict[str, Episode] = {}
    for user_id in sorted(corpus):
        _, late = chronological_split(corpus[user_id], train_fraction)
        if query_boundary is None:
            mid = len(late) // 2
        else:
            mid = sum(1 for a in late if a.timestamp < query_boundary)
        if mid < L or len(late) - mid < L:
            log.warning("user %s: held-out window too short for L=%d, skipped", user_id, L)
            continue
        queries[user_id] = _sample_window(user_id, late[:mid], L, rng)
        targets[user_id] = _sample_window(user_id, late[mid:], L, rng)
    if not queries:
        raise CorpusError("no user has a held-out window long enough for query/target episodes")
    return queries, targets


def sample_user_episodes(corpus: Corpus, n_per_user: int, L: int, rng: np.random.Generator,
                         train_fraction: float | None = 0.75) -> list[Episode]:
    """n episodes of length L per user, drawn from the held-out split
    (or the full history when train_fraction is None)."""
    episodes = []
    for user_id in sorted(corpus):
        pool = corpus[user_id].actions if train_fraction is None else \
            chronological_split(corpus[user_id], train_fraction)[1]
        if len(pool) < L:
            log.warning("user %s: only %d held-out actions, skipped", user_id, len(pool))
            continue
        for _ in range(n_per_user):
            episodes.append(_sample_window(user_id, pool, L, rng))
    if not episodes:
        raise CorpusError("no user has enough actions to sample episodes")
    return episodes


def write_episodes_jsonl(episodes: list[Episode], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps({
                "user_id": ep.user_id,
                "actions": [{"ts": a.timestamp, "text": a.text, "context": a.context} for a in ep.actions],
            }, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def episode_from_json(obj: dict) -> Episode:
    actions = [Action(_parse_timestamp(a["ts"]), str(a.get("text", "")),
                      str(a.get("context") or UNK_CONTEXT)) for a in obj["actions"]]
    return Episode(str(obj["user_id"]), actions)


def read_episodes_jsonl(path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                episodes.append(episode_from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return episodes


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Generator for corpora whose authors carry controllable identity signal.

    Each author gets a persistent signature: a private multinomial over
    signature words (mixed with a shared background distribution at weight
    ``signature_strength``), a preferred hour band, and a context multinomial.
    With ``disjoint_signatures`` each author draws from a private word pool, so
    at signature_strength=1 authors share no tokens at all; otherwise authors
    draw author-specific mixtures over a shared signature vocabulary, which
    leaves word overlap between authors and makes identity a distributional
    rather than a set-membership signal.
    """

    num_authors: int
    actions_per_author: int
    signature_strength: float = 0.8
    seed: int = 0
    signature_vocab_size: int = 400
    signature_support: int = 40
    signature_concentration: float = 1.0
    disjoint_signatures: bool = False
    background_vocab_size: int = 200
    background_zipf: float = 1.1
    tokens_per_action: int = 8
    num_contexts: int = 32
    contexts_per_author: int = 4
    hour_band_width: int = 8
    disjoint_hour_bands: bool = False
    start_time: int = 1_600_000_000
    mean_gap_seconds: float = 7200.0

    def validate(self) -> None:
        if self.num_authors < 2:
            raise CorpusError("num_authors must be >= 2")
        if self.actions_per_author < 1:
            raise CorpusError("actions_per_author must be >= 1")
        if not 0.0 <= self.signature_strength <= 1.0:
            raise CorpusError(f"signature_strength must be in [0,1], got {self.signature_strength}")
        if not 0 < self.hour_band_width <= 24:
            raise CorpusError("hour_band_width must be in (0, 24]")
        if self.signature_support < 1 or self.signature_vocab_size < self.signature_support:
            raise CorpusError("need signature_vocab_size >= signature_support >= 1")


def _random_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words = []
    while len(words) < n:
        length = int(rng.integers(4, 9))
        w = "".join(rng.choice(letters, size=length))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synth_corpus(config: SynthConfig) -> Corpus:
    """Deterministic synthetic corpus; identical seeds give byte-identical corpora."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    taken: set[str] = set()
    background = _random_words(rng, config.background_vocab_size, taken)
    sig_vocab_size = (config.num_authors * config.signature_support
                      if config.disjoint_signatures else config.signature_vocab_size)
    signature_vocab = _random_words(rng, sig_vocab_size, taken)

    bg_weights = 1.0 / np.arange(1, config.background_vocab_size + 1) ** config.background_zipf
    bg_weights /= bg_weights.sum()

    contexts = [f"c{j:03d}" for j in range(config.num_contexts)]
    n_bands = max(1, 24 // config.hour_band_width)

    corpus: Corpus = {}
    for a in range(config.num_authors):
        if config.disjoint_signatures:
            support = list(range(a * config.signature_support, (a + 1) * config.signature_support))
        else:
            support = sorted(rng.choice(sig_vocab_size, size=config.signature_support, replace=False).tolist())
        sig_words = [signature_vocab[i] for i in support]
        sig_weights = rng.dirichlet(np.full(len(support), config.signature_concentration))

        k = min(config.contexts_per_author, config.num_contexts)
        ctx_ids = rng.choice(config.num_contexts, size=k, replace=False)
        ctx_weights = rng.dirichlet(np.ones(k))
        author_contexts = [contexts[i] for i in ctx_ids]

        if config.disjoint_hour_bands:
            band_start = (a % n_bands) * config.hour_band_width
        else:
            band_start = int(rng.integers(0, 24))
        band_hours = {(band_start + h) % 24 for h in range(config.hour_band_width)}

        t = float(config.start_time + a * 97)  # per-author start offset
        actions = []
        for _ in range(config.actions_per_author):
            t += rng.exponential(config.mean_gap_seconds)
            while int(t // 3600) % 24 not in band_hours:  # rejection into the hour band
                t += rng.exponential(config.mean_gap_seconds)
            n_tokens = 1 + int(rng.poisson(max(0, config.tokens_per_action - 1)))
            tokens = []
            for _ in range(n_tokens):
                if rng.random() < config.signature_strength:
                    tokens.append(sig_words[int(rng.choice(len(sig_words), p=sig_weights))])
                else:
                    tokens.append(background[int(rng.choice(config.background_vocab_size, p=bg_weights))])
            context = author_contexts[int(rng.choice(k, p=ctx_weights))]
            actions.append(Action(timestamp=int(t), text=" ".join(tokens), context=context))
        corpus[f"author{a:04d}"] = UserHistory(f"author{a:04d}", actions)
    return corpus
