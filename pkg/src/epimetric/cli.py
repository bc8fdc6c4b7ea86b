"""Command-line pipeline: synthetic corpora, vocabularies, training, embedding,
ranking, clustering, verification, baselines, and episode-length sweeps.

Outputs are machine-readable (JSON/JSONL/CSV); every command writes the
resolved configuration and tool version next to its outputs; failures print a
JSON error object to stderr and exit nonzero with no partial outputs left
behind (files are written atomically via rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as cp
from .baselines import BASELINE_METHODS, BaselineError, baseline_rank
from .corpus import CorpusError, SynthConfig, SplitSpec, UserHistory
from .encoder import EncoderError, ModelConfig
from .evaluation import (EvaluationError, RankingTask, build_ranking_task, cluster_episodes,
                         embed_all, run_ranking, verify_pairs)
from .objectives import ObjectiveError
from .tokenizer import ContextVocab, Vocabulary, VocabError, learn_bpe
from .trainer import (CheckpointError, TrainConfig, TrainError, load_checkpoint,
                      save_checkpoint, train, vocab_fingerprint)

KNOWN_ERRORS = (CorpusError, VocabError, EncoderError, ObjectiveError, TrainError,
                CheckpointError, EvaluationError, BaselineError, OSError, ValueError, KeyError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# atomic outputs + resolved-config sidecars
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_sidecar(out: Path, command: str, resolved: dict) -> None:
    doc = {"tool_version": __version__, "command": command, "resolved": resolved}
    if out.is_dir():
        _atomic_write(out / "resolved_config.json", _dump_json(doc))
    else:
        _atomic_write(out.with_name(out.name + ".config.json"), _dump_json(doc))


def _report_payload(body: dict, resolved: dict) -> str:
    return _dump_json({"tool_version": __version__, "config": resolved, **body})


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# experiment config (train command)
# ---------------------------------------------------------------------------

CORPUS_KEYS = ("path", "min_actions", "max_actions", "train_fraction", "train_users")
TOKENIZER_KEYS = ("size", "contexts", "text_len")
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig)
                   if f.name not in ("vocab_size", "num_contexts"))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def resolve_experiment_config(doc: dict) -> dict:
    _check_keys(doc, ("corpus", "tokenizer", "model", "train"), "experiment config")
    corpus_sec = dict(doc.get("corpus") or {})
    _check_keys(corpus_sec, CORPUS_KEYS, "corpus section")
    if "path" not in corpus_sec:
        raise ConfigError("corpus section needs a 'path'")
    corpus_sec.setdefault("min_actions", 1)
    corpus_sec.setdefault("max_actions", 10**9)
    corpus_sec.setdefault("train_fraction", SplitSpec().train_fraction)
    corpus_sec.setdefault("train_users", None)

    tok = dict(doc.get("tokenizer") or {})
    _check_keys(tok, TOKENIZER_KEYS, "tokenizer section")
    tok.setdefault("size", 2048)
    tok.setdefault("contexts", 2048)
    tok.setdefault("text_len", 32)

    model = dict(doc.get("model") or {})
    _check_keys(model, MODEL_KEYS, "model section")
    probe = ModelConfig(vocab_size=2, num_contexts=2, **model)
    model = {k: v for k, v in probe.to_dict().items() if k not in ("vocab_size", "num_contexts")}

    train_sec = dict(doc.get("train") or {})
    _check_keys(train_sec, TRAIN_KEYS, "train section")
    train_sec = TrainConfig(**train_sec).to_dict()

    return {"corpus": corpus_sec, "tokenizer": tok, "model": model, "train": train_sec}


def _training_corpus(resolved: dict) -> tuple[cp.Corpus, cp.Corpus]:
    sec = resolved["corpus"]
    full = cp.ingest_jsonl(sec["path"])
    filtered = cp.filter_users(full, sec["min_actions"], sec["max_actions"])
    users = sorted(filtered)
    chosen = sec["train_users"]
    if chosen is None:
        selected = users
    elif isinstance(chosen, int):
        selected = users[:chosen]
    else:
        missing = [u for u in chosen if u not in filtered]
        if missing:
            raise ConfigError(f"train_users not in corpus after filtering: {missing[:3]}")
        selected = list(chosen)
    train_corpus = {
        u: UserHistory(u, cp.chronological_split(filtered[u], sec["train_fraction"])[0])
        for u in selected
    }
    return full, train_corpus


def build_vocab_from_corpus(corpus: cp.Corpus, size: int, contexts: int, text_len: int) -> Vocabulary:
    texts = [a.text for h in corpus.values() for a in h.actions]
    ctx = [a.context for h in corpus.values() for a in h.actions]
    return Vocabulary(subword=learn_bpe(texts, size),
                      context=ContextVocab.fit(ctx, K=contexts), T=text_len)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    doc = _load_json(args.config)
    fields = tuple(f.name for f in dataclasses.fields(SynthConfig))
    _check_keys(doc, fields, "synthetic corpus config")
    config = SynthConfig(**doc)
    corpus = cp.synth_corpus(config)
    out = Path(args.out)
    lines = []
    for user_id in corpus:
        for a in corpus[user_id].actions:
            lines.append(json.dumps({"user_id": user_id, "ts": a.timestamp, "text": a.text,
                                     "context": a.context}, ensure_ascii=False, sort_keys=True))
    _atomic_write(out, "\n".join(lines) + "\n")
    _write_sidecar(out, "synth", dataclasses.asdict(config))


def cmd_vocab(args) -> None:
    corpus = cp.ingest_jsonl(args.corpus)
    vocab = build_vocab_from_corpus(corpus, args.size, args.contexts, args.text_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    vocab.save(tmp)
    os.replace(tmp, out)
    resolved = {"corpus": str(args.corpus), "size": args.size, "contexts": args.contexts,
                "text_len": args.text_len, "fingerprint": vocab_fingerprint(vocab)}
    _write_sidecar(out, "vocab", resolved)


def cmd_train(args) -> None:
    resolved = resolve_experiment_config(_load_json(args.config))
    full, train_corpus = _training_corpus(resolved)
    tok = resolved["tokenizer"]
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab_from_corpus(train_corpus, tok["size"], tok["contexts"], tok["text_len"])
    model_config = ModelConfig(vocab_size=vocab.subword.size, num_contexts=vocab.context.size,
                               **resolved["model"])
    train_config = TrainConfig(**resolved["train"])
    result = train(train_corpus, vocab, model_config, train_config, progress=args.progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.encoder, result.head, vocab, train_config,
                    iteration=train_config.total_iters, velocity=result.velocity)
    vocab.save(out / "vocab.json")
    _atomic_write(out / "train_log.jsonl",
                  "\n".join(json.dumps(e, sort_keys=True) for e in result.log) + "\n")
    _atomic_write(out / "labels.json", _dump_json(result.labels))
    _write_sidecar(out, "train", resolved)


def _load_model(args) -> tuple:
    enc, head, manifest, _ = load_checkpoint(args.ckpt)
    vocab_path = args.vocab or (Path(args.ckpt) / "vocab.json")
    vocab = Vocabulary.load(vocab_path)
    if vocab_fingerprint(vocab) != manifest["vocab_sha256"]:
        raise CheckpointError(f"vocabulary {vocab_path} does not match the checkpoint fingerprint")
    return enc, head, manifest, vocab


def cmd_embed(args) -> None:
    enc, _, manifest, vocab = _load_model(args)
    episodes = cp.read_episodes_jsonl(args.episodes)
    matrix = embed_all(enc, vocab, episodes, batch_size=args.batch_size, threads=args.threads)
    out = Path(args.out)
    _atomic_write(out, matrix.astype("<f4").tobytes())
    meta = {"rows": matrix.shape[0], "dim": matrix.shape[1], "dtype": "<f4",
            "metric": manifest["metric"], "user_ids": [ep.user_id for ep in episodes]}
    _atomic_write(out.with_name(out.name + ".json"), _dump_json(meta))
    _write_sidecar(out, "embed", {"ckpt": str(args.ckpt), "episodes": str(args.episodes),
                                  "batch_size": args.batch_size})


def _episode_file_task(args, metric: str) -> RankingTask:
    queries = cp.read_episodes_jsonl(args.queries)
    targets = cp.read_episodes_jsonl(args.targets)
    return RankingTask(queries=[(ep, ep.user_id) for ep in queries],
                       targets=[(ep, ep.user_id) for ep in targets], metric=metric)


def cmd_rank(args) -> None:
    enc, _, manifest, vocab = _load_model(args)
    metric = args.metric or manifest["metric"]
    task = _episode_file_task(args, metric)
    report = run_ranking(enc, vocab, task, batch_size=args.batch_size, threads=args.threads)
    resolved = {"ckpt": str(args.ckpt), "queries": str(args.queries), "targets": str(args.targets),
                "metric": metric, "batch_size": args.batch_size, "threads": args.threads}
    out = Path(args.out)
    _atomic_write(out, _report_payload(report.to_dict(), resolved))
    tsv = "query_user\trank\n" + "\n".join(
        f"{author}\t{r}" for (_, author), r in zip(task.queries, report.ranks))
    _atomic_write(out.with_name(out.name + ".ranks.tsv"), tsv + "\n")
    _write_sidecar(out, "rank", resolved)


def cmd_cluster(args) -> None:
    enc, _, _, vocab = _load_model(args)
    corpus = cp.ingest_jsonl(args.corpus)
    rng = np.random.default_rng(args.seed)
    fraction = None if args.window == "all" else args.train_fraction
    episodes = cp.sample_user_episodes(corpus, args.episodes_per_user, args.length, rng,
                                       train_fraction=fraction)
    report, result = cluster_episodes(enc, vocab, episodes, damping=args.damping,
                                      preference=args.preference, max_iter=args.max_iter,
                                      threads=args.threads)
    resolved = {"ckpt": str(args.ckpt), "corpus": str(args.corpus),
                "episodes_per_user": args.episodes_per_user, "length": args.length,
                "damping": args.damping, "preference": args.preference,
                "window": args.window, "seed": args.seed, "max_iter": args.max_iter}
    body = report.to_dict()
    body.update({"num_episodes": len(episodes), "converged": result.converged,
                 "iterations": result.iterations})
    out = Path(args.out)
    _atomic_write(out, _report_payload(body, resolved))
    _write_sidecar(out, "cluster", resolved)


def cmd_verify(args) -> None:
    enc, _, _, vocab = _load_model(args)
    pairs = []
    splits: list[str] = []
    have_split = False
    with open(args.pairs, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            a = cp.episode_from_json({"user_id": obj["a"].get("user_id", "a"), **obj["a"]})
            b = cp.episode_from_json({"user_id": obj["b"].get("user_id", "b"), **obj["b"]})
            pairs.append((a, b, bool(obj["same"])))
            if "split" in obj:
                have_split = True
                splits.append(str(obj["split"]))
    report = verify_pairs(enc, vocab, pairs, method=args.method,
                          splits=splits if have_split else None, seed=args.seed,
                          threads=args.threads)
    resolved = {"ckpt": str(args.ckpt), "pairs": str(args.pairs), "method": args.method,
                "seed": args.seed}
    out = Path(args.out)
    _atomic_write(out, _report_payload(report.to_dict(), resolved))
    _write_sidecar(out, "verify", resolved)


def cmd_baseline(args) -> None:
    task = _episode_file_task(args, args.method)
    report = baseline_rank(task, args.method, scap_n=args.scap_n,
                           scap_profile_len=args.scap_profile_len)
    resolved = {"method": args.method, "queries": str(args.queries), "targets": str(args.targets),
                "scap_n": args.scap_n, "scap_profile_len": args.scap_profile_len}
    out = Path(args.out)
    _atomic_write(out, _report_payload(report.to_dict(), resolved))
    _write_sidecar(out, "baseline", resolved)


def cmd_sweep_length(args) -> None:
    enc, _, manifest, vocab = _load_model(args)
    corpus = cp.ingest_jsonl(args.corpus)
    metric = args.metric or manifest["metric"]
    lengths = [int(x) for x in args.lengths.split(",") if x]
    if not lengths:
        raise ConfigError("no episode lengths given")
    query_users = None
    if args.num_queries is not None:
        query_users = sorted(corpus)[: args.num_queries]
    rows = ["length,recall_at_8"]
    for L in lengths:
        task = build_ranking_task(corpus, L=L, rng=np.random.default_rng(args.seed),
                                  metric=metric, query_users=query_users,
                                  train_fraction=args.train_fraction)
        report = run_ranking(enc, vocab, task, batch_size=args.batch_size, threads=args.threads)
        rows.append(f"{L},{report.recall[8]}")
    resolved = {"ckpt": str(args.ckpt), "corpus": str(args.corpus), "lengths": lengths,
                "metric": metric, "seed": args.seed, "num_queries": args.num_queries,
                "train_fraction": args.train_fraction, "batch_size": args.batch_size}
    out = Path(args.out)
    _atomic_write(out, "\n".join(rows) + "\n")
    _write_sidecar(out, "sweep-length", resolved)


def cmd_make_task(args) -> None:
    corpus = cp.ingest_jsonl(args.corpus)
    rng = np.random.default_rng(args.seed)
    queries, targets = cp.query_target_episodes(corpus, args.length, rng, args.train_fraction,
                                                query_boundary=args.query_boundary)
    users = sorted(queries)
    if args.num_queries is not None:
        users = users[: args.num_queries]
    cp.write_episodes_jsonl([queries[u] for u in users], args.out_queries)
    cp.write_episodes_jsonl([targets[u] for u in sorted(targets)], args.out_targets)
    resolved = {"corpus": str(args.corpus), "length": args.length, "seed": args.seed,
                "num_queries": args.num_queries, "train_fraction": args.train_fraction,
                "query_boundary": args.query_boundary}
    _write_sidecar(Path(args.out_queries), "make-task", resolved)


def cmd_sample_episodes(args) -> None:
    corpus = cp.ingest_jsonl(args.corpus)
    rng = np.random.default_rng(args.seed)
    fraction = None if args.window == "all" else args.train_fraction
    episodes = cp.sample_user_episodes(corpus, args.per_user, args.length, rng,
                                       train_fraction=fraction)
    cp.write_episodes_jsonl(episodes, args.out)
    resolved = {"corpus": str(args.corpus), "per_user": args.per_user, "length": args.length,
                "window": args.window, "seed": args.seed, "train_fraction": args.train_fraction}
    _write_sidecar(Path(args.out), "sample-episodes", resolved)


def cmd_make_pairs(args) -> None:
    corpus = cp.ingest_jsonl(args.corpus)
    rng = np.random.default_rng(args.seed)
    eligible = [u for u in sorted(corpus) if len(corpus[u]) >= 2 * args.length]
    if len(eligible) < 2:
        raise CorpusError("need at least two users with enough actions for pairs")
    lines = []
    for i in range(args.num_pairs):
        same = i % 2 == 0
        if same:
            u = eligible[int(rng.integers(0, len(eligible)))]
            acts = corpus[u].actions
            half = len(acts) // 2
            a = cp.sample_episode(UserHistory(u, acts[:half]), args.length, rng)
            b = cp.sample_episode(UserHistory(u, acts[half:]), args.length, rng)
        else:
            iu, jv = rng.choice(len(eligible), size=2, replace=False)
            a = cp.sample_episode(corpus[eligible[int(iu)]], args.length, rng)
            b = cp.sample_episode(corpus[eligible[int(jv)]], args.length, rng)
        lines.append(json.dumps({
            "a": {"user_id": a.user_id, "actions": [
                {"ts": x.timestamp, "text": x.text, "context": x.context} for x in a.actions]},
            "b": {"user_id": b.user_id, "actions": [
                {"ts": x.timestamp, "text": x.text, "context": x.context} for x in b.actions]},
            "same": same}, ensure_ascii=False, sort_keys=True))
    out = Path(args.out)
    _atomic_write(out, "\n".join(lines) + "\n")
    _write_sidecar(out, "make-pairs", {"corpus": str(args.corpus), "length": args.length,
                                       "num_pairs": args.num_pairs, "seed": args.seed})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("EPIMETRIC_THREADS", "1")))
    except ValueError:
        return 1


def _add_model_args(p) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: ckpt/vocab.json)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="embedding worker threads (default: EPIMETRIC_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epimetric",
                                     description="episode embeddings for user comparison")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="learn subword + context vocabularies")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--contexts", type=int, default=2048)
    p.add_argument("--text-len", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train an encoder per an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", default=None, help="reuse an existing vocabulary file")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="dump an embedding matrix for episodes")
    _add_model_args(p)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rank", help="open-world author ranking report")
    _add_model_args(p)
    p.add_argument("--queries", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--metric", choices=["cosine", "euclidean"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("cluster", help="affinity-propagation clustering report")
    _add_model_args(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--episodes-per-user", type=int, default=5)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--damping", type=float, default=0.5)
    p.add_argument("--preference", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--window", choices=["late", "all"], default="late")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("verify", help="same-author pair verification report")
    _add_model_args(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--method", choices=["cosine", "mlp"], default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("baseline", help="classical baseline ranking report")
    p.add_argument("--method", choices=list(BASELINE_METHODS), required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--scap-n", type=int, default=3)
    p.add_argument("--scap-profile-len", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep-length", help="recall@8 across episode lengths (CSV)")
    _add_model_args(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lengths", required=True, help="comma-separated, e.g. 4,8,16")
    p.add_argument("--metric", choices=["cosine", "euclidean"], default=None)
    p.add_argument("--num-queries", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_length)

    p = sub.add_parser("make-task", help="materialize query/target episode files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--num-queries", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--query-boundary", type=int, default=None,
                   help="timestamp splitting held-out actions into query/target halves")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-queries", required=True)
    p.add_argument("--out-targets", required=True)
    p.set_defaults(func=cmd_make_task)

    p = sub.add_parser("sample-episodes", help="sample per-user episodes to a file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--per-user", type=int, default=1)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--window", choices=["late", "all"], default="late")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_episodes)

    p = sub.add_parser("make-pairs", help="sample balanced same/different episode pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--num-pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except KNOWN_ERRORS as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
