"""Training loop: batched episode sampling, SGD with momentum under a
piecewise-constant learning-rate schedule, JSON-lines logging, and binary
checkpoints (little-endian float32 blob + JSON manifest)."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .corpus import Corpus, author_labels, make_batch
from .encoder import EncoderParams, ModelConfig, encode_episode_batch, init_params
from .objectives import ObjectiveHead, make_head
from .tokenizer import Vocabulary

CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 20_000
    batch_size: int = 64
    episode_len: int = 16
    lr_initial: float = 0.1
    lr_drops: list[tuple[int, float]] | None = None  # None: factor-10 drops at 50% and 75%
    momentum: float = 0.9
    loss: str = "am"
    margin: float = 0.5
    scale: float = 64.0
    seed: int = 0
    clip_norm: float | None = None
    warmup_iters: int = 0  # optional linear ramp from 0 to lr_initial
    log_every: int = 100

    def __post_init__(self):
        if self.loss not in ("am", "sm"):
            raise TrainError(f"loss must be 'am' or 'sm', got {self.loss!r}")
        if self.warmup_iters < 0 or self.warmup_iters >= self.total_iters:
            if self.warmup_iters != 0:
                raise TrainError(f"warmup_iters must lie in [0, total_iters), got {self.warmup_iters}")
        if self.lr_drops is None:
            marks = {self.total_iters // 2, self.total_iters * 3 // 4}
            self.lr_drops = [(i, 10.0) for i in sorted(marks) if 0 < i < self.total_iters]
        self.lr_drops = [(int(i), float(f)) for i, f in self.lr_drops]
        iters = [i for i, _ in self.lr_drops]
        if iters != sorted(set(iters)) or any(i >= self.total_iters for i in iters) or any(i < 0 for i in iters):
            raise TrainError(f"lr_drops must be strictly increasing and < total_iters, got {self.lr_drops}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Initial rate divided once per passed drop point (a drop iteration itself
    already uses the dropped rate); optional linear warmup ramps up front."""
    lr = config.lr_initial
    for drop_iter, factor in config.lr_drops:
        if iteration >= drop_iter:
            lr /= factor
    if config.warmup_iters and iteration < config.warmup_iters:
        lr *= (iteration + 1) / config.warmup_iters
    return lr


def sgd_momentum_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray],
                      lr: float, momentum: float) -> None:
    """Classic momentum: v <- momentum*v + g; p <- p - lr*v. In place."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        velocity[name] = v
        p.data -= lr * v


def _clip_gradients(params: dict[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


class _ActionCache:
    """Tokenizes every corpus action once into per-user arrays; episode batches
    become array slices located via action identity."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.user_text: dict[str, np.ndarray] = {}
        self.user_hour: dict[str, np.ndarray] = {}
        self.user_ctx: dict[str, np.ndarray] = {}
        self.position: dict[int, tuple[str, int]] = {}

    def warm(self, corpus: Corpus) -> None:
        for user_id, history in corpus.items():
            n = len(history.actions)
            text = np.empty((n, self.vocab.T), dtype=np.int64)
            hour = np.empty(n, dtype=np.int64)
            ctx = np.empty(n, dtype=np.int64)
            for j, a in enumerate(history.actions):
                e = self.vocab.encode_action(a.text, a.timestamp, a.context)
                text[j], hour[j], ctx[j] = e.text_ids, e.hour_id, e.context_id
                self.position[id(a)] = (user_id, j)
            self.user_text[user_id] = text
            self.user_hour[user_id] = hour
            self.user_ctx[user_id] = ctx

    def arrays(self, episodes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        spans = []
        for ep in episodes:
            user_id, start = self.position[id(ep.actions[0])]
            spans.append((user_id, start, len(ep)))
        text = np.stack([self.user_text[u][s : s + l] for u, s, l in spans])
        hour = np.stack([self.user_hour[u][s : s + l] for u, s, l in spans])
        ctx = np.stack([self.user_ctx[u][s : s + l] for u, s, l in spans])
        return text, hour, ctx


@dataclass
class TrainResult:
    encoder: EncoderParams
    head: ObjectiveHead
    log: list[dict] = field(default_factory=list)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)


def train(corpus: Corpus, vocab: Vocabulary, model_config: ModelConfig,
          config: TrainConfig, progress: bool = False) -> TrainResult:
    """Joint optimization of the encoder and the classification head.

    Every training user needs at least ``episode_len`` actions; users become
    dense class labels. All randomness (init, batches, dropout) derives from
    ``config.seed``, so repeated runs are bit-identical.
    """
    model_config.validate_for_T(vocab.T)
    labels = author_labels(corpus)
    short = [u for u, h in corpus.items() if len(h) < config.episode_len]
    if short:
        raise TrainError(f"{len(short)} user(s) have fewer than {config.episode_len} actions, e.g. {short[:3]}")
    num_authors = len(labels)

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    enc = init_params(model_config, seed=config.seed)
    head = make_head(config.loss, num_authors, model_config.D, seed=int(seeds[0].generate_state(1)[0]),
                     margin=config.margin, scale=config.scale)
    batch_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    trainable = dict(enc.trainable())
    trainable["head.W"] = head.W
    velocity: dict[str, np.ndarray] = {}
    cache = _ActionCache(vocab)
    cache.warm(corpus)

    result = TrainResult(encoder=enc, head=head, labels=labels)
    started = time.time()
    for it in range(config.total_iters):
        batch = make_batch(corpus, config.batch_size, config.episode_len, batch_rng, labels)
        episodes = [ep for ep, _ in batch]
        y = np.array([lbl for _, lbl in batch])
        text, hour, ctx = cache.arrays(episodes)
        lr = lr_at(config, it)

        for p in trainable.values():
            p.grad = None
        try:
            z = encode_episode_batch(enc, text, hour, ctx, mode="train", rng=dropout_rng)
            loss = head.loss(z, y)
            loss.backward()
        except NumericError as exc:
            users = sorted({ep.user_id for ep in episodes})
            raise TrainError(f"non-finite loss at iter {it} (lr {lr:g}; batch users {users[:8]}...): {exc}") from exc

        if config.clip_norm is not None:
            _clip_gradients(trainable, config.clip_norm)
        sgd_momentum_step(trainable, velocity, lr, config.momentum)

        if it % config.log_every == 0 or it == config.total_iters - 1:
            acc = float((head.predictions(z.data) == y).mean())
            entry = {"iter": it, "lr": lr, "loss": float(loss.item()), "aux_accuracy": acc}
            result.log.append(entry)
            if progress:
                print(f"iter {it:>7d} lr {lr:.4g} loss {entry['loss']:.4f} acc {acc:.3f} "
                      f"({time.time() - started:.0f}s)", flush=True)
    result.velocity = velocity
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def vocab_fingerprint(vocab: Vocabulary) -> str:
    doc = {"merges": [[list(a), list(b)] for a, b in vocab.subword.merges],
           "contexts": vocab.context.contexts, "T": vocab.T}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _named_tensors(enc: EncoderParams, head: ObjectiveHead,
                   velocity: dict[str, np.ndarray] | None) -> list[tuple[str, np.ndarray]]:
    items: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in enc.params.items()]
    items.append(("head.W", head.W.data))
    for name, state in enc.bn.items():
        items.append((f"{name}.running_mean", state.running_mean))
        items.append((f"{name}.running_var", state.running_var))
    if velocity:
        items.extend((f"velocity.{n}", v) for n, v in sorted(velocity.items()))
    return items


def save_checkpoint(path, enc: EncoderParams, head: ObjectiveHead, vocab: Vocabulary,
                    train_config: TrainConfig | None = None, iteration: int = 0,
                    velocity: dict[str, np.ndarray] | None = None) -> None:
    """Write manifest.json + params.bin into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = _named_tensors(enc, head, velocity)
    offset = 0
    specs = []
    for name, arr in tensors:
        specs.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "loss_kind": head.kind,
        "metric": head.metric,
        "margin": getattr(head, "margin", None),
        "scale": getattr(head, "scale", None),
        "num_authors": head.num_authors,
        "model_config": enc.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "vocab_sha256": vocab_fingerprint(vocab),
        "bn_initialized": {name: state.initialized for name, state in enc.bn.items()},
        "architecture_notes": {
            "attention_blocks": "pre-norm residual, no key or second-feed-forward bias",
            "feed_forward_inner_width": enc.config.d_hidden,
            "head_init": "uniform xavier; class centers renormalized every forward",
            "nmi_normalization": "arithmetic mean of entropies",
        },
        "tensors": specs,
        "total_floats": offset,
    }
    blob = np.concatenate([arr.ravel() for _, arr in tensors]).astype("<f4")
    with open(out / "params.bin", "wb") as fh:
        fh.write(blob.tobytes())
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path) -> tuple[EncoderParams, ObjectiveHead, dict, dict[str, np.ndarray]]:
    """Read a checkpoint directory; refuses version/shape mismatches and
    truncated blobs. Returns (encoder, head, manifest, velocity)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    raw = (root / "params.bin").read_bytes()
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size != manifest["total_floats"]:
        raise CheckpointError(
            f"parameter blob has {flat.size} floats, manifest expects {manifest['total_floats']}")

    values: dict[str, np.ndarray] = {}
    for spec in manifest["tensors"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = flat[spec["offset"] : spec["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"tensor {spec['name']} truncated")
        values[spec["name"]] = chunk.astype(np.float64).reshape(spec["shape"])

    config = ModelConfig(**manifest["model_config"])
    enc = init_params(config, seed=0)
    for name, tensor in enc.params.items():
        if name not in values:
            raise CheckpointError(f"missing tensor {name}")
        if tuple(values[name].shape) != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {values[name].shape} vs model {tensor.shape}")
        tensor.data = values[name]
    for name, state in enc.bn.items():
        state.running_mean = values[f"{name}.running_mean"]
        state.running_var = values[f"{name}.running_var"]
        state.initialized = bool(manifest["bn_initialized"][name])

    head = make_head(manifest["loss_kind"], manifest["num_authors"], config.D, seed=0,
                     margin=manifest["margin"] or 0.5, scale=manifest["scale"] or 64.0)
    head.W = Tensor(values["head.W"], requires_grad=True)
    velocity = {name[len("velocity."):]: arr for name, arr in values.items()
                if name.startswith("velocity.")}
    return enc, head, manifest, velocity
