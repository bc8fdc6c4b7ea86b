"""Episode encoder: per-action embeddings (time/context lookups + text
convolutions with max-over-time) fed into multi-head self-attention layers,
per-layer mean pooling, and a batch-normalized MLP projecting to the final
embedding space."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .corpus import Episode
from .tokenizer import Vocabulary


class EncoderError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_contexts: int
    d_embed: int = 256
    conv_widths: tuple[int, ...] = (2, 3, 4, 5)
    filters_per_conv: int = 256
    attn_layers: int = 2
    attn_heads: int = 4
    d_hidden: int = 512
    D: int = 512
    dropout_rate: float = 0.1
    use_time: bool = True
    use_context: bool = True
    use_positional: bool = False

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        if self.d_hidden % self.attn_heads:
            raise EncoderError(f"d_hidden {self.d_hidden} not divisible by {self.attn_heads} heads")
        if not self.conv_widths:
            raise EncoderError("need at least one convolution width")

    @property
    def text_width(self) -> int:
        return len(self.conv_widths) * self.filters_per_conv

    @property
    def action_width(self) -> int:
        width = self.text_width
        if self.use_time:
            width += self.d_embed
        if self.use_context:
            width += self.d_embed
        return width

    def validate_for_T(self, T: int) -> None:
        if max(self.conv_widths) > T:
            raise EncoderError(f"conv width {max(self.conv_widths)} exceeds text length {T}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderParams:
    """All learnable tensors of the encoder plus batch-norm running state."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _xavier(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int) -> EncoderParams:
    """Uniform Xavier init for embeddings/linears, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def linear(name: str, n_in: int, n_out: int):
        p[f"{name}.weight"] = Tensor(_xavier(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        p[f"{name}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)

    def table(name: str, rows: int, cols: int):
        p[name] = Tensor(_xavier(rng, (rows, cols), rows, cols), requires_grad=True)

    table("embed.symbol", config.vocab_size, config.d_embed)
    table("embed.hour", 24, config.d_embed)
    table("embed.context", config.num_contexts, config.d_embed)
    for w in config.conv_widths:
        p[f"conv.w{w}.kernel"] = Tensor(
            _xavier(rng, (w, config.d_embed, config.filters_per_conv),
                    w * config.d_embed, config.filters_per_conv),
            requires_grad=True)
        p[f"conv.w{w}.bias"] = Tensor(np.zeros(config.filters_per_conv), requires_grad=True)
    linear("proj", config.action_width, config.d_hidden)
    for i in range(config.attn_layers):
        for part in ("wq", "wv", "wo"):
            linear(f"attn{i}.{part}", config.d_hidden, config.d_hidden)
        # key projection carries no bias: a shared key offset cancels in the softmax
        p[f"attn{i}.wk.weight"] = Tensor(
            _xavier(rng, (config.d_hidden, config.d_hidden), config.d_hidden, config.d_hidden),
            requires_grad=True)
        linear(f"attn{i}.ff1", config.d_hidden, config.d_hidden)
        # second feed-forward linear adds into the residual stream without a bias
        p[f"attn{i}.ff2.weight"] = Tensor(
            _xavier(rng, (config.d_hidden, config.d_hidden), config.d_hidden, config.d_hidden),
            requires_grad=True)
        for ln in ("ln1", "ln2"):
            p[f"attn{i}.{ln}.gain"] = Tensor(np.ones(config.d_hidden), requires_grad=True)
            p[f"attn{i}.{ln}.bias"] = Tensor(np.zeros(config.d_hidden), requires_grad=True)
    pooled = config.attn_layers * config.d_hidden
    linear("mlp.l1", pooled, config.d_hidden)
    # no bias feeding straight into batch norm; the shift would be absorbed anyway
    p["mlp.l2.weight"] = Tensor(_xavier(rng, (config.d_hidden, config.D), config.d_hidden, config.D),
                                requires_grad=True)
    for name, n in (("bn_in", pooled), ("bn_out", config.D)):
        p[f"{name}.gain"] = Tensor(np.ones(n), requires_grad=True)
        p[f"{name}.bias"] = Tensor(np.zeros(n), requires_grad=True)

    bn = {"bn_in": BatchNormState.for_features(pooled), "bn_out": BatchNormState.for_features(config.D)}
    return EncoderParams(config=config, params=p, bn=bn)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def _linear(enc: EncoderParams, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, enc[f"{name}.weight"]), enc[f"{name}.bias"])


def _learned_layer_norm(enc: EncoderParams, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), enc[f"{name}.gain"]), enc[f"{name}.bias"])


def _text_vectors(enc: EncoderParams, text_ids: np.ndarray, mode: str,
                  rng: np.random.Generator | None) -> Tensor:
    """(B, L, T) symbol ids -> (B*L, text_width) pooled convolution features."""
    cfg = enc.config
    b, l, t = text_ids.shape
    sym = ad.embedding_gather(enc["embed.symbol"], text_ids.reshape(b * l, t))  # (B*L, T, d)
    pooled = []
    for w in cfg.conv_widths:
        conv = ad.conv1d(sym, enc[f"conv.w{w}.kernel"], enc[f"conv.w{w}.bias"])
        pooled.append(ad.max_over_time(ad.relu(conv), axis=-2))
    text = ad.concat(pooled, axis=-1)
    return ad.dropout(text, cfg.dropout_rate, mode, rng)


def encode_actions(enc: EncoderParams, text_ids: np.ndarray, hour_ids: np.ndarray,
                   ctx_ids: np.ndarray, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> Tensor:
    """Per-action vectors (B, L, action_width): concat(time, text, context)."""
    cfg = enc.config
    b, l, _ = text_ids.shape
    parts = []
    if cfg.use_time:
        parts.append(ad.embedding_gather(enc["embed.hour"], hour_ids.reshape(b * l)))
    parts.append(_text_vectors(enc, text_ids, mode, rng))
    if cfg.use_context:
        parts.append(ad.embedding_gather(enc["embed.context"], ctx_ids.reshape(b * l)))
    flat = ad.concat(parts, axis=-1)
    return ad.reshape(flat, (b, l, cfg.action_width))


def encode_episode_batch(enc: EncoderParams, text_ids: np.ndarray, hour_ids: np.ndarray,
                         ctx_ids: np.ndarray, mode: str = "eval",
                         rng: np.random.Generator | None = None) -> Tensor:
    """Embed a batch of episodes: (B, L, T)/(B, L)/(B, L) arrays -> (B, D)."""
    cfg = enc.config
    if text_ids.ndim != 3 or text_ids.shape[0] == 0 or text_ids.shape[1] == 0:
        raise EncoderError(f"expected non-empty (B, L, T) text ids, got {text_ids.shape}")
    b, l, _ = text_ids.shape

    actions = encode_actions(enc, text_ids, hour_ids, ctx_ids, mode, rng)
    x = ad.reshape(_linear(enc, "proj", ad.reshape(actions, (b * l, cfg.action_width))),
                   (b, l, cfg.d_hidden))
    if cfg.use_positional:
        x = ad.add(x, Tensor(positional_encoding(l, cfg.d_hidden)))

    pooled = []
    for i in range(cfg.attn_layers):
        ln1 = _learned_layer_norm(enc, f"attn{i}.ln1", x)
        x = ad.add(x, _attention(enc, i, ln1))
        ln2 = _learned_layer_norm(enc, f"attn{i}.ln2", x)
        ff = ad.reshape(ln2, (b * l, cfg.d_hidden))
        ff = ad.matmul(ad.relu(_linear(enc, f"attn{i}.ff1", ff)), enc[f"attn{i}.ff2.weight"])
        x = ad.add(x, ad.reshape(ff, (b, l, cfg.d_hidden)))
        pooled.append(ad.mean_over_time(x, axis=-2))

    h = ad.concat(pooled, axis=-1)
    h = ad.add(ad.mul(ad.batch_norm(h, enc.bn["bn_in"], mode), enc["bn_in.gain"]), enc["bn_in.bias"])
    h = ad.matmul(ad.relu(_linear(enc, "mlp.l1", h)), enc["mlp.l2.weight"])
    z = ad.add(ad.mul(ad.batch_norm(h, enc.bn["bn_out"], mode), enc["bn_out.gain"]), enc["bn_out.bias"])
    return z


def _attention(enc: EncoderParams, layer: int, x: Tensor) -> Tensor:
    cfg = enc.config
    b, l, d = x.shape
    heads, dk = cfg.attn_heads, cfg.d_hidden // cfg.attn_heads
    flat = ad.reshape(x, (b * l, d))

    def split(name):
        if name == "wk":
            proj = ad.matmul(flat, enc[f"attn{layer}.wk.weight"])
        else:
            proj = _linear(enc, f"attn{layer}.{name}", flat)
        return ad.transpose(ad.reshape(proj, (b, l, heads, dk)), (0, 2, 1, 3))

    out = ad.scaled_dot_product_attention(split("wq"), split("wk"), split("wv"))
    merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b * l, d))
    return ad.reshape(_linear(enc, f"attn{layer}.wo", merged), (b, l, d))


# ---------------------------------------------------------------------------
# episode tokenization glue
# ---------------------------------------------------------------------------

def episodes_to_arrays(vocab: Vocabulary, episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tokenize same-length episodes into (B, L, T), (B, L), (B, L) id arrays."""
    if not episodes:
        raise EncoderError("empty episode list")
    lengths = {len(ep) for ep in episodes}
    if len(lengths) != 1:
        raise EncoderError(f"episodes in one batch must share a length, got {sorted(lengths)}")
    l = lengths.pop()
    if l == 0:
        raise EncoderError("empty episode")
    b = len(episodes)
    text = np.zeros((b, l, vocab.T), dtype=np.int64)
    hour = np.zeros((b, l), dtype=np.int64)
    ctx = np.zeros((b, l), dtype=np.int64)
    for i, ep in enumerate(episodes):
        for j, a in enumerate(ep.actions):
            e = vocab.encode_action(a.text, a.timestamp, a.context)
            text[i, j] = e.text_ids
            hour[i, j] = e.hour_id
            ctx[i, j] = e.context_id
    return text, hour, ctx


def encode_episode(enc: EncoderParams, vocab: Vocabulary, episode: Episode,
                   mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Embed one episode to a (D,) vector (no graph recording in eval mode)."""
    text, hour, ctx = episodes_to_arrays(vocab, [episode])
    if mode == "eval":
        with ad.no_grad():
            return encode_episode_batch(enc, text, hour, ctx, mode).data[0].copy()
    return encode_episode_batch(enc, text, hour, ctx, mode, rng).data[0].copy()


def encode_action(enc: EncoderParams, encoded, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Embed one tokenized action to its (action_width,) vector."""
    text = np.asarray(encoded.text_ids, dtype=np.int64).reshape(1, 1, -1)
    hour = np.asarray([[encoded.hour_id]], dtype=np.int64)
    ctx = np.asarray([[encoded.context_id]], dtype=np.int64)
    with ad.no_grad():
        return encode_actions(enc, text, hour, ctx, mode, rng).data[0, 0].copy()
