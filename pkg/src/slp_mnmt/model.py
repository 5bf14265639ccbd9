"""Encoder-decoder transformer with a selective language-specific pool.

The shared trunk (token embeddings, encoder, decoder) produces a decoder
state `h_s`.  For high-resource target languages, `h_s` then passes through
one of `num_slp_modules` bottleneck modules; which one is chosen by a
selection head that scores the target-language embedding.  Low-resource
targets instead pass through a single universal bottleneck module.  The
output projection maps the routed state to vocabulary logits.

Parameters live in a flat name -> Tensor map.  The first path segment of a
name is its partition, one of: shared, slp, universal, selection,
lang_embed, output.  Every parameter belongs to exactly one partition; the
training stages and the gradient-analysis tools select on these prefixes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor

HIGH = "high"
LOW = "low"

PARTITIONS = ("shared", "slp", "universal", "selection", "lang_embed", "output")

ATTN_MASK_FILL = -1e9


class LanguageError(ValueError):
    """Unknown language id or tier misuse."""


@dataclass(frozen=True)
class LanguageInfo:
    """A registered target language: identity, resource tier, vocab symbol."""

    id: str
    tier: str
    symbol_token: int

    def __post_init__(self):
        if self.tier not in (HIGH, LOW):
            raise LanguageError(f"tier must be 'high' or 'low', got {self.tier!r}")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    slp_hidden_dim: int = 128
    num_slp_modules: int = 3
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_seq_len: int = 32
    dropout_rate: float = 0.0
    # scales the random init of the selection matrix; 0.0 starts every
    # language at uniform routing so module choice is learned, not inherited
    # from init noise
    selection_init_scale: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not self.embed_dim < self.slp_hidden_dim:
            raise ValueError(
                f"bottleneck must widen: embed_dim {self.embed_dim} >= "
                f"slp_hidden_dim {self.slp_hidden_dim}"
            )
        if self.num_slp_modules < 1:
            raise ValueError("need at least one pool module")
        if min(self.num_encoder_layers, self.num_decoder_layers) < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate out of range: {self.dropout_rate}")
        if self.selection_init_scale < 0.0:
            raise ValueError(
                f"selection_init_scale must be >= 0, got {self.selection_init_scale}"
            )

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "slp_hidden_dim": self.slp_hidden_dim,
            "num_slp_modules": self.num_slp_modules,
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "dropout_rate": self.dropout_rate,
            "selection_init_scale": self.selection_init_scale,
        }


@dataclass
class SelectionProbs:
    """Selection distribution over pool modules for one language."""

    language: str
    logits: np.ndarray
    alpha: np.ndarray


class ModelParams:
    """Flat named parameter store plus language registry."""

    def __init__(
        self,
        config: ModelConfig,
        languages: Sequence[LanguageInfo],
        params: dict[str, Tensor],
        variant: str = "slp",
    ):
        if variant not in ("slp", "baseline"):
            raise ValueError(f"unknown variant {variant!r}")
        ids = [l.id for l in languages]
        if len(set(ids)) != len(ids):
            raise LanguageError(f"duplicate language ids: {ids}")
        self.config = config
        self.languages = tuple(languages)
        self.params = params
        self.variant = variant
        self._index = {l.id: i for i, l in enumerate(self.languages)}

    def language_index(self, lang_id: str) -> int:
        try:
            return self._index[lang_id]
        except KeyError:
            raise LanguageError(f"unregistered language {lang_id!r}") from None

    def language(self, lang_id: str) -> LanguageInfo:
        return self.languages[self.language_index(lang_id)]

    def tier(self, lang_id: str) -> str:
        return self.language(lang_id).tier

    def partition_names(self, partition: str) -> list[str]:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}; expected one of {PARTITIONS}")
        prefix = partition + "."
        return [n for n in self.params if n.startswith(prefix)]

    def partition_of(self, name: str) -> str:
        head = name.split(".", 1)[0]
        if head not in PARTITIONS:
            raise ValueError(f"parameter {name!r} has no valid partition prefix")
        return head

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def _xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _bottleneck_params(rng: np.random.Generator, prefix: str, cfg: ModelConfig, out: dict) -> None:
    out[f"{prefix}.up"] = tt.parameter(_xavier(rng, (cfg.embed_dim, cfg.slp_hidden_dim)))
    out[f"{prefix}.down"] = tt.parameter(_xavier(rng, (cfg.slp_hidden_dim, cfg.embed_dim)))
    out[f"{prefix}.ln_gain"] = tt.parameter(np.ones(cfg.embed_dim))
    out[f"{prefix}.ln_bias"] = tt.parameter(np.zeros(cfg.embed_dim))


def _attn_params(rng, prefix: str, d: int, out: dict) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = tt.parameter(_xavier(rng, (d, d)))
    for name in ("bq", "bk", "bv", "bo"):
        out[f"{prefix}.{name}"] = tt.parameter(np.zeros(d))


def _ln_params(prefix: str, d: int, out: dict) -> None:
    out[f"{prefix}.gain"] = tt.parameter(np.ones(d))
    out[f"{prefix}.bias"] = tt.parameter(np.zeros(d))


def _ffn_params(rng, prefix: str, d: int, f: int, out: dict) -> None:
    out[f"{prefix}.w1"] = tt.parameter(_xavier(rng, (d, f)))
    out[f"{prefix}.b1"] = tt.parameter(np.zeros(f))
    out[f"{prefix}.w2"] = tt.parameter(_xavier(rng, (f, d)))
    out[f"{prefix}.b2"] = tt.parameter(np.zeros(d))


def init_params(
    config: ModelConfig,
    languages: Sequence[LanguageInfo],
    rng: np.random.Generator,
    variant: str = "slp",
) -> ModelParams:
    """Fresh randomly initialised parameters.

    `variant="baseline"` builds the plain joint model: the shared trunk and
    output projection only, with the routed state equal to `h_s`.
    """
    d = config.embed_dim
    params: dict[str, Tensor] = {}
    params["shared.token_embed"] = tt.parameter(rng.normal(0.0, d ** -0.5, size=(config.vocab_size, d)))
    for i in range(config.num_encoder_layers):
        p = f"shared.enc{i}"
        _ln_params(f"{p}.ln1", d, params)
        _attn_params(rng, f"{p}.attn", d, params)
        _ln_params(f"{p}.ln2", d, params)
        _ffn_params(rng, f"{p}.ffn", d, config.ffn_dim, params)
    _ln_params("shared.enc_final_ln", d, params)
    for i in range(config.num_decoder_layers):
        p = f"shared.dec{i}"
        _ln_params(f"{p}.ln1", d, params)
        _attn_params(rng, f"{p}.self_attn", d, params)
        _ln_params(f"{p}.ln2", d, params)
        _attn_params(rng, f"{p}.cross_attn", d, params)
        _ln_params(f"{p}.ln3", d, params)
        _ffn_params(rng, f"{p}.ffn", d, config.ffn_dim, params)
    _ln_params("shared.dec_final_ln", d, params)
    if variant == "slp":
        for t in range(config.num_slp_modules):
            _bottleneck_params(rng, f"slp.{t}", config, params)
        _bottleneck_params(rng, "universal", config, params)
        params["selection.wg"] = tt.parameter(
            _xavier(rng, (d, config.num_slp_modules)) * config.selection_init_scale)
        params["lang_embed.table"] = tt.parameter(rng.normal(0.0, d ** -0.5, size=(len(languages), d)))
    params["output.wo"] = tt.parameter(_xavier(rng, (d, config.vocab_size)))
    return ModelParams(config, languages, params, variant=variant)


def reinit_universal(params: ModelParams, rng: np.random.Generator) -> None:
    """Replace the universal module with a fresh random draw (in place)."""
    if params.variant != "slp":
        raise ValueError("baseline variant has no universal module")
    fresh: dict[str, Tensor] = {}
    _bottleneck_params(rng, "universal", params.config, fresh)
    for name, p in fresh.items():
        params.params[name].data = p.data
        params.params[name].grad = None


# ---------------------------------------------------------------------------
# Shared trunk


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}
_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _positional(length: int, d: int) -> np.ndarray:
    key = (length, d)
    if key not in _POS_CACHE:
        pos = np.arange(length)[:, None]
        dim = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
        enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
        _POS_CACHE[key] = enc
    return _POS_CACHE[key]


def _causal_mask(length: int) -> np.ndarray:
    if length not in _CAUSAL_CACHE:
        _CAUSAL_CACHE[length] = np.triu(np.ones((length, length), dtype=bool), k=1)
    return _CAUSAL_CACHE[length]


def _check_tokens(ids: np.ndarray, config: ModelConfig, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise tt.ShapeError(f"{what}: expected a (batch, length) id array, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise tt.ShapeError(
            f"{what}: length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(
            f"{what}: token id out of range [0, {config.vocab_size}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    return ids


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout requires an rng during training")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tt.multiply(x, tt.constant(keep))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return tt.transpose(tt.reshape(x, (b, l, heads, d // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    return tt.reshape(tt.transpose(x, 1, 2), (b, l, h * dk))


def _attention(
    p: dict[str, Tensor],
    prefix: str,
    query: Tensor,
    memory: Tensor,
    mask: Optional[np.ndarray],
    heads: int,
    dropout_rate: float,
    rng: Optional[np.random.Generator],
) -> Tensor:
    d = query.shape[-1]
    q = tt.add(tt.matmul(query, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = tt.add(tt.matmul(memory, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = tt.add(tt.matmul(memory, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = tt.scalar_scale(tt.matmul(qh, tt.transpose(kh, 2, 3)), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        scores = tt.masked_fill(scores, mask, ATTN_MASK_FILL)
    attn = tt.softmax(scores)
    attn = _dropout(attn, dropout_rate, rng)
    ctx = _merge_heads(tt.matmul(attn, vh))
    return tt.add(tt.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _ffn(p, prefix: str, x: Tensor, dropout_rate: float, rng) -> Tensor:
    h = tt.relu(tt.add(tt.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    h = _dropout(h, dropout_rate, rng)
    return tt.add(tt.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _ln(p, prefix: str, x: Tensor) -> Tensor:
    return tt.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def _embed(p, ids: np.ndarray, d: int) -> Tensor:
    tok = tt.scalar_scale(tt.embedding_lookup(p["shared.token_embed"], ids), math.sqrt(d))
    b, l = ids.shape
    pos = np.broadcast_to(_positional(l, d), (b, l, d))
    return tt.add(tok, tt.constant(pos))


def forward_shared(
    params: ModelParams,
    source_tokens: np.ndarray,
    target_tokens: np.ndarray,
    *,
    pad_id: int = 0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    collect_layers: Optional[list] = None,
) -> Tensor:
    """Run encoder and decoder; returns the decoder state `h_s`.

    `source_tokens` is (batch, src_len) with the target-language symbol
    first; `target_tokens` is the (batch, tgt_len) teacher-forcing input
    (shifted right).  1-D inputs are treated as a batch of one and the
    output is squeezed to (tgt_len, embed_dim).

    When `collect_layers` is given, each decoder layer output (post
    residual, pre final norm) is appended to it.
    """
    cfg = params.config
    p = params.params
    squeeze = False
    source_tokens = np.asarray(source_tokens)
    target_tokens = np.asarray(target_tokens)
    if source_tokens.ndim == 1 and target_tokens.ndim == 1:
        source_tokens = source_tokens[None, :]
        target_tokens = target_tokens[None, :]
        squeeze = True
    src = _check_tokens(source_tokens, cfg, "source_tokens")
    tgt = _check_tokens(target_tokens, cfg, "target_tokens")
    if src.shape[0] != tgt.shape[0]:
        raise tt.ShapeError(
            f"batch mismatch: {src.shape[0]} source rows vs {tgt.shape[0]} target rows"
        )
    d = cfg.embed_dim
    drop = cfg.dropout_rate if training else 0.0

    src_pad = src == pad_id
    enc_mask = src_pad[:, None, None, :]

    x = _embed(p, src, d)
    for i in range(cfg.num_encoder_layers):
        pre = f"shared.enc{i}"
        normed = _ln(p, f"{pre}.ln1", x)
        x = tt.add(x, _attention(p, f"{pre}.attn", normed, normed, enc_mask, cfg.num_heads, drop, rng))
        x = tt.add(x, _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x), drop, rng))
    enc_out = _ln(p, "shared.enc_final_ln", x)

    t_len = tgt.shape[1]
    self_mask = _causal_mask(t_len)[None, None, :, :]
    cross_mask = enc_mask

    y = _embed(p, tgt, d)
    for i in range(cfg.num_decoder_layers):
        pre = f"shared.dec{i}"
        normed = _ln(p, f"{pre}.ln1", y)
        y = tt.add(y, _attention(p, f"{pre}.self_attn", normed, normed, self_mask, cfg.num_heads, drop, rng))
        y = tt.add(y, _attention(p, f"{pre}.cross_attn", _ln(p, f"{pre}.ln2", y), enc_out, cross_mask, cfg.num_heads, drop, rng))
        y = tt.add(y, _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln3", y), drop, rng))
        if collect_layers is not None:
            collect_layers.append(y)
    h_s = _ln(p, "shared.dec_final_ln", y)
    if squeeze:
        h_s = tt.reshape(h_s, (t_len, d))
    return h_s


# ---------------------------------------------------------------------------
# Pool routing


def _require_slp(params: ModelParams, op: str) -> None:
    if params.variant != "slp":
        raise ValueError(f"{op}: baseline variant has no language-specific pool")


def selection_logits_tensor(params: ModelParams, lang_id: str) -> Tensor:
    """Differentiable selection logits for one language: a linear map of the
    language embedding to one score per pool module."""
    _require_slp(params, "selection_logits")
    idx = params.language_index(lang_id)
    emb = tt.embedding_lookup(params.params["lang_embed.table"], np.array([idx]))
    return tt.matmul(emb, params.params["selection.wg"])  # (1, T)


def selection_alpha_tensor(params: ModelParams, lang_id: str) -> Tensor:
    return tt.softmax(selection_logits_tensor(params, lang_id))  # (1, T)


def selection_probs(params: ModelParams, lang_id: str) -> SelectionProbs:
    logits = selection_logits_tensor(params, lang_id).data.reshape(-1)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return SelectionProbs(language=lang_id, logits=logits.copy(), alpha=e / e.sum())


def select_module(params: ModelParams, lang_id: str) -> int:
    """Hard module choice: argmax of the selection distribution, ties going
    to the lowest index."""
    return int(np.argmax(selection_probs(params, lang_id).alpha))


def slp_module_apply(params: ModelParams, module_index: int, h_s: Tensor) -> Tensor:
    _require_slp(params, "slp_module_apply")
    if not 0 <= module_index < params.config.num_slp_modules:
        raise IndexError(
            f"module index {module_index} out of range [0, {params.config.num_slp_modules})"
        )
    return _bottleneck_apply(params.params, f"slp.{module_index}", h_s)


def _bottleneck_apply(p: dict[str, Tensor], prefix: str, h_s: Tensor) -> Tensor:
    """h_b = LayerNorm(ReLU(h_s W_up) W_down + h_s); no biases on the
    projections, per-module norm gain/bias."""
    mid = tt.relu(tt.matmul(h_s, p[f"{prefix}.up"]))
    return tt.layer_norm(tt.add(tt.matmul(mid, p[f"{prefix}.down"]), h_s),
                         p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])


def universal_apply(params: ModelParams, h_s: Tensor) -> Tensor:
    _require_slp(params, "universal_apply")
    return _bottleneck_apply(params.params, "universal", h_s)


def slp_apply_hard(params: ModelParams, lang_id: str, h_s: Tensor) -> Tensor:
    """Route through the argmax module only.  Gradients reach just that
    module; the selection head gets none (the choice is not differentiable)."""
    _require_slp(params, "slp_apply_hard")
    if params.tier(lang_id) != HIGH:
        raise LanguageError(f"hard pool routing is for high-resource targets, {lang_id!r} is low")
    return slp_module_apply(params, select_module(params, lang_id), h_s)


def slp_apply_soft(params: ModelParams, lang_id: str, h_s: Tensor) -> Tensor:
    """Mix all pool modules by their selection weights.

    Gradients flow to every module and, through the mixing weights, to the
    selection head and language embedding.
    """
    _require_slp(params, "slp_apply_soft")
    if params.tier(lang_id) != HIGH:
        raise LanguageError(f"soft pool routing is for high-resource targets, {lang_id!r} is low")
    alpha = selection_alpha_tensor(params, lang_id)  # (1, T)
    t_count = params.config.num_slp_modules
    n = int(np.prod(h_s.shape))
    rows = [
        tt.reshape(slp_module_apply(params, t, h_s), (1, n))
        for t in range(t_count)
    ]
    stacked = tt.concatenate(rows, axis=0)        # (T, n)
    mixed = tt.matmul(alpha, stacked)             # (1, n)
    return tt.reshape(mixed, h_s.shape)


def route(params: ModelParams, lang_id: str, h_s: Tensor, path_mode: str = "hard") -> Tensor:
    """Apply the language's routing rule; baseline passes `h_s` through."""
    if params.variant == "baseline":
        return h_s
    if params.tier(lang_id) == LOW:
        return universal_apply(params, h_s)
    if path_mode == "hard":
        return slp_apply_hard(params, lang_id, h_s)
    if path_mode == "soft":
        return slp_apply_soft(params, lang_id, h_s)
    raise ValueError(f"unknown path_mode {path_mode!r}")


def output_logits(params: ModelParams, h_b: Tensor) -> Tensor:
    return tt.matmul(h_b, params.params["output.wo"])


def model_forward(
    params: ModelParams,
    source_tokens: np.ndarray,
    target_tokens: np.ndarray,
    lang_id: str,
    *,
    path_mode: str = "hard",
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Optional[SelectionProbs]]:
    """Full forward pass to vocabulary logits.

    Returns `(logits, selection)`; `selection` is populated only when the
    pool participated (high-resource target on the slp variant).
    """
    h_s = forward_shared(params, source_tokens, target_tokens, training=training, rng=rng)
    h_b = route(params, lang_id, h_s, path_mode=path_mode)
    sel = None
    if params.variant == "slp" and params.tier(lang_id) == HIGH:
        sel = selection_probs(params, lang_id)
    return output_logits(params, h_b), sel
