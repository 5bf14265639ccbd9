"""Decoding, corpus metrics, and analysis instruments.

Decoding always runs the hard routing path: at inference each high-resource
language commits to its argmax pool module, and low-resource languages use
the universal module.  Metrics cover teacher-forced token accuracy, corpus
BLEU over whitespace tokens, and exact sequence match.  The analysis half
measures pairwise gradient alignment between directions, target-side
vocabulary overlap, the pool selection table, and exported decoder states
for inspection.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tt
from .data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Batch,
    ParallelCorpus,
    Vocabulary,
    pack_batch,
)
from .model import (
    HIGH,
    LOW,
    ModelParams,
    forward_shared,
    model_forward,
    output_logits,
    route,
    select_module,
    selection_probs,
)
from .training import label_smoothed_cross_entropy


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Teacher-forced accuracy


def token_accuracy(params: ModelParams, corpus: ParallelCorpus, rows_per_batch: int = 64) -> float:
    """Fraction of non-pad target positions whose argmax logit matches the
    label under teacher forcing."""
    if not corpus.pairs:
        raise EvalError("token_accuracy over an empty corpus")
    correct = 0
    total = 0
    for start in range(0, len(corpus.pairs), rows_per_batch):
        batch = pack_batch(corpus.tgt_lang, corpus.pairs[start : start + rows_per_batch])
        logits, _ = model_forward(params, batch.src, batch.tgt_in, batch.tgt_lang)
        pred = logits.data.argmax(axis=-1)
        mask = batch.tgt_out != PAD_ID
        correct += int(((pred == batch.tgt_out) & mask).sum())
        total += int(mask.sum())
    return correct / total


# ---------------------------------------------------------------------------
# Decoding


def _step_logprobs(params: ModelParams, src: np.ndarray, prefix: np.ndarray, lang: str) -> np.ndarray:
    """Log-probabilities over the vocabulary for the next position, given
    (batch, prefix_len) teacher-forcing rows."""
    logits, _ = model_forward(params, src, prefix, lang, path_mode="hard")
    last = logits.data[:, -1, :]
    shifted = last - last.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def greedy_decode(
    params: ModelParams,
    source: Sequence[int],
    lang: str,
    max_len: int,
) -> list[int]:
    """Argmax decoding of a single source until end-of-sequence or max_len."""
    return greedy_decode_batch(params, [tuple(source)], lang, max_len)[0]


def greedy_decode_batch(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    lang: str,
    max_len: int,
) -> list[list[int]]:
    if max_len < 1:
        raise EvalError("max_len must be positive")
    b = len(sources)
    s_max = max(len(s) for s in sources)
    src = np.full((b, s_max), PAD_ID, dtype=np.int64)
    for r, s in enumerate(sources):
        src[r, : len(s)] = s
    prefix = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        logp = _step_logprobs(params, src, prefix, lang)
        nxt = logp.argmax(axis=-1)
        for r in range(b):
            if done[r]:
                continue
            token = int(nxt[r])
            if token == EOS_ID:
                done[r] = True
            else:
                outputs[r].append(token)
        if done.all():
            break
        step_tokens = np.where(done, PAD_ID, nxt).astype(np.int64)
        prefix = np.concatenate([prefix, step_tokens[:, None]], axis=1)
    return outputs


@dataclass(order=True)
class _Hypothesis:
    sort_key: float
    tokens: tuple[int, ...] = field(compare=False)
    logprob: float = field(compare=False)


def _normalised(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (max(1, length) ** length_penalty)


def beam_search(
    step_fn: Callable[[np.ndarray], np.ndarray],
    beam_size: int,
    max_len: int,
    length_penalty: float = 1.0,
    eos_id: int = EOS_ID,
    bos_id: int = BOS_ID,
) -> tuple[list[int], float]:
    """Length-normalised beam search over an arbitrary next-token model.

    `step_fn` maps a (rows, prefix_len) int array of prefixes (each starting
    with `bos_id`) to (rows, vocab) log-probabilities for the next token.
    Returns the best finished sequence (without end-of-sequence) and its
    normalised score, falling back to the best unfinished sequence when
    nothing finishes within `max_len` steps.
    """
    if beam_size < 1:
        raise EvalError("beam_size must be positive")
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        prefixes = np.array(
            [(bos_id,) + tokens for tokens, _ in alive], dtype=np.int64
        )
        logp = step_fn(prefixes)
        vocab = logp.shape[-1]
        scores = np.array([lp for _, lp in alive])[:, None] + logp
        flat = scores.reshape(-1)
        k = min(beam_size, flat.size)
        # stable ordering: ties broken by lower (row, token) index
        top = np.lexsort((np.arange(flat.size), -flat))[:k]
        next_alive = []
        for idx in top:
            row, token = divmod(int(idx), vocab)
            tokens = alive[row][0] + (token,)
            lp = float(flat[idx])
            if token == eos_id:
                body = tokens[:-1]
                finished.append((body, _normalised(lp, len(body) + 1, length_penalty)))
            else:
                next_alive.append((tokens, lp))
        alive = next_alive[:beam_size]
        if not alive:
            break
    if finished:
        best = max(finished, key=lambda t: (t[1], -len(t[0])))
        return list(best[0]), best[1]
    if not alive:
        raise EvalError("beam search produced no hypotheses")
    tokens, lp = max(alive, key=lambda t: (_normalised(t[1], len(t[0]), length_penalty),))
    return list(tokens), _normalised(lp, len(tokens), length_penalty)


def beam_decode(
    params: ModelParams,
    source: Sequence[int],
    lang: str,
    beam_size: int,
    max_len: int,
    length_penalty: float = 1.0,
) -> list[int]:
    src_row = np.asarray(source, dtype=np.int64)

    def step_fn(prefixes: np.ndarray) -> np.ndarray:
        src = np.tile(src_row, (prefixes.shape[0], 1))
        return _step_logprobs(params, src, prefixes, lang)

    tokens, _ = beam_search(step_fn, beam_size, max_len, length_penalty)
    return tokens


# ---------------------------------------------------------------------------
# BLEU


def _as_tokens(seq) -> list[str]:
    if isinstance(seq, str):
        return seq.split()
    return [str(t) for t in seq]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence) -> float:
    """Corpus BLEU-4 over whitespace tokens with brevity penalty.

    Modified n-gram precisions are aggregated over the corpus; orders above
    1 get add-one smoothing so short corpora never hit log(0).  A zero
    1-gram overlap scores 0.
    """
    if len(hypotheses) != len(references):
        raise EvalError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise EvalError("corpus_bleu over an empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = _as_tokens(hyp)
        r = _as_tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hg = _ngrams(h, n)
            rg = _ngrams(r, n)
            totals[n - 1] += sum(hg.values())
            matches[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())
    if hyp_len == 0:
        return 0.0
    precisions = []
    for n in range(4):
        m, t = matches[n], totals[n]
        if n == 0:
            if m == 0:
                return 0.0
            precisions.append(m / t)
        else:
            precisions.append((m + 1) / (t + 1))
    log_mean = sum(math.log(p) for p in precisions) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(1, hyp_len))
    return 100.0 * bp * math.exp(log_mean)


# ---------------------------------------------------------------------------
# Corpus-level evaluation


@dataclass
class DirectionMetrics:
    bleu: float
    token_accuracy: float
    exact_match: float

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "token_accuracy": self.token_accuracy,
            "exact_match": self.exact_match,
        }


@dataclass
class MetricsReport:
    directions: dict[str, DirectionMetrics]
    tiers: dict[str, str]

    def aggregate(self, tier: Optional[str] = None) -> dict:
        keys = [d for d in self.directions if tier is None or self.tiers[d] == tier]
        if not keys:
            return {"bleu": None, "token_accuracy": None, "exact_match": None}
        return {
            "bleu": float(np.mean([self.directions[d].bleu for d in keys])),
            "token_accuracy": float(np.mean([self.directions[d].token_accuracy for d in keys])),
            "exact_match": float(np.mean([self.directions[d].exact_match for d in keys])),
        }

    def to_dict(self) -> dict:
        return {
            "directions": {d: m.to_dict() for d, m in sorted(self.directions.items())},
            "aggregates": {
                "all": self.aggregate(),
                "high": self.aggregate(HIGH),
                "low": self.aggregate(LOW),
            },
        }


def decode_corpus(
    params: ModelParams,
    corpus: ParallelCorpus,
    beam_size: int,
    max_len: int,
    length_penalty: float = 1.0,
) -> list[list[int]]:
    sources = [src for src, _ in corpus.pairs]
    if beam_size == 1:
        return greedy_decode_batch(params, sources, corpus.tgt_lang, max_len)
    return [
        beam_decode(params, src, corpus.tgt_lang, beam_size, max_len, length_penalty)
        for src in sources
    ]


def evaluate_model(
    params: ModelParams,
    dev: dict[str, ParallelCorpus],
    vocab: Vocabulary,
    *,
    beam_size: int = 1,
    length_penalty: float = 1.0,
    max_len: Optional[int] = None,
) -> MetricsReport:
    """Decode every dev direction and report BLEU, teacher-forced token
    accuracy, and exact-match rate."""
    if max_len is None:
        max_len = params.config.max_seq_len - 1
    directions = {}
    tiers = {}
    for lang in sorted(dev):
        corpus = dev[lang]
        hyps = decode_corpus(params, corpus, beam_size, max_len, length_penalty)
        refs = [tgt[:-1] for _, tgt in corpus.pairs]
        hyp_tok = [vocab.decode(h) for h in hyps]
        ref_tok = [vocab.decode(r) for r in refs]
        exact = sum(1 for h, r in zip(hyps, refs) if tuple(h) == tuple(r)) / len(corpus.pairs)
        directions[lang] = DirectionMetrics(
            bleu=corpus_bleu(hyp_tok, ref_tok),
            token_accuracy=token_accuracy(params, corpus),
            exact_match=exact,
        )
        tiers[lang] = params.tier(lang)
    return MetricsReport(directions, tiers)


# ---------------------------------------------------------------------------
# Gradient conflict


def pairwise_cosine(vectors: dict[str, np.ndarray]) -> tuple[list[str], list[list[Optional[float]]]]:
    """Cosine similarity between every pair of named vectors.  A zero-norm
    vector makes its row and column undefined (None), never 0."""
    names = list(vectors)
    norms = {n: float(np.linalg.norm(vectors[n])) for n in names}
    values: list[list[Optional[float]]] = []
    for a in names:
        row: list[Optional[float]] = []
        for b in names:
            if norms[a] == 0.0 or norms[b] == 0.0:
                row.append(None)
            elif a == b:
                row.append(1.0)
            else:
                row.append(float(np.dot(vectors[a], vectors[b]) / (norms[a] * norms[b])))
        values.append(row)
    return names, values


@dataclass
class ConflictReport:
    partition: str
    languages: list[str]
    values: list[list[Optional[float]]]

    def to_dict(self) -> dict:
        return {
            "partition": self.partition,
            "languages": self.languages,
            "values": self.values,
        }


def probe_batch(corpus: ParallelCorpus, token_budget: int) -> Batch:
    """The first dev batch for a direction: pairs in corpus order filled up
    to the token budget."""
    pairs = []
    tokens = 0
    for pair in corpus.pairs:
        if pairs and tokens + len(pair[1]) > token_budget:
            break
        pairs.append(pair)
        tokens += len(pair[1])
        if tokens >= token_budget:
            break
    return pack_batch(corpus.tgt_lang, pairs)


def direction_gradient(
    params: ModelParams,
    batch: Batch,
    partition: str = "shared",
    smoothing: float = 0.1,
) -> np.ndarray:
    """Flattened loss gradient of one direction over a parameter partition,
    computed in isolation (hard routing, no disparity term)."""
    if partition == "all":
        names = sorted(params.params)
    else:
        names = sorted(params.partition_names(partition))
    if not names:
        raise EvalError(f"partition {partition!r} selects no parameters")
    params.zero_grads()
    with tt.Tape() as tape:
        logits, _ = model_forward(params, batch.src, batch.tgt_in, batch.tgt_lang,
                                  path_mode="hard")
        loss, _ = label_smoothed_cross_entropy(logits, batch.tgt_out, smoothing)
        tape.backward(loss)
        tape.clear()
    pieces = []
    for n in names:
        p = params.params[n]
        pieces.append((p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1))
    params.zero_grads()
    return np.concatenate(pieces)


def gradient_conflict_matrix(
    params: ModelParams,
    probes: dict[str, Batch],
    partition: str = "shared",
    smoothing: float = 0.1,
) -> ConflictReport:
    """Pairwise cosine of per-direction loss gradients on probe batches."""
    grads = {
        lang: direction_gradient(params, batch, partition, smoothing)
        for lang, batch in sorted(probes.items())
    }
    names, values = pairwise_cosine(grads)
    return ConflictReport(partition=partition, languages=names, values=values)


# ---------------------------------------------------------------------------
# Dictionary overlap


def dictionary_overlap(corpus_a: ParallelCorpus, corpus_b: ParallelCorpus,
                       first_content_id: int) -> float:
    """Jaccard similarity of target-side token type sets, reserved and
    symbol tokens excluded."""
    types_a = {t for _, tgt in corpus_a.pairs for t in tgt if t >= first_content_id}
    types_b = {t for _, tgt in corpus_b.pairs for t in tgt if t >= first_content_id}
    union = types_a | types_b
    if not union:
        return 1.0
    return len(types_a & types_b) / len(union)


# ---------------------------------------------------------------------------
# Selection table


def selection_report(params: ModelParams) -> list[dict]:
    """Per-language routing summary: selection weights and chosen module for
    high-resource languages, the universal module for low-resource ones."""
    rows = []
    for lang in params.languages:
        if params.variant != "slp":
            rows.append({"language": lang.id, "tier": lang.tier, "module": None, "alpha": None})
            continue
        if lang.tier == HIGH:
            sp = selection_probs(params, lang.id)
            rows.append({
                "language": lang.id,
                "tier": lang.tier,
                "module": select_module(params, lang.id),
                "alpha": [float(a) for a in sp.alpha],
            })
        else:
            rows.append({"language": lang.id, "tier": lang.tier,
                         "module": "universal", "alpha": None})
    return rows


# ---------------------------------------------------------------------------
# Decoder state export


def export_decoder_representations(
    params: ModelParams,
    sentences: Sequence[Sequence[int]],
    layer,
    out_path: Optional[Path] = None,
) -> list[dict]:
    """First-position decoder state for every (language, sentence) pair.

    `sentences` hold content token ids without the language symbol; the
    symbol for each registered language is prefixed in turn.  `layer` is a
    decoder layer index or "slp-output" for the routed state.  Rows go to a
    TSV (language, sentence index, layer, one column per dimension) when
    `out_path` is given.
    """
    n_layers = params.config.num_decoder_layers
    if layer != "slp-output":
        if not isinstance(layer, int) or not 0 <= layer < n_layers:
            raise EvalError(
                f"layer must be 'slp-output' or an int in [0, {n_layers}), got {layer!r}"
            )
    if layer == "slp-output" and params.variant != "slp":
        raise EvalError("baseline variant has no routed state to export")
    rows = []
    bos = np.array([[BOS_ID]], dtype=np.int64)
    for lang in params.languages:
        for idx, sentence in enumerate(sentences):
            src = np.array([[lang.symbol_token, *sentence]], dtype=np.int64)
            collected: list = []
            h_s = forward_shared(params, src, bos, collect_layers=collected)
            if layer == "slp-output":
                state = route(params, lang.id, h_s, path_mode="hard").data[0, 0, :]
            else:
                state = collected[layer].data[0, 0, :]
            rows.append({
                "language": lang.id,
                "sentence": idx,
                "layer": layer,
                "state": state.copy(),
            })
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                vals = "\t".join(f"{x:.17g}" for x in row["state"])
                fh.write(f"{row['language']}\t{row['sentence']}\t{row['layer']}\t{vals}\n")
    return rows


def write_metrics(report: MetricsReport, path: Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
