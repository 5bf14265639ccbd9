"""Synthetic multilingual transduction corpora and batching.

Every translation direction is English-centric: the source is a random
sentence over a source alphabet drawn from a shared content-token pool, and
the target applies that language's transduction, a token substitution table
optionally followed by sequence reversal.  Substitution tables are injective
maps from the source alphabet into the content pool; languages whose table
images overlap share target-side vocabulary, which is the knob for
relatedness between languages.

Vocabulary layout is fixed: id 0 padding, 1 begin-of-sequence, 2
end-of-sequence, then one symbol token per language in registry order, then
the content tokens.  Source sequences carry the target-language symbol as
their first token; target sequences end with the end-of-sequence token.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import HIGH, LOW, LanguageInfo

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_SPECIALS = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"


class DataError(ValueError):
    """Invalid language spec, vocabulary, or corpus contents."""


@dataclass(frozen=True)
class LanguageSpec:
    """Declarative description of one synthetic target language."""

    id: str
    tier: str
    corpus_size: int
    substitution: tuple[int, ...]
    reverse: bool = False

    def __post_init__(self):
        if self.tier not in (HIGH, LOW):
            raise DataError(f"{self.id}: tier must be 'high' or 'low', got {self.tier!r}")
        if self.corpus_size < 1:
            raise DataError(f"{self.id}: corpus_size must be positive")
        if len(set(self.substitution)) != len(self.substitution):
            raise DataError(f"{self.id}: substitution table must be injective")
        if any(v < 0 for v in self.substitution):
            raise DataError(f"{self.id}: substitution entries must be non-negative")

    def transduce(self, sentence: Sequence[int]) -> list[int]:
        out = [self.substitution[tok] for tok in sentence]
        if self.reverse:
            out.reverse()
        return out


class Vocabulary:
    """Bijection between token strings and contiguous integer ids."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("duplicate token strings in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise DataError(f"token id {idx} out of range [0, {len(self.tokens)})")
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]


def symbol_token_string(lang_id: str) -> str:
    return f"<{lang_id}>"


def content_token_string(pool_index: int) -> str:
    return f"w{pool_index}"


def build_vocab(specs: Sequence[LanguageSpec], base_vocab_size: int) -> Vocabulary:
    """Reserved specials, one symbol per language, then the content pool."""
    tokens = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN]
    tokens += [symbol_token_string(s.id) for s in specs]
    tokens += [content_token_string(i) for i in range(base_vocab_size)]
    return Vocabulary(tokens)


def first_content_id(num_languages: int) -> int:
    return NUM_SPECIALS + num_languages


def language_infos(specs: Sequence[LanguageSpec]) -> list[LanguageInfo]:
    return [LanguageInfo(s.id, s.tier, NUM_SPECIALS + k) for k, s in enumerate(specs)]


@dataclass
class ParallelCorpus:
    """Encoded sentence pairs for one direction.

    Source sequences start with the target-language symbol token; target
    sequences end with the end-of-sequence token.
    """

    src_lang: str
    tgt_lang: str
    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]

    def __len__(self) -> int:
        return len(self.pairs)

    def target_tokens(self) -> int:
        return sum(len(t) for _, t in self.pairs)

    def validate(self, symbol_token: int) -> None:
        for src, tgt in self.pairs:
            if not src or src[0] != symbol_token:
                raise DataError(
                    f"{self.src_lang}-{self.tgt_lang}: pair does not start with symbol "
                    f"{symbol_token}, got {src[:1]}"
                )
            if not tgt or tgt[-1] != EOS_ID:
                raise DataError(f"{self.src_lang}-{self.tgt_lang}: pair missing end-of-sequence")


@dataclass
class SyntheticSuite:
    seed: int
    base_vocab_size: int
    source_alphabet_size: int
    dev_size: int
    min_len: int
    max_len: int
    specs: tuple[LanguageSpec, ...]
    vocab: Vocabulary
    train: dict[str, ParallelCorpus]
    dev: dict[str, ParallelCorpus]

    def languages(self) -> list[LanguageInfo]:
        return language_infos(self.specs)

    def spec(self, lang_id: str) -> LanguageSpec:
        for s in self.specs:
            if s.id == lang_id:
                return s
        raise DataError(f"no language {lang_id!r} in suite")


def _validate_specs(specs: Sequence[LanguageSpec], base_vocab_size: int, source_alphabet_size: int) -> None:
    if source_alphabet_size < 1 or source_alphabet_size > base_vocab_size:
        raise DataError(
            f"source alphabet size {source_alphabet_size} must lie in [1, {base_vocab_size}]"
        )
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate language ids: {ids}")
    tiers = [s.tier for s in specs]
    if tiers.count(HIGH) < 2 or tiers.count(LOW) < 1:
        raise DataError("suite needs at least two high-resource and one low-resource language")
    for s in specs:
        if len(s.substitution) != source_alphabet_size:
            raise DataError(
                f"{s.id}: substitution table covers {len(s.substitution)} tokens, "
                f"source alphabet has {source_alphabet_size}"
            )
        if max(s.substitution) >= base_vocab_size:
            raise DataError(
                f"{s.id}: base_vocab_size {base_vocab_size} too small to host the "
                f"substitution range (max entry {max(s.substitution)})"
            )


def _emit_pairs(
    spec: LanguageSpec,
    count: int,
    rng: np.random.Generator,
    *,
    source_alphabet_size: int,
    min_len: int,
    max_len: int,
    symbol: int,
    content_base: int,
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    pairs = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        sentence = rng.integers(0, source_alphabet_size, size=length).tolist()
        target = spec.transduce(sentence)
        src_ids = (symbol,) + tuple(content_base + t for t in sentence)
        tgt_ids = tuple(content_base + t for t in target) + (EOS_ID,)
        pairs.append((src_ids, tgt_ids))
    return pairs


def generate_synthetic_suite(
    seed: int,
    specs: Sequence[LanguageSpec],
    *,
    base_vocab_size: int = 50,
    source_alphabet_size: int = 20,
    dev_size: int = 200,
    min_len: int = 4,
    max_len: int = 16,
) -> SyntheticSuite:
    """Generate train and dev corpora for every English-centric direction.

    Pure in (seed, specs, sizes): the same inputs always produce the same
    suite.  Each language draws from its own child stream, so per-language
    generation is order-independent.
    """
    specs = tuple(specs)
    _validate_specs(specs, base_vocab_size, source_alphabet_size)
    if min_len < 1 or max_len < min_len:
        raise DataError(f"bad length range [{min_len}, {max_len}]")
    vocab = build_vocab(specs, base_vocab_size)
    content_base = first_content_id(len(specs))
    train: dict[str, ParallelCorpus] = {}
    dev: dict[str, ParallelCorpus] = {}
    children = np.random.SeedSequence(seed).spawn(len(specs))
    for k, spec in enumerate(specs):
        train_rng, dev_rng = (np.random.default_rng(s) for s in children[k].spawn(2))
        symbol = NUM_SPECIALS + k
        common = dict(
            source_alphabet_size=source_alphabet_size,
            min_len=min_len,
            max_len=max_len,
            symbol=symbol,
            content_base=content_base,
        )
        train[spec.id] = ParallelCorpus("en", spec.id, _emit_pairs(spec, spec.corpus_size, train_rng, **common))
        dev[spec.id] = ParallelCorpus("en", spec.id, _emit_pairs(spec, dev_size, dev_rng, **common))
    return SyntheticSuite(
        seed=seed,
        base_vocab_size=base_vocab_size,
        source_alphabet_size=source_alphabet_size,
        dev_size=dev_size,
        min_len=min_len,
        max_len=max_len,
        specs=specs,
        vocab=vocab,
        train=train,
        dev=dev,
    )


# ---------------------------------------------------------------------------
# Temperature-based direction sampling


@dataclass(frozen=True)
class SamplingSchedule:
    """Per-epoch temperature ramp: start at `start_temperature`, rise
    linearly over `warmup_epochs`, then stay at `peak_temperature`."""

    start_temperature: float = 1.0
    peak_temperature: float = 5.0
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.start_temperature <= 0 or self.peak_temperature <= 0:
            raise DataError("temperatures must be positive")
        if self.warmup_epochs < 1:
            raise DataError("warmup_epochs must be >= 1")


def temperature_at_epoch(schedule: SamplingSchedule, epoch: int) -> float:
    if epoch < 0:
        raise DataError(f"epoch must be non-negative, got {epoch}")
    t0, t1 = schedule.start_temperature, schedule.peak_temperature
    return min(t1, t0 + (epoch / schedule.warmup_epochs) * (t1 - t0))


def direction_sampling_weights(sizes: Sequence[int], temperature: float) -> np.ndarray:
    """p_d proportional to (n_d / sum n)^(1/temperature)."""
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or (sizes <= 0).any():
        raise DataError(f"corpus sizes must be positive, got {sizes}")
    shares = sizes / sizes.sum()
    w = shares ** (1.0 / temperature)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """One training batch for a single direction, padded to max length."""

    tgt_lang: str
    src: np.ndarray       # (B, S) int64, PAD_ID padded
    tgt_in: np.ndarray    # (B, T) teacher-forcing input (BOS + target[:-1])
    tgt_out: np.ndarray   # (B, T) labels (target + EOS), PAD_ID padded
    n_target_tokens: int  # non-pad label count

    @property
    def size(self) -> int:
        return self.src.shape[0]


def pack_batch(tgt_lang: str, pairs: Sequence[tuple[tuple[int, ...], tuple[int, ...]]]) -> Batch:
    if not pairs:
        raise DataError("cannot pack an empty batch")
    s_max = max(len(s) for s, _ in pairs)
    t_max = max(len(t) for _, t in pairs)
    b = len(pairs)
    src = np.full((b, s_max), PAD_ID, dtype=np.int64)
    tgt_in = np.full((b, t_max), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, t_max), PAD_ID, dtype=np.int64)
    for r, (s, t) in enumerate(pairs):
        src[r, : len(s)] = s
        tgt_in[r, 0] = BOS_ID
        tgt_in[r, 1 : len(t)] = t[:-1]
        tgt_out[r, : len(t)] = t
    return Batch(tgt_lang, src, tgt_in, tgt_out, int(sum(len(t) for _, t in pairs)))


class BatchSampler:
    """Token-budget batches, one direction per batch.

    Each call picks a direction by the current weights, then fills the batch
    from that direction's shuffled cursor until the target-token budget is
    reached (always at least one pair).  Cursors reshuffle when exhausted, so
    within a direction every pair is visited before any repeats.
    """

    def __init__(
        self,
        corpora: dict[str, ParallelCorpus],
        token_budget: int,
        rng: np.random.Generator,
    ):
        if token_budget < 1:
            raise DataError("token budget must be positive")
        if not corpora:
            raise DataError("no corpora to sample from")
        self.corpora = dict(corpora)
        self.directions = list(self.corpora)
        self.token_budget = token_budget
        self.rng = rng
        self.weights = direction_sampling_weights([len(c) for c in self.corpora.values()], 1.0)
        self._order = {d: self.rng.permutation(len(self.corpora[d])) for d in self.directions}
        self._cursor = {d: 0 for d in self.directions}

    def set_temperature(self, temperature: float) -> None:
        self.weights = direction_sampling_weights(
            [len(self.corpora[d]) for d in self.directions], temperature
        )

    def draw_direction(self) -> str:
        return self.directions[int(self.rng.choice(len(self.directions), p=self.weights))]

    def _next_pair(self, direction: str):
        corpus = self.corpora[direction]
        if self._cursor[direction] >= len(corpus):
            self._order[direction] = self.rng.permutation(len(corpus))
            self._cursor[direction] = 0
        pair = corpus.pairs[self._order[direction][self._cursor[direction]]]
        self._cursor[direction] += 1
        return pair

    def next_batch(self) -> Batch:
        direction = self.draw_direction()
        pairs = []
        tokens = 0
        while True:
            pair = self._next_pair(direction)
            if pairs and tokens + len(pair[1]) > self.token_budget:
                self._cursor[direction] -= 1  # push back for the next batch
                break
            pairs.append(pair)
            tokens += len(pair[1])
            if tokens >= self.token_budget:
                break
        return pack_batch(direction, pairs)


def steps_per_epoch(corpora: dict[str, ParallelCorpus], token_budget: int) -> int:
    total = sum(c.target_tokens() for c in corpora.values())
    return max(1, math.ceil(total / token_budget))


# ---------------------------------------------------------------------------
# On-disk formats


def write_vocab(vocab: Vocabulary, path: Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def read_vocab(path: Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocabulary(lines)


def write_corpus(corpus: ParallelCorpus, vocab: Vocabulary, path: Path) -> None:
    """One pair per line: src-lang, tgt-lang, source tokens, target tokens,
    tab separated.  The trailing end-of-sequence token is a framing detail
    and is not written."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in corpus.pairs:
            body = tgt[:-1] if tgt and tgt[-1] == EOS_ID else tgt
            fh.write(
                f"{corpus.src_lang}\t{corpus.tgt_lang}\t"
                f"{' '.join(vocab.decode(src))}\t{' '.join(vocab.decode(body))}\n"
            )


def read_corpus(path: Path, vocab: Vocabulary) -> ParallelCorpus:
    pairs = []
    src_lang = tgt_lang = None
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataError(f"{path}:{ln}: expected 4 tab-separated columns, got {len(cols)}")
            sl, tl, s_toks, t_toks = cols
            if src_lang is None:
                src_lang, tgt_lang = sl, tl
            elif (sl, tl) != (src_lang, tgt_lang):
                raise DataError(f"{path}:{ln}: mixed directions in one corpus file")
            src = tuple(vocab.encode(s_toks.split(" "))) if s_toks else ()
            tgt = tuple(vocab.encode(t_toks.split(" "))) if t_toks else ()
            pairs.append((src, tgt + (EOS_ID,)))
    if src_lang is None:
        raise DataError(f"{path}: empty corpus file")
    return ParallelCorpus(src_lang, tgt_lang, pairs)


def suite_manifest(suite: SyntheticSuite) -> dict:
    return {
        "seed": suite.seed,
        "base_vocab_size": suite.base_vocab_size,
        "source_alphabet_size": suite.source_alphabet_size,
        "dev_size": suite.dev_size,
        "min_len": suite.min_len,
        "max_len": suite.max_len,
        "vocab_size": len(suite.vocab),
        "languages": [
            {
                "id": s.id,
                "tier": s.tier,
                "corpus_size": s.corpus_size,
                "substitution": list(s.substitution),
                "reverse": s.reverse,
                "symbol_token": NUM_SPECIALS + k,
            }
            for k, s in enumerate(suite.specs)
        ],
    }


def save_suite(suite: SyntheticSuite, out_dir: Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vocab(suite.vocab, out / "vocab.txt")
    for split, corpora in (("train", suite.train), ("dev", suite.dev)):
        for lang, corpus in corpora.items():
            write_corpus(corpus, suite.vocab, out / f"{split}.en-{lang}.tsv")
    (out / "suite.json").write_text(
        json.dumps(suite_manifest(suite), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_suite(data_dir: Path) -> SyntheticSuite:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "suite.json").read_text(encoding="utf-8"))
    specs = tuple(
        LanguageSpec(
            id=l["id"],
            tier=l["tier"],
            corpus_size=l["corpus_size"],
            substitution=tuple(l["substitution"]),
            reverse=l["reverse"],
        )
        for l in manifest["languages"]
    )
    vocab = read_vocab(data_dir / "vocab.txt")
    if len(vocab) != manifest["vocab_size"]:
        raise DataError(
            f"vocab size mismatch: file has {len(vocab)}, manifest says {manifest['vocab_size']}"
        )
    train, dev = {}, {}
    for k, spec in enumerate(specs):
        symbol = NUM_SPECIALS + k
        for split, store in (("train", train), ("dev", dev)):
            corpus = read_corpus(data_dir / f"{split}.en-{spec.id}.tsv", vocab)
            corpus.validate(symbol)
            store[spec.id] = corpus
    return SyntheticSuite(
        seed=manifest["seed"],
        base_vocab_size=manifest["base_vocab_size"],
        source_alphabet_size=manifest["source_alphabet_size"],
        dev_size=manifest["dev_size"],
        min_len=manifest["min_len"],
        max_len=manifest["max_len"],
        specs=specs,
        vocab=vocab,
        train=train,
        dev=dev,
    )


# ---------------------------------------------------------------------------
# Table construction helpers


def shifted_table(source_alphabet_size: int, range_start: int, rng: Optional[np.random.Generator] = None) -> tuple[int, ...]:
    """Map the source alphabet into the contiguous pool block starting at
    `range_start`, optionally shuffled within the block."""
    if rng is None:
        return tuple(range(range_start, range_start + source_alphabet_size))
    perm = rng.permutation(source_alphabet_size)
    return tuple(range_start + int(p) for p in perm)


def identity_table(source_alphabet_size: int) -> tuple[int, ...]:
    return tuple(range(source_alphabet_size))
