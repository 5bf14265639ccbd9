"""Losses, optimizer, two-stage training loops, and checkpoints.

Stage 1 trains on high-resource corpora only: the shared trunk, the pool
modules, the selection head, language embeddings, and the output projection
learn together while the universal module stays frozen.  Stage 2 resumes
from a stage-1 checkpoint, re-initialises the universal module, resets the
optimizer, and trains every partition on all corpora, with low-resource
batches routed through the universal module.  The baseline variant trains
the plain joint model on everything in one stage.

Each training batch holds a single direction.  High-resource batches
alternate between hard routing (argmax module, gradient to that module
only) and soft routing (mixture of all modules, gradient reaches the
selection head), drawn per batch.  High-resource batches also add the
selection disparity penalty: the sum over language pairs of their selection
probability dot products, normalised by the batch's non-pad target token
count.  Pushing that down makes different languages prefer different
modules.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .data import (
    Batch,
    BatchSampler,
    PAD_ID,
    ParallelCorpus,
    SamplingSchedule,
    steps_per_epoch,
    temperature_at_epoch,
)
from .model import (
    HIGH,
    LOW,
    LanguageInfo,
    ModelConfig,
    ModelParams,
    model_forward,
    reinit_universal,
    selection_alpha_tensor,
)

STAGE1 = "stage1"
STAGE2 = "stage2"
BASELINE = "baseline"
STAGES = (STAGE1, STAGE2, BASELINE)

_STAGE_STREAM = {STAGE1: 101, STAGE2: 202, BASELINE: 303}


class TrainingError(RuntimeError):
    """Raised when training hits an invalid state (for example non-finite
    losses or gradients); the run must abort rather than continue."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    batch_token_budget: int = 2048
    stage1_epochs: int = 9
    stage2_epochs: int = 5
    baseline_epochs: int = 14
    soft_path_prob: float = 0.5
    disparity_enabled: bool = True
    disparity_weight: float = 1.0
    checkpoint_average_count: int = 5
    checkpoint_every_epochs: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.warmup_steps < 1:
            raise ValueError("learning_rate must be positive and warmup_steps >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.soft_path_prob <= 1.0:
            raise ValueError("soft_path_prob must lie in [0, 1]")
        if self.batch_token_budget < 1:
            raise ValueError("batch_token_budget must be positive")
        if min(self.stage1_epochs, self.stage2_epochs, self.baseline_epochs) < 1:
            raise ValueError("epoch counts must be positive")
        if self.disparity_weight < 0:
            raise ValueError("disparity_weight must be non-negative")
        if self.checkpoint_average_count < 1:
            raise ValueError("checkpoint_average_count must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Losses


def label_smoothed_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float,
    pad_id: int = PAD_ID,
) -> tuple[Tensor, int]:
    """Mean over non-pad tokens of the smoothed negative log-likelihood.

    Per token: (1 - smoothing) * NLL(target class) + smoothing * mean over
    the vocabulary of NLL.  Padded positions are excluded from the mean.
    Returns (scalar loss, non-pad token count).
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise tt.ShapeError(
            f"cross entropy: logits {logits.shape} do not cover targets {targets.shape}"
        )
    mask = targets != pad_id
    n_tokens = int(mask.sum())
    if n_tokens == 0:
        raise TrainingError("cross entropy over an all-pad target batch")
    v = logits.shape[-1]
    log_probs = tt.log(tt.softmax(logits))
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, np.where(mask, targets, 0)[..., None], 1.0, axis=-1)
    picked = tt.reduce_sum(tt.multiply(log_probs, tt.constant(onehot)), axis=-1)
    smooth = tt.reduce_mean(log_probs, axis=-1)
    combined = tt.add(
        tt.scalar_scale(picked, 1.0 - smoothing),
        tt.scalar_scale(smooth, smoothing),
    )
    masked = tt.multiply(combined, tt.constant(mask.astype(np.float64)))
    loss = tt.scalar_scale(tt.reduce_sum(masked), -1.0 / n_tokens)
    if not np.isfinite(loss.data).all():
        raise TrainingError("non-finite cross entropy loss")
    return loss, n_tokens


def disparity_loss(alphas: Sequence[Tensor], token_count: int) -> Tensor:
    """Sum over unordered language pairs of the dot product of their pool
    selection probabilities, divided by `token_count`.

    Every alpha is a (1, T) row.  Fewer than two languages give exactly
    zero.
    """
    if token_count < 1:
        raise TrainingError(f"token_count must be positive, got {token_count}")
    if len(alphas) < 2:
        return tt.constant(np.zeros(()))
    total: Optional[Tensor] = None
    for i in range(len(alphas)):
        for k in range(i + 1, len(alphas)):
            dot = tt.matmul(alphas[i], tt.transpose(alphas[k], 0, 1))  # (1, 1)
            total = dot if total is None else tt.add(total, dot)
    return tt.scalar_scale(tt.reshape(total, ()), 1.0 / token_count)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to `learning_rate`, then inverse square-root decay."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.learning_rate * min(step / w, math.sqrt(w / step))


def trainable_names(params: ModelParams, stage: str) -> list[str]:
    """Which parameters a stage updates.  Stage 1 freezes the universal
    module; everything else trains all partitions the variant has."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    names = list(params.params)
    if stage == STAGE1:
        names = [n for n in names if not n.startswith("universal.")]
    return names


def adam_update(
    params: ModelParams,
    state: AdamState,
    cfg: TrainConfig,
    names: Sequence[str],
) -> float:
    """One bias-corrected Adam step over `names`; missing gradients count as
    zero.  Returns the learning rate used.  Non-finite gradients abort."""
    state.step += 1
    lr = learning_rate_at(cfg, state.step)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in names:
        p = params.params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}; aborting run")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return lr


# ---------------------------------------------------------------------------
# Steps


@dataclass
class StepStats:
    step: int
    stage: str
    direction: str
    loss: float
    cross_entropy: float
    disparity: float
    lr: float
    path_mode: str
    n_tokens: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "stage": self.stage,
            "direction": self.direction,
            "loss": self.loss,
            "cross_entropy": self.cross_entropy,
            "disparity": self.disparity,
            "lr": self.lr,
            "path_mode": self.path_mode,
            "n_tokens": self.n_tokens,
        }


def _high_ids(params: ModelParams) -> list[str]:
    return [l.id for l in params.languages if l.tier == HIGH]


def _train_batch(
    params: ModelParams,
    batch: Batch,
    state: AdamState,
    cfg: TrainConfig,
    stage: str,
    path_mode: str,
    with_disparity: bool,
    rng: Optional[np.random.Generator],
) -> StepStats:
    params.zero_grads()
    with tt.Tape() as tape:
        logits, _ = model_forward(
            params, batch.src, batch.tgt_in, batch.tgt_lang,
            path_mode=path_mode, training=True, rng=rng,
        )
        ce, n_tokens = label_smoothed_cross_entropy(
            logits, batch.tgt_out, cfg.label_smoothing
        )
        disp_value = 0.0
        loss = ce
        if with_disparity:
            alphas = [selection_alpha_tensor(params, lid) for lid in _high_ids(params)]
            disp = disparity_loss(alphas, n_tokens)
            disp_value = float(disp.data)
            loss = tt.add(ce, tt.scalar_scale(disp, cfg.disparity_weight))
        if not np.isfinite(loss.data).all():
            raise TrainingError("non-finite training loss; aborting run")
        tape.backward(loss)
        tape.clear()
    lr = adam_update(params, state, cfg, trainable_names(params, stage))
    return StepStats(
        step=state.step,
        stage=stage,
        direction=batch.tgt_lang,
        loss=float(loss.data),
        cross_entropy=float(ce.data),
        disparity=disp_value,
        lr=lr,
        path_mode=path_mode,
        n_tokens=n_tokens,
    )


def _draw_path(cfg: TrainConfig, rng: np.random.Generator) -> str:
    return "soft" if rng.random() < cfg.soft_path_prob else "hard"


def stage1_step(
    params: ModelParams,
    batch: Batch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepStats:
    """One high-resource update: alternating hard/soft routing plus the
    disparity penalty; the universal module stays untouched."""
    if params.variant != "slp":
        raise TrainingError("stage 1 trains the pool variant, got baseline params")
    if params.tier(batch.tgt_lang) != HIGH:
        raise TrainingError(
            f"stage 1 accepts high-resource batches only, got {batch.tgt_lang!r}"
        )
    path = _draw_path(cfg, rng)
    return _train_batch(params, batch, state, cfg, STAGE1, path,
                        with_disparity=cfg.disparity_enabled, rng=rng)


def stage2_step(
    params: ModelParams,
    batch: Batch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepStats:
    """One all-corpora update.  High-resource batches behave as in stage 1;
    low-resource batches route through the universal module with plain
    cross entropy."""
    if params.variant != "slp":
        raise TrainingError("stage 2 trains the pool variant, got baseline params")
    if params.tier(batch.tgt_lang) == HIGH:
        path = _draw_path(cfg, rng)
        return _train_batch(params, batch, state, cfg, STAGE2, path,
                            with_disparity=cfg.disparity_enabled, rng=rng)
    return _train_batch(params, batch, state, cfg, STAGE2, "hard",
                        with_disparity=False, rng=rng)


def baseline_step(
    params: ModelParams,
    batch: Batch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepStats:
    if params.variant != "baseline":
        raise TrainingError("baseline training needs baseline-variant params")
    return _train_batch(params, batch, state, cfg, BASELINE, "hard",
                        with_disparity=False, rng=rng)


# ---------------------------------------------------------------------------
# Stage loops


def _stage_rng(cfg: TrainConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _STAGE_STREAM[stage]]))


def _run_epochs(
    params: ModelParams,
    corpora: dict[str, ParallelCorpus],
    stage: str,
    epochs: int,
    cfg: TrainConfig,
    schedule: SamplingSchedule,
    step_fn: Callable,
    state: AdamState,
    *,
    log_fn: Optional[Callable[[dict], None]] = None,
    checkpoint_dir: Optional[Path] = None,
    epoch_offset: int = 0,
) -> AdamState:
    rng = _stage_rng(cfg, stage)
    sampler = BatchSampler(corpora, cfg.batch_token_budget, rng)
    per_epoch = steps_per_epoch(corpora, cfg.batch_token_budget)
    for epoch in range(epochs):
        # the schedule counts cumulative training epochs, so a later stage
        # picks up the ramp where the previous one left it
        sampler.set_temperature(temperature_at_epoch(schedule, epoch_offset + epoch))
        for _ in range(per_epoch):
            stats = step_fn(params, sampler.next_batch(), state, cfg, rng)
            if log_fn is not None:
                rec = stats.to_dict()
                rec["epoch"] = epoch
                log_fn(rec)
        if checkpoint_dir is not None and cfg.checkpoint_every_epochs > 0 and (
            (epoch + 1) % cfg.checkpoint_every_epochs == 0 or epoch + 1 == epochs
        ):
            save_checkpoint(
                Path(checkpoint_dir) / f"{stage}-epoch{epoch + 1:03d}.ckpt",
                params, state, state.step, stage,
            )
    return state


def train_stage1(
    params: ModelParams,
    train_corpora: dict[str, ParallelCorpus],
    cfg: TrainConfig,
    schedule: SamplingSchedule,
    *,
    log_fn=None,
    checkpoint_dir=None,
) -> AdamState:
    """High-resource-only stage over fresh params and a fresh optimizer."""
    high = {d: c for d, c in train_corpora.items() if params.tier(d) == HIGH}
    if not high:
        raise TrainingError("stage 1 needs at least one high-resource corpus")
    state = AdamState()
    return _run_epochs(params, high, STAGE1, cfg.stage1_epochs, cfg, schedule,
                       stage1_step, state, log_fn=log_fn, checkpoint_dir=checkpoint_dir)


def train_stage2(
    params: ModelParams,
    train_corpora: dict[str, ParallelCorpus],
    cfg: TrainConfig,
    schedule: SamplingSchedule,
    *,
    log_fn=None,
    checkpoint_dir=None,
) -> AdamState:
    """All-corpora stage.  The universal module is freshly re-initialised,
    the optimizer restarts from zero moments, and the sampling-temperature
    ramp continues from the end of stage 1 rather than starting over."""
    missing = [d for d in train_corpora if params.tier(d) == LOW]
    if not missing:
        raise TrainingError("stage 2 expects at least one low-resource corpus")
    reinit_universal(params, _stage_rng(cfg, STAGE2))
    state = AdamState()
    return _run_epochs(params, dict(train_corpora), STAGE2, cfg.stage2_epochs, cfg,
                       schedule, stage2_step, state, log_fn=log_fn,
                       checkpoint_dir=checkpoint_dir,
                       epoch_offset=cfg.stage1_epochs)


def train_baseline(
    params: ModelParams,
    train_corpora: dict[str, ParallelCorpus],
    cfg: TrainConfig,
    schedule: SamplingSchedule,
    *,
    log_fn=None,
    checkpoint_dir=None,
) -> AdamState:
    """Single-stage joint training of the plain model on all corpora."""
    state = AdamState()
    return _run_epochs(params, dict(train_corpora), BASELINE, cfg.baseline_epochs,
                       cfg, schedule, baseline_step, state, log_fn=log_fn,
                       checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Binary layout, all little-endian:
#   magic "SLPMNMT1" | u32 format version | u32 json length | header JSON
#   | u64 step | u16 stage length | stage | u32 array count
#   | per array: u16 name length | name | u8 ndim | u32 dims... | f64 data
# Arrays are written in sorted name order under the namespaces "param/",
# "adam_m/", "adam_v/"; the header JSON carries the model config, language
# registry, and variant.  Loading then saving reproduces the bytes exactly.

CKPT_MAGIC = b"SLPMNMT1"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    languages: tuple[LanguageInfo, ...]
    variant: str
    step: int
    stage: str
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]

    def to_model(self) -> tuple[ModelParams, AdamState]:
        tensors = {n: tt.parameter(a.copy()) for n, a in self.params.items()}
        model = ModelParams(self.config, self.languages, tensors, variant=self.variant)
        state = AdamState(
            step=self.step,
            m={n: a.copy() for n, a in self.adam_m.items()},
            v={n: a.copy() for n, a in self.adam_v.items()},
        )
        return model, state


def checkpoint_from(params: ModelParams, state: AdamState, step: int, stage: str) -> Checkpoint:
    return Checkpoint(
        config=params.config,
        languages=params.languages,
        variant=params.variant,
        step=step,
        stage=stage,
        params={n: p.data.copy() for n, p in params.params.items()},
        adam_m={n: a.copy() for n, a in state.m.items()},
        adam_v={n: a.copy() for n, a in state.v.items()},
    )


def _header_json(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "languages": [
            {"id": l.id, "tier": l.tier, "symbol_token": l.symbol_token}
            for l in ckpt.languages
        ],
        "variant": ckpt.variant,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: Path, params: ModelParams, state: AdamState, step: int, stage: str) -> None:
    write_checkpoint(Path(path), checkpoint_from(params, state, step, stage))


def write_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    if stage_invalid(ckpt.stage):
        raise CheckpointError(f"invalid stage tag {ckpt.stage!r}")
    arrays: dict[str, np.ndarray] = {}
    for n, a in ckpt.params.items():
        arrays[f"param/{n}"] = a
    for n, a in ckpt.adam_m.items():
        arrays[f"adam_m/{n}"] = a
    for n, a in ckpt.adam_v.items():
        arrays[f"adam_v/{n}"] = a
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = _header_json(ckpt)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", ckpt.step))
    stage_b = ckpt.stage.encode("ascii")
    buf.write(struct.pack("<H", len(stage_b)))
    buf.write(stage_b)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def stage_invalid(stage: str) -> bool:
    return stage not in STAGES


def read_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(8)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (json_len,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(json_len)).decode("utf-8"))
    (step,) = struct.unpack("<Q", take(8))
    (stage_len,) = struct.unpack("<H", take(2))
    stage = bytes(take(stage_len)).decode("ascii")
    if stage_invalid(stage):
        raise CheckpointError(f"{path}: invalid stage tag {stage!r}")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n_items * 8), dtype="<f8").reshape(shape).copy()
        arrays[name] = data
    if off != len(view):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    config = ModelConfig(**header["config"])
    languages = tuple(
        LanguageInfo(l["id"], l["tier"], l["symbol_token"]) for l in header["languages"]
    )
    params = {n[len("param/"):] : a for n, a in arrays.items() if n.startswith("param/")}
    adam_m = {n[len("adam_m/"):] : a for n, a in arrays.items() if n.startswith("adam_m/")}
    adam_v = {n[len("adam_v/"):] : a for n, a in arrays.items() if n.startswith("adam_v/")}
    return Checkpoint(config, languages, header["variant"], step, stage, params, adam_m, adam_v)


def load_checkpoint(path: Path) -> tuple[ModelParams, AdamState, int, str]:
    ckpt = read_checkpoint(path)
    model, state = ckpt.to_model()
    return model, state, ckpt.step, ckpt.stage


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean of every parameter array; optimizer moments, step,
    and stage tag come from the last checkpoint."""
    if not ckpts:
        raise CheckpointError("average_checkpoints needs at least one checkpoint")
    last = ckpts[-1]
    names = set(last.params)
    for c in ckpts:
        if set(c.params) != names:
            raise CheckpointError("checkpoints disagree on parameter names")
        if c.config != last.config or c.variant != last.variant or c.languages != last.languages:
            raise CheckpointError("checkpoints disagree on model config")
        for n in names:
            if c.params[n].shape != last.params[n].shape:
                raise CheckpointError(f"checkpoints disagree on shape of {n}")
    mean = {
        n: np.mean([c.params[n] for c in ckpts], axis=0) for n in sorted(names)
    }
    return Checkpoint(
        config=last.config,
        languages=last.languages,
        variant=last.variant,
        step=last.step,
        stage=last.stage,
        params=mean,
        adam_m={n: a.copy() for n, a in last.adam_m.items()},
        adam_v={n: a.copy() for n, a in last.adam_v.items()},
    )
