"""Experiment configuration: a strict JSON schema over the dataclass configs.

Unknown keys are an error at every level so a typo in a sweep never runs
silently with defaults.  Configs round-trip losslessly through to_dict /
from_dict and through files on disk.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import LanguageSpec, SamplingSchedule, shifted_table
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed, required, ctx: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{ctx}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {unknown}")
    missing = sorted(set(required) - set(d))
    if missing:
        raise ConfigError(f"{ctx}: missing keys {missing}")


def _dataclass_from_dict(cls, d: dict, ctx: str):
    names = [f.name for f in fields(cls)]
    _check_keys(d, names, (), ctx)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{ctx}: {e}") from e


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = "corpus"
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {"corpus_dir": self.corpus_dir, "output_dir": self.output_dir}


@dataclass(frozen=True)
class DataConfig:
    """Synthetic suite parameters, including the full language roster."""

    languages: tuple[LanguageSpec, ...]
    seed: int = 1
    base_vocab_size: int = 50
    source_alphabet_size: int = 20
    dev_size: int = 200
    min_len: int = 4
    max_len: int = 16

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "base_vocab_size": self.base_vocab_size,
            "source_alphabet_size": self.source_alphabet_size,
            "dev_size": self.dev_size,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "languages": [
                {
                    "id": s.id,
                    "tier": s.tier,
                    "corpus_size": s.corpus_size,
                    "substitution": list(s.substitution),
                    "reverse": s.reverse,
                }
                for s in self.languages
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "DataConfig":
        names = [f.name for f in fields(DataConfig)]
        _check_keys(d, names, ("languages",), "data")
        langs = []
        for i, entry in enumerate(d["languages"]):
            _check_keys(entry, ("id", "tier", "corpus_size", "substitution", "reverse"),
                        ("id", "tier", "corpus_size", "substitution"), f"data.languages[{i}]")
            try:
                langs.append(LanguageSpec(
                    id=entry["id"],
                    tier=entry["tier"],
                    corpus_size=entry["corpus_size"],
                    substitution=tuple(entry["substitution"]),
                    reverse=entry.get("reverse", False),
                ))
            except ValueError as e:
                raise ConfigError(f"data.languages[{i}]: {e}") from e
        rest = {k: v for k, v in d.items() if k != "languages"}
        try:
            return DataConfig(languages=tuple(langs), **rest)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data: {e}") from e


@dataclass(frozen=True)
class EvalConfig:
    beam_size: int = 4
    length_penalty: float = 1.0
    max_decode_len: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "beam_size": self.beam_size,
            "length_penalty": self.length_penalty,
            "max_decode_len": self.max_decode_len,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    sampling: SamplingSchedule
    eval: EvalConfig

    def to_dict(self) -> dict:
        return {
            "paths": self.paths.to_dict(),
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sampling": dataclasses.asdict(self.sampling),
            "eval": self.eval.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        _check_keys(d, ("paths", "data", "model", "train", "sampling", "eval"),
                    ("data",), "config")
        return ExperimentConfig(
            paths=_dataclass_from_dict(PathsConfig, d.get("paths", {}), "paths"),
            data=DataConfig.from_dict(d["data"]),
            model=_dataclass_from_dict(ModelConfig, d.get("model", {}), "model"),
            train=_dataclass_from_dict(TrainConfig, d.get("train", {}), "train"),
            sampling=_dataclass_from_dict(SamplingSchedule, d.get("sampling", {}), "sampling"),
            eval=_dataclass_from_dict(EvalConfig, d.get("eval", {}), "eval"),
        )

    def expected_vocab_size(self) -> int:
        from .data import NUM_SPECIALS

        return NUM_SPECIALS + len(self.data.languages) + self.data.base_vocab_size

    def validate(self) -> None:
        """Cross-section checks that single sections cannot see."""
        v = self.expected_vocab_size()
        if self.model.vocab_size != v:
            raise ConfigError(
                f"model.vocab_size {self.model.vocab_size} does not match the "
                f"suite vocabulary ({v} = specials + languages + content pool)"
            )
        # longest source row: symbol + max_len tokens; target rows are shorter
        need = self.data.max_len + 1
        if self.model.max_seq_len < need:
            raise ConfigError(
                f"model.max_seq_len {self.model.max_seq_len} too small for "
                f"sentences of length {self.data.max_len} (need >= {need})"
            )


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")
    cfg = ExperimentConfig.from_dict(raw)
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def config_sha256(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def default_experiment_config() -> ExperimentConfig:
    """The reference desk-scale workload: four high-resource languages and
    two low-resource ones over a 50-token content pool.

    Substitution ranges overlap deliberately: ha and hb map the alphabet
    into the same pool block under different permutations (maximal lexical
    overlap, conflicting mappings), hc half-overlaps them, and hd uses a
    disjoint block with reversed word order.  Each low-resource language
    shadows one high-resource language exactly (la uses ha's table, lb uses
    hd's table and word order), so the mapping itself transfers and stage 2
    only has to bind the new language symbol; in joint training the shadow
    still competes with the conflicting family members.
    """
    rng = np.random.default_rng(20260401)
    k = 20
    table_ha = shifted_table(k, 20, rng)
    table_hb = shifted_table(k, 20, rng)
    table_hc = shifted_table(k, 30, rng)
    table_hd = shifted_table(k, 0, rng)
    languages = (
        LanguageSpec("ha", "high", 20000, table_ha),
        LanguageSpec("hb", "high", 20000, table_hb),
        LanguageSpec("hc", "high", 20000, table_hc),
        LanguageSpec("hd", "high", 20000, table_hd, reverse=True),
        LanguageSpec("la", "low", 500, table_ha),
        LanguageSpec("lb", "low", 500, table_hd, reverse=True),
    )
    data = DataConfig(languages=languages)
    model = ModelConfig(vocab_size=3 + len(languages) + data.base_vocab_size)
    cfg = ExperimentConfig(
        paths=PathsConfig(),
        data=data,
        model=model,
        train=TrainConfig(),
        sampling=SamplingSchedule(),
        eval=EvalConfig(),
    )
    cfg.validate()
    return cfg


def clustering_experiment_config() -> ExperimentConfig:
    """Workload for studying which pool module each language selects.

    Two high-resource languages share one substitution table exactly; the
    other two use tables disjoint from that pair and from each other.  With
    a two-module pool, the identical pair should gravitate to one module
    and the disjoint languages should have no reason to join them.

    The selection matrix starts at zero so every language opens at uniform
    routing: co-selection then has to emerge from task-correlated gradients
    rather than whichever module the init noise happened to favour.  A
    deliberately small trunk and bottleneck keep module capacity scarce, so
    sharing a module is cheap for the identical pair and costly for the
    disjoint ones.
    """
    rng = np.random.default_rng(20260402)
    k = 15
    shared_table = shifted_table(k, 0, rng)
    languages = (
        LanguageSpec("pa", "high", 2000, shared_table),
        LanguageSpec("pb", "high", 2000, shared_table),
        LanguageSpec("pc", "high", 2000, shifted_table(k, 20, rng)),
        LanguageSpec("pd", "high", 2000, shifted_table(k, 35, rng)),
        LanguageSpec("lx", "low", 200, shifted_table(k, 20, rng)),
    )
    data = DataConfig(languages=languages, source_alphabet_size=k)
    model = ModelConfig(
        embed_dim=32,
        slp_hidden_dim=40,
        num_slp_modules=2,
        num_encoder_layers=1,
        num_decoder_layers=1,
        ffn_dim=64,
        vocab_size=3 + len(languages) + data.base_vocab_size,
        selection_init_scale=0.0,
    )
    cfg = ExperimentConfig(
        paths=PathsConfig(),
        data=data,
        model=model,
        train=TrainConfig(stage1_epochs=25),
        sampling=SamplingSchedule(),
        eval=EvalConfig(),
    )
    cfg.validate()
    return cfg
