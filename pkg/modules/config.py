"""Run configuration.

Values are layered, later layers winning:

    dataclass defaults < CAPTRL_<FIELD> environment variables < run-config file < CLI flags

The run-config file is flat `key = value` text with `#` comments, read with
python-dotenv. Keys are RunConfig field names.
"""

import hashlib
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from enum import StrEnum
from pathlib import Path
from typing import Any, Final, Self

from dotenv import dotenv_values

from modules.captioner import DecoderConfig
from modules.decoding import DecodeConfig
from modules.dtypes import SPLITS, SplitName
from modules.enums import CiderVariant, RatioAgg, Stage, UpdateMode
from modules.errors import ConfigResult, Err, InvalidValue, MissingValue, Ok, UnknownKey, describe
from modules.exceptions import ConfigError
from modules.rl import GrpoConfig, ScstConfig

log = logging.getLogger(__name__)

ENV_PREFIX: Final = "CAPTRL_"


def _path_or_none(text: str) -> Path | None:
    return Path(text) if text else None


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    msg = f"not a boolean: {text!r}"
    raise ValueError(msg)


def _split(text: str) -> SplitName:
    for name in SPLITS:
        if text == name:
            return name
    msg = f"must be one of {', '.join(SPLITS)}"
    raise ValueError(msg)


def _opt(parse: object, help_text: str) -> dict[str, Any]:
    return {"parse": parse, "help": help_text}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; written to config.json in the run directory."""

    stage: Stage = field(default=Stage.CE, metadata=_opt(Stage, "pipeline stage"))
    seed: int = field(default=0, metadata=_opt(int, "root seed for every random stream"))
    # data
    data_dir: Path | None = field(default=Path("data/synthetic"), metadata=_opt(_path_or_none, "dataset directory"))
    karpathy_json: Path | None = field(default=None, metadata=_opt(_path_or_none, "Karpathy-split dataset JSON"))
    features_dir: Path | None = field(default=None, metadata=_opt(_path_or_none, "directory of <image_id>.feat files"))
    min_count: int = field(default=1, metadata=_opt(int, "minimum word count for the vocabulary"))
    n_images: int = field(default=2500, metadata=_opt(int, "gen-data: number of scenes"))
    grid_size: int = field(default=3, metadata=_opt(int, "gen-data: scene grid side"))
    # outputs
    out_dir: Path = field(default=Path("runs/latest"), metadata=_opt(Path, "run directory"))
    checkpoint_in: Path | None = field(default=None, metadata=_opt(_path_or_none, "checkpoint to start from"))
    resume: bool = field(default=False, metadata=_opt(_bool, "ce: restore optimizer state from checkpoint_in"))
    # model
    d_model: int = field(default=512, metadata=_opt(int, "embedding size"))
    n_heads: int = field(default=8, metadata=_opt(int, "attention heads"))
    n_layers: int = field(default=1, metadata=_opt(int, "decoder layers"))
    ffn_dim: int = field(default=2048, metadata=_opt(int, "feed-forward width"))
    max_len: int = field(default=20, metadata=_opt(int, "maximum caption length in tokens"))
    # cross-entropy
    ce_epochs: int = field(default=20, metadata=_opt(int, "cross-entropy epochs"))
    ce_lr: float = field(default=4e-5, metadata=_opt(float, "cross-entropy peak learning rate"))
    batch_size: int = field(default=32, metadata=_opt(int, "images per optimizer step"))
    warmup_frac: float = field(default=0.1, metadata=_opt(float, "ce: warm-up share of all steps"))
    # SCST
    scst_epochs: int = field(default=20, metadata=_opt(int, "SCST epochs"))
    scst_lr: float = field(default=1e-5, metadata=_opt(float, "SCST learning rate"))
    # GRPO
    grpo_epochs: int = field(default=5, metadata=_opt(int, "GRPO epochs"))
    grpo_lr: float = field(default=1e-5, metadata=_opt(float, "GRPO learning rate"))
    group_size: int = field(default=5, metadata=_opt(int, "GRPO samples per image"))
    clip_eps: float = field(default=0.2, metadata=_opt(float, "GRPO ratio clip"))
    kl_beta: float = field(default=0.01, metadata=_opt(float, "GRPO KL weight"))
    update_steps: int = field(default=20, metadata=_opt(int, "GRPO pi_old refresh period"))
    ratio_agg: RatioAgg = field(default=RatioAgg.TOKEN_MEAN, metadata=_opt(RatioAgg, "GRPO ratio aggregation"))
    update_mode: UpdateMode = field(default=UpdateMode.SYNC, metadata=_opt(UpdateMode, "GRPO update-step reading"))
    # decoding and evaluation
    temperature: float = field(default=1.0, metadata=_opt(float, "sampling temperature"))
    beam_size: int = field(default=3, metadata=_opt(int, "evaluation beam size"))
    val_every: int = field(default=100, metadata=_opt(int, "GRPO: validate every N optimizer steps"))
    val_images: int = field(default=0, metadata=_opt(int, "validation images per check (0 = all)"))
    cider_variant: CiderVariant = field(default=CiderVariant.PLAIN, metadata=_opt(CiderVariant, "CIDEr flavour"))
    collapse_threshold: float = field(default=0.2, metadata=_opt(float, "relative validation drop that warns"))
    split: SplitName = field(default="test", metadata=_opt(_split, "eval: split to decode"))
    # score
    references: Path | None = field(default=None, metadata=_opt(_path_or_none, "score: reference annotations JSON"))
    candidates: Path | None = field(default=None, metadata=_opt(_path_or_none, "score: candidate annotations JSON"))
    plot: bool = field(default=False, metadata=_opt(_bool, "write PNG curves with matplotlib"))

    # ------------------------------------------------------------ layering

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def layered(
        cls,
        cli: Mapping[str, str],
        config_file: Path | None = None,
        environ: Mapping[str, str] | None = None,
    ) -> ConfigResult[Self]:
        """Merge environment, file and CLI strings over the defaults, then validate."""
        environ = os.environ if environ is None else environ
        names = set(cls.field_names())
        raw: dict[str, str] = {}
        for key, value in environ.items():
            if key.startswith(ENV_PREFIX) and (name := key.removeprefix(ENV_PREFIX).lower()) in names:
                raw[name] = value
        if config_file is not None:
            if not config_file.is_file():
                return Err(InvalidValue("config", str(config_file), "file does not exist"))
            for key, value in dotenv_values(config_file).items():
                if key not in names:
                    return Err(UnknownKey(key, str(config_file)))
                raw[key] = value or ""
        for key, value in cli.items():
            if key not in names:
                return Err(UnknownKey(key, "command line"))
            raw[key] = value
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: Mapping[str, str]) -> ConfigResult[Self]:
        values: dict[str, object] = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            try:
                values[f.name] = f.metadata["parse"](raw[f.name].strip())
            except ValueError as e:
                return Err(InvalidValue(f.name, raw[f.name], str(e)))
        return cls(**values).validate()

    def validate(self) -> ConfigResult[Self]:  # noqa: PLR0911
        for name in ("n_images", "grid_size", "d_model", "n_heads", "n_layers", "ffn_dim", "batch_size"):
            if getattr(self, name) < 1:
                return Err(InvalidValue(name, getattr(self, name), "must be positive"))
        for name in ("ce_epochs", "scst_epochs", "grpo_epochs", "update_steps", "beam_size", "val_every", "min_count"):
            if getattr(self, name) < 1:
                return Err(InvalidValue(name, getattr(self, name), "must be at least 1"))
        if self.max_len < 2:
            return Err(InvalidValue("max_len", self.max_len, "must be at least 2"))
        if self.d_model % self.n_heads:
            return Err(InvalidValue("n_heads", self.n_heads, f"must divide d_model={self.d_model}"))
        for name in ("ce_lr", "scst_lr", "grpo_lr", "temperature"):
            if not getattr(self, name) > 0:
                return Err(InvalidValue(name, getattr(self, name), "must be positive"))
        if not 0 <= self.warmup_frac < 1:
            return Err(InvalidValue("warmup_frac", self.warmup_frac, "must lie in [0, 1)"))
        if self.group_size < 2:
            return Err(InvalidValue("group_size", self.group_size, "GRPO needs at least 2 samples per image"))
        if not 0 < self.clip_eps < 1:
            return Err(InvalidValue("clip_eps", self.clip_eps, "must lie in (0, 1)"))
        if self.kl_beta < 0 or self.val_images < 0 or self.collapse_threshold < 0:
            return Err(InvalidValue("kl_beta/val_images/collapse_threshold", None, "must be non-negative"))
        if self.split not in SPLITS:
            return Err(InvalidValue("split", self.split, f"must be one of {', '.join(SPLITS)}"))
        match self.stage:
            case Stage.SCST | Stage.GRPO | Stage.EVAL if self.checkpoint_in is None:
                return Err(MissingValue("checkpoint_in", self.stage))
            case Stage.SCORE if self.references is None or self.candidates is None:
                return Err(MissingValue("references" if self.references is None else "candidates", self.stage))
            case Stage.CE | Stage.SCST | Stage.GRPO | Stage.EVAL if self.data_dir is None and self.karpathy_json is None:
                return Err(MissingValue("data_dir", self.stage))
            case Stage.GEN_DATA if self.data_dir is None:
                return Err(MissingValue("data_dir", self.stage))
            case _:
                return Ok(self)

    # ------------------------------------------------------------ derived configs

    def decoder(self, vocab_size: int, feat_dim: int) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=vocab_size,
            feat_dim=feat_dim,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            ffn_dim=self.ffn_dim,
            max_len=self.max_len,
        )

    def decode(self, *, beam_size: int | None = None) -> DecodeConfig:
        return DecodeConfig(
            max_len=self.max_len,
            temperature=self.temperature,
            beam_size=beam_size or self.beam_size,
            seed=self.seed,
        )

    def scst(self) -> ScstConfig:
        return ScstConfig(epochs=self.scst_epochs, lr=self.scst_lr)

    def grpo(self) -> GrpoConfig:
        return GrpoConfig(
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            kl_beta=self.kl_beta,
            update_steps=self.update_steps,
            epochs=self.grpo_epochs,
            lr=self.grpo_lr,
            ratio_agg=self.ratio_agg,
            update_mode=self.update_mode,
        )

    # ------------------------------------------------------------ provenance

    def to_json(self) -> dict[str, object]:
        def plain(value: object) -> object:
            if isinstance(value, StrEnum):
                return str(value)
            if isinstance(value, Path):
                return value.as_posix()
            return value

        return {key: plain(value) for key, value in asdict(self).items()}

    def digest(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def require(result: ConfigResult[RunConfig]) -> RunConfig:
    """Unwrap a validated config or raise ConfigError with a readable message."""
    match result:
        case Ok(value=config):
            return config
        case Err(error=problem):
            raise ConfigError(describe(problem))
