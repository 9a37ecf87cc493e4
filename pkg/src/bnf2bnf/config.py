"""Run configuration: typed sections, named presets, JSON file + flag overrides."""

from __future__ import annotations

import dataclasses
import difflib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError


@dataclass
class TranslatorConfig:
    d_in: int = 16
    d_out: int = 16
    prenet_dims: list[int] = field(default_factory=lambda: [64, 64])
    prenet_dropout: float = 0.5
    prenet_dropout_at_inference: bool = True
    lstm_dim: int = 64
    lstm_layers: int = 2
    attn_mixtures: int = 4
    attn_hidden: int = 32
    sigma_min: float = 0.1
    postnet_kernel: int = 5
    postnet_channels: int = 32
    postnet_layers: int = 3
    max_decode_steps: int = 80
    feedback: str = "coarse"

    def validate(self) -> None:
        _positive(self, "d_in", "d_out", "lstm_dim", "lstm_layers", "attn_mixtures", "attn_hidden",
                  "postnet_kernel", "postnet_channels", "postnet_layers", "max_decode_steps")
        if not self.prenet_dims or min(self.prenet_dims) < 1:
            raise ConfigurationError("prenet_dims must be a non-empty list of sizes >= 1")
        if self.postnet_kernel % 2 == 0:
            raise ConfigurationError(f"postnet_kernel must be odd, got {self.postnet_kernel}")
        if not 0.0 <= self.prenet_dropout < 1.0:
            raise ConfigurationError("prenet_dropout must be in [0, 1)")
        if self.sigma_min <= 0:
            raise ConfigurationError("sigma_min must be positive")
        if self.feedback not in ("coarse", "fine"):
            raise ConfigurationError(f"feedback must be 'coarse' or 'fine', got {self.feedback!r}")


@dataclass
class SynthConfig:
    d_in: int = 16
    d_mel: int = 8
    glu_kernel: int = 3
    conv_channels: int = 64
    dw_kernel: int = 5
    dw_stride: int = 1
    dropout_rate: float = 0.1
    n_blocks: int = 3
    upsample_factor: int = 1

    def validate(self) -> None:
        _positive(self, "d_in", "d_mel", "glu_kernel", "conv_channels", "dw_kernel", "n_blocks", "upsample_factor")
        if self.dw_kernel % 2 == 0 or self.glu_kernel % 2 == 0:
            raise ConfigurationError("dw_kernel and glu_kernel must be odd")
        if self.dw_stride != 1:
            raise ConfigurationError(f"dw_stride must be 1, got {self.dw_stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 20000
    # None means 30% of max_steps
    phase_boundary_step: int | None = None
    teacher_forcing: bool = True
    freeze_translator_in_joint_phase: bool = False
    synth_grad_to_translator: bool = True
    seed: int = 0
    checkpoint_interval: int = 1000
    grad_clip_norm: float = 1.0
    bucket_frames: int = 8
    train_fraction: float = 1.0

    @property
    def phase_boundary(self) -> int:
        if self.phase_boundary_step is None:
            return int(0.3 * self.max_steps)
        return self.phase_boundary_step

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError("invariant violated: learning_rate > 0")
        if self.batch_size < 1:
            raise ConfigurationError("invariant violated: batch_size >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("invariant violated: max_steps >= 0")
        if not 0 <= self.phase_boundary <= self.max_steps:
            raise ConfigurationError("invariant violated: 0 <= phase_boundary_step <= max_steps")
        if self.checkpoint_interval < 1 or self.bucket_frames < 1:
            raise ConfigurationError("checkpoint_interval and bucket_frames must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1]")
        if self.grad_clip_norm < 0:
            raise ConfigurationError("grad_clip_norm must be >= 0 (0 disables clipping)")


@dataclass
class CorpusConfig:
    vocab_size: int = 24
    n_target_only: int = 4
    n_reorder_markers: int = 2
    n_expanding: int = 3
    min_sentence_len: int = 3
    max_sentence_len: int = 10
    min_duration: int = 2
    max_duration: int = 4
    smoothing_width: int = 3
    noise_level: float = 0.05
    tied_durations: bool = True
    n_speakers: int = 8
    speaker_rotation: float = 0.2
    speaker_bias: float = 0.1
    min_codebook_distance: float = 0.5
    # shortest label run kept when decoding model output for scoring
    decode_min_run: int = 2
    corpus_size: int = 2200
    eval_size: int | None = 200
    corpus_seed: int = 7

    def validate(self) -> None:
        _positive(self, "vocab_size", "min_sentence_len", "min_duration", "smoothing_width", "n_speakers", "corpus_size",
                  "decode_min_run")
        if self.n_target_only + self.n_expanding > self.vocab_size:
            raise ConfigurationError("n_target_only + n_expanding exceeds vocab_size")
        if self.n_target_only < (1 if self.n_expanding else 0):
            raise ConfigurationError("expanding tokens need at least one target-only token")
        if self.max_sentence_len < self.min_sentence_len or self.max_duration < self.min_duration:
            raise ConfigurationError("length and duration ranges must satisfy min <= max")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        if not 0.0 <= self.speaker_rotation <= 1.0:
            raise ConfigurationError("speaker_rotation must lie in [0, 1]")


@dataclass
class RunConfig:
    preset: str = "toy"
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus_spec: CorpusConfig = field(default_factory=CorpusConfig)
    corpus: str = "corpus"
    out_dir: str = "run"
    checkpoint: str = ""
    input: str = ""
    output: str = ""
    force: bool = False

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        for section in (self.translator, self.synth, self.train, self.corpus_spec):
            section.validate()
        if self.synth.d_in != self.translator.d_out:
            raise ConfigurationError("invariant violated: synthesizer d_in must equal translator d_out")

    def to_dict(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for key, (section, name) in _key_index().items():
            owner = self if section is None else getattr(self, section)
            flat[key] = getattr(owner, name)
        return flat

    def model_dict(self) -> dict[str, Any]:
        """Only the keys that determine parameter shapes."""
        return {
            "translator": dataclasses.asdict(self.translator),
            "synth": dataclasses.asdict(self.synth),
        }


SECTIONS = {"translator": TranslatorConfig, "synth": SynthConfig, "train": TrainConfig, "corpus_spec": CorpusConfig}
TOP_LEVEL = ("preset", "corpus", "out_dir", "checkpoint", "input", "output", "force")


def _key_index() -> dict[str, tuple[str | None, str]]:
    index: dict[str, tuple[str | None, str]] = {k: (None, k) for k in TOP_LEVEL}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            # synthesizer input width is always the translator output width
            if section == "synth" and f.name == "d_in":
                continue
            if f.name in index:
                raise AssertionError(f"duplicate config key {f.name}")
            index[f.name] = (section, f.name)
    return index


def _positive(obj, *names: str) -> None:
    for n in names:
        if getattr(obj, n) < 1:
            raise ConfigurationError(f"invariant violated: {n} >= 1 (got {getattr(obj, n)})")


def toy_preset() -> RunConfig:
    return RunConfig(preset="toy")


def paper_preset() -> RunConfig:
    """Model sizes of the published translator/synthesizer configuration."""
    cfg = RunConfig(preset="paper")
    cfg.translator = TranslatorConfig(
        d_in=512,
        d_out=512,
        prenet_dims=[256, 256],
        lstm_dim=256,
        lstm_layers=2,
        attn_mixtures=8,
        attn_hidden=128,
        postnet_kernel=5,
        postnet_channels=512,
        postnet_layers=5,
        max_decode_steps=1000,
    )
    cfg.synth = SynthConfig(
        d_in=512,
        d_mel=80,
        glu_kernel=3,
        conv_channels=512,
        dw_kernel=17,
        dw_stride=1,
        dropout_rate=0.1,
        n_blocks=6,
        upsample_factor=4,
    )
    return cfg


PRESETS = {"toy": toy_preset, "paper": paper_preset}


def _convert(key: str, raw: Any, current: Any, annotation: str) -> Any:
    try:
        if isinstance(raw, str):
            text = raw.strip()
            if "list" in annotation:
                value = json.loads(text) if text.startswith("[") else [int(v) for v in text.split(",") if v]
            elif annotation.startswith("bool"):
                if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = text.lower() in ("true", "1", "yes")
            elif annotation.startswith("int"):
                value = None if text.lower() in ("none", "null") and "None" in annotation else int(text)
            elif annotation.startswith("float"):
                value = float(text)
            else:
                value = text
        else:
            value = raw
        if "list" in annotation:
            if not isinstance(value, list):
                raise ValueError(value)
            value = [int(v) for v in value]
        elif annotation.startswith("bool"):
            if not isinstance(value, bool):
                raise ValueError(value)
        elif annotation.startswith("int"):
            if value is not None and (isinstance(value, bool) or int(value) != value):
                raise ValueError(value)
            value = None if value is None else int(value)
        elif annotation.startswith("float"):
            value = float(value)
        elif annotation.startswith("str") and not isinstance(value, str):
            raise ValueError(value)
    except (ValueError, TypeError, json.JSONDecodeError):
        raise ConfigurationError(f"invalid value for {key!r}: {raw!r} (expected {annotation})") from None
    return value


def _annotations() -> dict[str, str]:
    out = {f.name: str(f.type) for f in fields(RunConfig) if f.name in TOP_LEVEL}
    for cls in SECTIONS.values():
        for f in fields(cls):
            out.setdefault(f.name, str(f.type))
    return out


def apply_overrides(cfg: RunConfig, values: dict[str, Any]) -> RunConfig:
    index, notes = _key_index(), _annotations()
    for key, raw in values.items():
        if key not in index:
            close = difflib.get_close_matches(key, list(index), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigurationError(f"unknown config key {key!r}{hint}")
        section, name = index[key]
        owner = cfg if section is None else getattr(cfg, section)
        setattr(owner, name, _convert(key, raw, getattr(owner, name), notes[name]))
    cfg.synth.d_in = cfg.translator.d_out
    return cfg


def parse_flags(argv: list[str]) -> tuple[str | None, dict[str, str]]:
    """Split ``--config=PATH`` from generic ``--key=value`` overrides."""
    config_path, overrides = None, {}
    for arg in argv:
        if not arg.startswith("--"):
            raise ConfigurationError(f"expected --key=value, got {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if key in ("force",):
                value = "true"
            else:
                raise ConfigurationError(f"flag --{key} needs a value (--{key}=...)")
        key = key.replace("-", "_")
        if key == "config":
            config_path = value
        else:
            overrides[key] = value
    return config_path, overrides


def parse_config(path: str | os.PathLike | None = None, flags: dict[str, str] | None = None) -> RunConfig:
    """Preset defaults, then the JSON file, then flags (highest precedence)."""
    file_values: dict[str, Any] = {}
    if path:
        text = Path(path).read_text()
        try:
            file_values = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
    flags = dict(flags or {})
    preset = flags.get("preset", file_values.get("preset", "toy"))
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if "seed" not in flags and "seed" not in file_values and os.environ.get("BNF2BNF_SEED"):
        flags["seed"] = os.environ["BNF2BNF_SEED"]
    apply_overrides(cfg, file_values)
    apply_overrides(cfg, flags)
    cfg.validate()
    return cfg


def from_dict(values: dict[str, Any]) -> RunConfig:
    preset = values.get("preset", "toy")
    cfg = PRESETS[preset]()
    apply_overrides(cfg, values)
    cfg.validate()
    return cfg
