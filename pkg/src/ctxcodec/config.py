"""Plain-text key-value configuration files for the training CLI.

Format: one `key = value` per line, `#` comments, repeated `stage` keys build
the schedule in order. A stage value is space-separated `k=v` tokens:

    lambda = 85,170,380,840
    corpus_size = 24
    stage = frames=2 subset=inter loss=me_d lr=1e-3 epochs=1
    stage = frames=6 subset=all loss=cascade lr=5e-4 epochs=1
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import FormatError
from .harness import TrainSettings
from .model import CodecConfig
from .training import ScheduleStage, default_schedule


@dataclass
class TrainConfig:
    settings: TrainSettings = field(default_factory=TrainSettings)
    codec: CodecConfig = field(default_factory=CodecConfig)
    repeat: bool = False
    long_final: bool = False
    stages: list = field(default_factory=list)

    def schedule(self):
        if self.stages:
            return self.stages
        return default_schedule(repeat=self.repeat, long_final=self.long_final,
                                lr_scale=self.settings.lr_scale)


def _parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise FormatError(f"{key}: expected a boolean, got {value!r}")


def _parse_stage(value: str, n_repeat_default: int) -> ScheduleStage:
    fields = {}
    for token in value.split():
        if "=" not in token:
            raise FormatError(f"stage token {token!r} is not k=v")
        k, v = token.split("=", 1)
        fields[k] = v
    try:
        return ScheduleStage(
            frames=int(fields["frames"]),
            subset=fields["subset"],
            loss_kind=fields["loss"],
            learning_rate=float(fields["lr"]),
            epochs=int(fields["epochs"]),
            n_repeat_max=int(fields.get("n_repeat", n_repeat_default)),
        )
    except KeyError as exc:
        raise FormatError(f"stage is missing field {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"stage has a malformed field: {exc}") from exc


def parse_train_config(text: str) -> TrainConfig:
    cfg = TrainConfig()
    stage_lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "stage":
                stage_lines.append(value)
            elif key == "lambda":
                lams = tuple(float(v) for v in value.split(","))
                if len(lams) != 4 or any(l <= 0 for l in lams):
                    raise FormatError("lambda needs 4 positive values")
                cfg.codec.lambdas = lams
                cfg.settings.lambdas = lams
            elif key in ("width", "height", "corpus_size", "corpus_frames", "batch_size"):
                setattr(cfg.settings, key, int(value))
            elif key == "lr_scale":
                cfg.settings.lr_scale = float(value)
            elif key == "confidence":
                cfg.codec.use_confidence = _parse_bool(value, key)
            elif key == "dynfilter":
                cfg.codec.use_dynfilter = _parse_bool(value, key)
            elif key == "repeat":
                cfg.repeat = _parse_bool(value, key)
            elif key == "long":
                cfg.long_final = _parse_bool(value, key)
            elif key in ("ref_channels", "motion_latent", "ctx_latent", "hyper_channels",
                         "motion_hidden", "filter_size"):
                setattr(cfg.codec, key, int(value))
            elif key in ("ctx_channels", "enc_channels"):
                setattr(cfg.codec, key, tuple(int(v) for v in value.split(",")))
            else:
                raise FormatError(f"unknown key {key!r}")
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    n_repeat_default = 3 if cfg.repeat else 0
    cfg.stages = [_parse_stage(v, n_repeat_default) for v in stage_lines]
    return cfg


def load_train_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    return parse_train_config(text)
