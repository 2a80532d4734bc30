"""Flat ``key = value`` run configuration shared by every CLI subcommand.

One namespace covers the data generator, the model and the optimizer.
``seed`` and ``feature_dim`` are shared: the model width must equal the
width of the generated union features. Lines starting with ``#`` are
comments. Unknown and duplicate keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace

from .pipeline import TrainConfig
from .synth_scene import SynthConfig
from .unrolled_mp import UmpConfig

_SECTION = "run"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    num_object_cats: int = 8
    num_rel_cats: int = 10
    min_nodes: int = 6
    max_nodes: int = 10
    cats_per_scene: int = 3
    feature_dim: int = 64
    cluster_separation: float = 4.0
    appearance_noise: float = 1.0
    category_prob_signal: float = 1.0
    spurious_pair_rate: float = 0.3
    sim_strength: float = 2.0
    rel_signal: float = 1.0
    union_noise: float = 1.0
    relation_rate: float = 0.25
    tail_exponent: float = 1.5
    pair_modulation: float = 0.5
    annotation_drop_rate: float = 0.3
    num_train: int = 200
    num_val: int = 50
    num_test: int = 100
    # model
    num_layers: int = 5
    variant: str = "unrolled_reweighted"
    epsilon: float = 0.5
    p: float = 0.1
    # optimizer and loss
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 6
    epochs: int = 10
    tau: float = 0.1
    grouping: str = "batch_pruned"
    min_group_size: int = 3
    bg_ratio: float = 3.0
    clip_norm: float = 5.0
    # denoising demo instance
    denoise_nodes: int = 12
    denoise_dim: int = 4
    denoise_iterations: int = 60
    seed: int = 0

    def synth(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def ump(self) -> UmpConfig:
        return UmpConfig(self.num_layers, self.variant, self.epsilon, self.p, self.feature_dim)

    def train(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"ump"}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names}, ump=self.ump())

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail early."""
        self.synth()
        self.train()
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def with_overrides(self, **overrides) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        known = {f.name for f in fields(self)}
        unknown = sorted(set(clean) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        return replace(self, **{k: _coerce(k, v) for k, v in clean.items()})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value) if not isinstance(value, str) else int(value.strip())
        if kind == "float":
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {kind}, got {value!r}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno - 1}: duplicate key {exc.option!r}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno - 1}: expected 'key = value', got {line.strip()}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError("section headers are not allowed; use flat key = value lines")
    values = dict(parser.items(_SECTION))
    return RunConfig().with_overrides(**values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
