"""Flat key-value run configuration with strict key checking.

Files are UTF-8 text, one dotted `key = value` per line, '#' comments.
Every key has a default; unknown keys are rejected so typos never pass
silently. The fully resolved mapping can be serialized back out, which is
what commands echo into their output directory.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attacks import AttackConfig
from .defenses import AdvTrainConfig, SqueezeConfig
from .lipschitz import RegConfig
from .models import ConvBlockSpec, ModelSpec
from .quantize import QuantConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip() != ""]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip() != ""]


# key -> (parser, default-as-string)
SCHEMA: dict[str, tuple] = {
    "seed": (int, "0"),
    "out.dir": (str, ""),
    "data.kind": (str, "textures"),  # binary | blobs | textures
    "data.train": (str, ""),
    "data.test": (str, ""),
    "data.n_train": (int, "2000"),
    "data.n_test": (int, "1000"),
    "data.separation": (float, "4.0"),
    "model.blocks": (str, "8:3:1,16:3:2,16:3:1,32:3:2"),
    "model.residual": (str, "3:2"),
    "model.classes": (int, "10"),
    "model.pool": (str, "avg"),
    "quant.mode": (str, "uniform"),
    "quant.bits": (int, "4"),
    "quant.range_max": (float, "6.0"),
    "reg.beta": (float, "0.0"),
    "reg.aggregation": (str, "convex"),
    "train.epochs": (int, "20"),
    "train.lr": (float, "0.1"),
    "train.decay": (float, "0.2"),
    "train.milestones": (_int_list, "10,15"),
    "train.momentum": (float, "0.9"),
    "train.batch": (int, "64"),
    "train.augment": (_bool, "false"),
    "attack.kind": (str, "fgsm"),
    "attack.eps": (float, "8"),
    "attack.alpha": (float, "1.0"),
    "attack.iters": (str, ""),  # empty = schedule
    "advtrain.method": (str, ""),  # empty = off
    "advtrain.delta": (float, "8.0"),
    "advtrain.test_eps": (float, "8.0"),
    "advtrain.mix": (float, "1.0"),
    "defense.squeeze.bits": (int, "5"),
    "defense.squeeze.median": (_bool, "true"),
    "sweep.bits": (_int_list, "1,2,3,4,5"),
    "sweep.betas": (_float_list, "0.0"),
    "sweep.attacks": (str, "fgsm:8"),
    "sweep.seeds": (_int_list, "0"),
    "sweep.include_fp": (_bool, "true"),
    "sweep.workers": (int, "1"),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; unknown keys and bad lines are rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line.strip()!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        raw[key] = value.strip()
    return raw


def parse_config_file(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


@dataclass
class RunConfig:
    values: dict  # fully typed key -> value

    def __getitem__(self, key: str):
        return self.values[key]

    # -- structured views ----------------------------------------------------

    def quant(self) -> QuantConfig:
        return QuantConfig(bits=self["quant.bits"], range_max=self["quant.range_max"],
                           mode=self["quant.mode"])

    def reg(self) -> RegConfig:
        return RegConfig(beta=self["reg.beta"], aggregation=self["reg.aggregation"])

    def model_spec(self) -> ModelSpec:
        blocks = []
        for part in self["model.blocks"].split(","):
            fields = part.strip().split(":")
            if len(fields) not in (3, 4):
                raise ConfigError("model.blocks",
                                  f"block {part!r} is not out:kernel:stride[:pad]")
            blocks.append(ConvBlockSpec(*[int(v) for v in fields]))
        residual = None
        if self["model.residual"]:
            at, _, src = self["model.residual"].partition(":")
            residual = (int(at), int(src))
        return ModelSpec(blocks=blocks, classes=self["model.classes"],
                         residual=residual, pool=self["model.pool"],
                         quant=self.quant(), reg=self.reg())

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(epochs=self["train.epochs"], lr=self["train.lr"],
                           decay=self["train.decay"],
                           milestones=tuple(self["train.milestones"]),
                           momentum=self["train.momentum"], batch_size=self["train.batch"],
                           seed=self["seed"], augment=self["train.augment"])

    def attack_cfg(self) -> AttackConfig:
        iters = self["attack.iters"]
        return AttackConfig(kind=self["attack.kind"], epsilon=self["attack.eps"],
                            alpha=self["attack.alpha"],
                            iters=int(iters) if iters else None, seed=self["seed"])

    def advtrain_cfg(self) -> AdvTrainConfig | None:
        if not self["advtrain.method"]:
            return None
        return AdvTrainConfig(method=self["advtrain.method"], delta=self["advtrain.delta"],
                              test_eps=self["advtrain.test_eps"], mix=self["advtrain.mix"])

    def squeeze_cfg(self) -> SqueezeConfig:
        return SqueezeConfig(color_bits=self["defense.squeeze.bits"],
                             median=self["defense.squeeze.median"])

    def sweep_attacks(self) -> list[tuple[str, float]]:
        out = []
        for part in self["sweep.attacks"].split(","):
            kind, _, eps = part.strip().partition(":")
            if not eps:
                raise ConfigError("sweep.attacks", f"{part!r} is not kind:eps")
            out.append((kind, float(eps)))
        return out

    def datasets(self):
        """(train, test) datasets per data.kind; binary paths must exist."""
        from . import data as D

        kind = self["data.kind"]
        n_train, n_test = self["data.n_train"], self["data.n_test"]
        classes = self["model.classes"]
        if kind == "binary":
            for key in ("data.train", "data.test"):
                if not self[key]:
                    raise ConfigError(key, "required when data.kind = binary")
            train = D.load_cifar10_binary(self["data.train"], max_records=n_train)
            test = D.load_cifar10_binary(self["data.test"], max_records=n_test)
            return train, test
        if kind == "blobs":
            per_tr, per_te = -(-n_train // classes), -(-n_test // classes)
            return (D.synth_blobs(classes, per_tr, shape=(3, 32, 32), seed=self["seed"],
                                  separation=self["data.separation"], split="train").subset(n_train),
                    D.synth_blobs(classes, per_te, shape=(3, 32, 32), seed=self["seed"],
                                  separation=self["data.separation"], split="test").subset(n_test))
        if kind == "textures":
            per_tr, per_te = -(-n_train // classes), -(-n_test // classes)
            return (D.synth_textures(classes, per_tr, seed=self["seed"], split="train").subset(n_train),
                    D.synth_textures(classes, per_te, seed=self["seed"], split="test").subset(n_test))
        raise ConfigError("data.kind", f"unknown kind {kind!r}")


def resolve_config(raw: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    """Apply defaults, overrides, and type parsing; reject bad values."""
    merged = {key: default for key, (_, default) in SCHEMA.items()}
    merged.update(raw)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        merged[key] = value
    values = {}
    for key, (parser, _) in SCHEMA.items():
        try:
            values[key] = parser(merged[key])
        except (ValueError, TypeError) as e:
            raise ConfigError(key, f"bad value {merged[key]!r}: {e}") from e
    return RunConfig(values)


def serialize_config(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for key in sorted(SCHEMA):
        value = cfg.values[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, list):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
