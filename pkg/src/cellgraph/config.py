"""Flat ``key = value`` run configuration.

Every AugmentParams, HyperParams and TrainConfig field is a key, plus a few
run-level keys (``patched``, ``dim``, ``samples``, ``jobs``, ``group_by_patient``).
Lines starting with ``#`` are comments. Later assignments win, so CLI
overrides are applied as extra lines.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .errors import FormatError
from .gnn import HyperParams
from .graphbuilder import AugmentParams
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    aug: AugmentParams = field(default_factory=AugmentParams)
    hp: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    patched: bool = True
    dim: int = 16
    samples: int = 45
    jobs: int = 1
    group_by_patient: bool = False

    def flat(self):
        out = {}
        for part in (self.aug, self.hp, self.train):
            out.update(asdict(part))
        for k in _RUN_KEYS:
            out[k] = getattr(self, k)
        return out

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())


_RUN_KEYS = ("patched", "dim", "samples", "jobs", "group_by_patient")
_SECTIONS = {"aug": AugmentParams, "hp": HyperParams, "train": TrainConfig}


def _owner(key):
    for section, cls in _SECTIONS.items():
        if key in {f.name for f in fields(cls)}:
            return section
    if key in _RUN_KEYS:
        return None
    raise KeyError(key)


def _format(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(default, text):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, tuple):
        items = [x.strip() for x in text.split(",") if x.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_assignments(lines, source="<config>"):
    """``[(key, value_text, line_no)]`` from ``key = value`` lines."""
    out = []
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected key = value, got {raw.strip()!r}", source, no)
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), no))
    return out


def apply(config, assignments, source="<config>"):
    """Return ``config`` with the assignments applied; errors name the key and line."""
    base = RunConfig().flat()
    updates = {"aug": {}, "hp": {}, "train": {}, None: {}}
    for key, text, no in assignments:
        try:
            section = _owner(key)
        except KeyError:
            raise FormatError(f"unknown config key {key!r}", source, no) from None
        try:
            updates[section][key] = _coerce(base[key], text)
        except ValueError as exc:
            raise FormatError(f"bad value for {key!r}: {exc}", source, no) from None
    try:
        return replace(
            config,
            aug=replace(config.aug, **updates["aug"]),
            hp=replace(config.hp, **updates["hp"]),
            train=replace(config.train, **updates["train"]),
            **updates[None],
        )
    except ValueError as exc:
        raise FormatError(f"invalid configuration: {exc}", source) from None


def load_config(path=None, overrides=(), base=None):
    """Read ``path`` (optional) and then apply ``key=value`` override strings."""
    config = base or RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            config = apply(config, parse_assignments(fh, str(path)), str(path))
    if overrides:
        config = apply(config, parse_assignments(overrides, "--set"), "--set")
    return config
