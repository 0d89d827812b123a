"""Plain-text run configuration: ``[section]`` headers and ``key = value`` lines.

Unknown sections and keys are rejected so typos fail loudly.  Serializing a
parsed config and parsing it again yields the same config.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .data import ConfigError
from .evaluation import EvalConfig
from .train import TrainConfig


@dataclass(frozen=True)
class HeldOutConfig:
    size: int = 96
    pairs: int = 50
    seed: int = 2 ** 31


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    heldout: HeldOutConfig = HeldOutConfig()

    # flat views -------------------------------------------------------
    def sections(self) -> dict[str, object]:
        return {
            "train": self.train,
            "recurrence": self.train.recurrence,
            "loss": self.train.loss,
            "data": self.train.data,
            "eval": self.eval,
            "heldout": self.heldout,
        }


_NESTED = {"recurrence", "loss", "data"}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, proto):
    t = text.strip()
    if isinstance(proto, bool):
        if t.lower() in ("true", "yes", "1"):
            return True
        if t.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if isinstance(proto, int):
        return int(t)
    if isinstance(proto, float):
        return float(t)
    return t


def _parse_value(text: str, current, name: str):
    t = text.strip()
    if name == "samples":          # optional int
        return None if t.lower() == "none" else int(t)
    if isinstance(current, tuple):
        items = [s for s in t.split(",") if s.strip()]
        proto = current[0] if current else 0.0
        return tuple(_parse_scalar(s, proto) for s in items)
    return _parse_scalar(t, current)


def serialize(cfg: RunConfig) -> str:
    lines = []
    for sec, obj in cfg.sections().items():
        lines.append(f"[{sec}]")
        for f in fields(obj):
            if sec == "train" and f.name in _NESTED:
                continue
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``text`` on ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    secs = base.sections()
    updates: dict[str, dict] = {s: {} for s in secs}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in secs:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        obj = secs[current]
        names = {f.name for f in fields(obj)} - (_NESTED if current == "train" else set())
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{current}]")
        try:
            updates[current][key] = _parse_value(val, getattr(obj, key), key)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        rec = replace(base.train.recurrence, **updates["recurrence"])
        loss = replace(base.train.loss, **updates["loss"])
        data = replace(base.train.data, **updates["data"])
        data.validate()
        train = replace(base.train, recurrence=rec, loss=loss, data=data, **updates["train"])
        ev = replace(base.eval, **updates["eval"])
        held = replace(base.heldout, **updates["heldout"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, ev, held)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
