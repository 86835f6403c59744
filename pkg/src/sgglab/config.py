"""Run configuration: a flat ``section.key = value`` text file, overridable by flags.

Blank lines and ``#`` comments are ignored. Unknown keys and values that
fail to parse are rejected before anything runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.replace(" ", "").split(",") if x]


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.replace(" ", "").split(",") if x]


def _budget(v: str) -> int | str:
    v = v.strip().lower()
    if v == "dcs":
        return v
    k = int(v)
    if k < 1:
        raise ValueError("budget must be >= 1 or 'dcs'")
    return k


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        v = v.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v

    return parse


def _flags(v: str) -> str:
    v = v.strip().upper()
    if not v or set(v) - set("TVSU") or not ({"T", "V"} & set(v)):
        raise ValueError(f"ablation flags must use letters TVSU and include T or V, got {v!r}")
    return v


def _opt_str(v: str) -> str | None:
    v = v.strip()
    return v or None


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "output.dir": (str, "runs/default"),
    "data.train": (str, "data/train.json"),
    "data.test": (str, "data/test.json"),
    "synth.num_train": (int, 2000),
    "synth.num_test": (int, 400),
    "synth.seed": (int, 0),
    "synth.max_objects": (int, 12),
    "detector.mode": (_choice("perfect", "noisy", "learned"), "perfect"),
    "detector.checkpoint": (_opt_str, None),
    "detector.seed": (int, 0),
    "detector.noise_sigma": (float, 2.0),
    "detector.score_beta": (_floats, [8.0, 2.0]),
    "detector.num_clutter": (int, 0),
    "detector.epochs": (int, 15),
    "detector.lr": (float, 3e-3),
    "relhead.checkpoint": (_opt_str, None),
    "relhead.flags": (_flags, "TVS"),
    "relhead.fusion": (_choice("linear", "legacy"), "linear"),
    "relhead.graph_constraint": (_bool, True),
    "train.epochs": (int, 20),
    "train.lr": (float, 1e-3),
    "train.optimizer": (_choice("sgd", "adam"), "adam"),
    "train.schedule": (_choice("cosine", "constant"), "cosine"),
    "train.batch_size": (int, 8),
    "train.theta": (int, 100),
    "eval.k_budget": (_budget, 100),
    "eval.ks": (_ints, [20, 50, 100]),
    "eval.limit": (int, 0),
    "dcs.epsilon": (float, 1e-5),
    "dcs.step": (int, 5),
    "dcs.theta": (int, 100),
    "dcs.smoothing": (int, 1),
    "bench.warmup": (int, 10),
    "bench.reps": (int, 50),
    "bench.budgets": (_ints, [10, 50, 100, 150]),
    "bench.dense_objects": (int, 150),
    "ablate.rows": (str, "TVSU,TVS,TVU,TV,T"),
    "ablate.num_train": (int, 600),
    "ablate.num_test": (int, 200),
    "ablate.epochs": (int, 12),
}


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_json(self) -> dict:
        return dict(sorted(self.values.items()))

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self.values.items()))

    @property
    def out(self) -> Path:
        return Path(self.values["output.dir"])


def _render(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def build_config(raw: Mapping[str, str], source: str = "<config>") -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r} (known: {', '.join(sorted(SCHEMA))})")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    return RunConfig(values)


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (flags) on top."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_lines(p.read_text().splitlines(), str(p)))
    if overrides:
        raw.update(overrides)
    return build_config(raw, str(path) if path else "<flags>")
