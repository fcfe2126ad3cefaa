"""Plain key-value run configuration with dotted keys.

One file fully determines a run: task, dataset spec, training
hyperparameters, seeds. The canonical serialization is sorted key = value
lines, so persisting a resolved config and re-reading it round-trips
byte-for-byte and a re-launch reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .training import RefineConfig

_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False,
                 "yes": True, "no": False}


def parse_config_text(text) -> dict:
    """key = value lines; '#' starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_config(entries: dict) -> str:
    return "".join(f"{k} = {entries[k]}\n" for k in sorted(entries))


def parse_set_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    """Fully resolved run description: serializable and re-launchable."""

    task: str = "bimodal_asymmetric"
    out: str = ""
    seeds: list = field(default_factory=lambda: [0])
    data_size: int = 8192
    data_seed: int = 100
    data_mode: str = "bandit"
    data_noise: float = 0.0
    data_file: str = ""
    sweep_t_eps: list = field(default_factory=lambda: [0.70, 0.75, 0.80, 0.85, 0.90, 0.95])
    train: RefineConfig = field(default_factory=RefineConfig)

    @classmethod
    def from_entries(cls, entries: dict) -> "RunConfig":
        entries = dict(entries)
        cfg = cls()
        train_kwargs = {}
        train_fields = {f: type(getattr(cfg.train, f)) for f in asdict(cfg.train)}
        for key, value in entries.items():
            if key == "task":
                cfg.task = value
            elif key == "out":
                cfg.out = value
            elif key == "seeds":
                cfg.seeds = [int(v) for v in _split_list(value)]
            elif key == "data.size":
                cfg.data_size = int(value)
            elif key == "data.seed":
                cfg.data_seed = int(value)
            elif key == "data.mode":
                cfg.data_mode = value
            elif key == "data.noise":
                cfg.data_noise = float(value)
            elif key == "data.file":
                cfg.data_file = value
            elif key == "sweep.t_eps":
                cfg.sweep_t_eps = [float(v) for v in _split_list(value)]
            elif key.startswith("train."):
                name = key[len("train."):]
                if name not in train_fields:
                    raise ValueError(f"unknown training key {key!r}")
                train_kwargs[name] = _coerce(value, train_fields[name])
            else:
                raise ValueError(f"unknown config key {key!r}")
        cfg.train = RefineConfig(**train_kwargs)
        return cfg

    def to_entries(self) -> dict:
        entries = {
            "task": self.task,
            "out": self.out,
            "seeds": ",".join(str(s) for s in self.seeds),
            "data.size": str(self.data_size),
            "data.seed": str(self.data_seed),
            "data.mode": self.data_mode,
            "data.noise": repr(float(self.data_noise)),
            "data.file": self.data_file,
            "sweep.t_eps": ",".join(repr(float(t)) for t in self.sweep_t_eps),
        }
        for name, value in asdict(self.train).items():
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            entries[f"train.{name}"] = text
        return entries

    def to_text(self) -> str:
        return format_config(self.to_entries())

    @classmethod
    def load(cls, path, overrides=None) -> "RunConfig":
        with open(path) as fh:
            entries = parse_config_text(fh.read())
        entries.update(overrides or {})
        return cls.from_entries(entries)


def _split_list(value):
    return [v for v in (tok.strip() for tok in value.split(",")) if v]


def _coerce(value, target_type):
    if target_type is bool:
        lowered = value.lower()
        if lowered not in _BOOL_STRINGS:
            raise ValueError(f"expected a boolean, got {value!r}")
        return _BOOL_STRINGS[lowered]
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is tuple:
        return tuple(int(v) for v in _split_list(value))
    return value
