"""Pipeline configuration in INI form.

Example::

    [input]
    table = crime.csv
    history = history.csv
    target_year = 2022

    [aggregate]
    GBR = GBR-EW, GBR-NI, GBR-S

    [preprocess]
    exclude_rows = MDA, VAT
    exclude_columns =
        Corruption: Bribery
        Corruption: Other forms of corruption

    [imputation]
    repetitions = 100

    [rmode]
    k = 3

    [qmode]
    k = 3

    [tsne]
    perplexity = 10

    [run]
    seed = 20221
    out_dir = out

Relative paths are resolved against the directory holding the file. Row
ids in ``exclude_rows`` may be separated by commas or newlines; column
names go one per line because they may contain commas.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..errors import ConfigError

DEFAULT_SEED = 20221


@dataclass(frozen=True)
class ImputationSettings:
    repetitions: int = 100
    k: int = 5
    trim_fraction: float = 0.25
    tol: float = 1e-6
    max_iter: int = 50
    lts_starts: int = 500
    strict: bool = False


@dataclass(frozen=True)
class TsneSettings:
    enabled: bool = True
    perplexity: float = 10.0
    learning_rate: float = 200.0
    n_iter: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250


@dataclass(frozen=True)
class PipelineConfig:
    table: Path
    history: Path | None = None
    target_year: int | None = None
    aggregate: dict = field(default_factory=dict)
    exclude_rows: tuple = ()
    exclude_columns: tuple = ()
    k_rmode: int = 3
    k_range: tuple = (2, 8)
    restarts: int = 50
    k_qmode: int = 3
    variation: str = "robust"
    pca_min_parts: int = 3
    imputation: ImputationSettings = ImputationSettings()
    tsne: TsneSettings = TsneSettings()
    seed: int = DEFAULT_SEED
    out_dir: Path = Path("out")

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        if check_paths:
            for p in (self.table, self.history):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"input file not found: {p}")
        if self.history is not None and self.target_year is None:
            raise ConfigError("a history file needs target_year")
        if self.k_rmode < 2 or self.k_qmode < 2:
            raise ConfigError("cluster counts must be at least 2")
        lo, hi = self.k_range
        if lo < 2 or hi < lo:
            raise ConfigError(f"bad k_range {self.k_range}")
        if self.imputation.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.variation not in ("robust", "classical"):
            raise ConfigError("variation must be 'robust' or 'classical'")
        if self.restarts < 1:
            raise ConfigError("restarts must be at least 1")
        return self

    def with_overrides(self, seed=None, out_dir=None, skip_tsne=False, repetitions=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=Path(out_dir))
        if skip_tsne:
            cfg = replace(cfg, tsne=replace(cfg.tsne, enabled=False))
        if repetitions is not None:
            cfg = replace(cfg, imputation=replace(cfg.imputation, repetitions=int(repetitions)))
        return cfg.validate(check_paths=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("table", "history", "out_dir"):
            out[key] = None if out[key] is None else str(out[key])
        out["exclude_rows"] = list(self.exclude_rows)
        out["exclude_columns"] = list(self.exclude_columns)
        out["k_range"] = list(self.k_range)
        out["aggregate"] = {k: list(v) for k, v in self.aggregate.items()}
        return out

    def hash(self) -> str:
        """SHA-256 of the settings that affect results (output location excluded)."""
        data = self.to_dict()
        data.pop("out_dir")
        for key in ("table", "history"):
            if data[key] is not None:
                data[key] = Path(data[key]).name
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _split(value: str, commas: bool) -> tuple:
    parts = []
    for line in value.splitlines():
        parts += line.split(",") if commas else [line]
    return tuple(p.strip() for p in parts if p.strip())


def _bool(section, key, default):
    try:
        return section.getboolean(key, fallback=default)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from exc


def _num(section, key, default, kind):
    raw = section.get(key, fallback=None)
    if raw is None:
        return default
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: cannot read {raw!r}") from exc


def load_config(path) -> PipelineConfig:
    """Read and validate a configuration file.

    Raises
    ------
    ConfigError
        For unreadable files, unknown sections, bad values or missing inputs.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {"input", "aggregate", "preprocess", "imputation", "rmode", "qmode", "pca", "tsne", "run"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    for name in known:
        if not parser.has_section(name):
            parser.add_section(name)
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    inp = parser["input"]
    if "table" not in inp:
        raise ConfigError("[input] table is required")
    history = inp.get("history", fallback=None)
    pre, imp, rm, qm, ts, run = (parser[s] for s in
                                 ("preprocess", "imputation", "rmode", "qmode", "tsne", "run"))
    k_range = _split(rm.get("k_range", fallback="2-8").replace("-", ","), commas=True)
    if len(k_range) != 2:
        raise ConfigError("[rmode] k_range must look like 2-8")
    try:
        k_range = tuple(int(v) for v in k_range)
    except ValueError as exc:
        raise ConfigError(f"[rmode] k_range: {exc}") from exc
    cfg = PipelineConfig(
        table=resolve(inp["table"]),
        history=resolve(history) if history else None,
        target_year=_num(inp, "target_year", None, int),
        aggregate={k: _split(v, commas=True) for k, v in parser["aggregate"].items()},
        exclude_rows=_split(pre.get("exclude_rows", fallback=""), commas=True),
        exclude_columns=_split(pre.get("exclude_columns", fallback=""), commas=False),
        k_rmode=_num(rm, "k", 3, int),
        k_range=k_range,
        restarts=_num(rm, "restarts", 50, int),
        k_qmode=_num(qm, "k", 3, int),
        variation=qm.get("variation", fallback="robust"),
        pca_min_parts=_num(parser["pca"], "min_parts", 3, int),
        imputation=ImputationSettings(
            repetitions=_num(imp, "repetitions", 100, int),
            k=_num(imp, "k", 5, int),
            trim_fraction=_num(imp, "trim_fraction", 0.25, float),
            tol=_num(imp, "tol", 1e-6, float),
            max_iter=_num(imp, "max_iter", 50, int),
            lts_starts=_num(imp, "lts_starts", 500, int),
            strict=_bool(imp, "strict", False),
        ),
        tsne=TsneSettings(
            enabled=_bool(ts, "enabled", True),
            perplexity=_num(ts, "perplexity", 10.0, float),
            learning_rate=_num(ts, "learning_rate", 200.0, float),
            n_iter=_num(ts, "n_iter", 1000, int),
            exaggeration=_num(ts, "exaggeration", 12.0, float),
            exaggeration_iters=_num(ts, "exaggeration_iters", 250, int),
        ),
        seed=_num(run, "seed", DEFAULT_SEED, int),
        out_dir=resolve(run.get("out_dir", fallback="out")),
    )
    return cfg.validate()
