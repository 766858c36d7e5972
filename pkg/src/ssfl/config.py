"""Pipeline configuration: defaults, JSON file overrides, flag overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .embed import EmbedderParams
from .errors import ParseError
from .net import NetConfig
from .preprocess import PreprocessParams


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    n_c: int = 64
    embed: EmbedderParams = field(default_factory=EmbedderParams)
    net: NetConfig = field(default_factory=NetConfig)
    n_runs: int = 10
    parallel: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.n_c < 0:
            raise ValueError("n_c must be >= 0")
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")

    def as_dict(self) -> dict:
        return {
            "preprocess": asdict(self.preprocess),
            "select": {"n_c": self.n_c},
            "embed": asdict(self.embed),
            "net": asdict(self.net),
            "pipeline": {"n_runs": self.n_runs, "parallel": self.parallel},
        }


def _section(cls, base, doc, name):
    values = doc.get(name, {})
    if not isinstance(values, dict):
        raise ParseError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ParseError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return replace(base, **values)


def from_dict(doc: dict, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object")
    unknown = set(doc) - {"preprocess", "select", "embed", "net", "pipeline"}
    if unknown:
        raise ParseError(f"unknown config sections: {sorted(unknown)}")
    try:
        sel = doc.get("select", {})
        pipe = doc.get("pipeline", {})
        if set(sel) - {"n_c"} or set(pipe) - {"n_runs", "parallel"}:
            raise ParseError("unknown keys in 'select' or 'pipeline' section")
        return PipelineConfig(
            preprocess=_section(PreprocessParams, base.preprocess, doc, "preprocess"),
            n_c=sel.get("n_c", base.n_c),
            embed=_section(EmbedderParams, base.embed, doc, "embed"),
            net=_section(NetConfig, base.net, doc, "net"),
            n_runs=pipe.get("n_runs", base.n_runs),
            parallel=pipe.get("parallel", base.parallel),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"invalid config: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return from_dict(doc)


def with_overrides(cfg: PipelineConfig, *, seed=None, n_c=None, threshold=None,
                   runs=None, parallel=None, epochs=None) -> PipelineConfig:
    net = cfg.net
    if seed is not None:
        net = replace(net, seed=seed)
    if threshold is not None:
        net = replace(net, threshold=threshold)
    if epochs is not None:
        net = replace(net, epochs=epochs)
    return replace(
        cfg, net=net,
        n_c=cfg.n_c if n_c is None else n_c,
        n_runs=cfg.n_runs if runs is None else runs,
        parallel=cfg.parallel if parallel is None else parallel,
    )
