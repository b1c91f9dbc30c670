"""INI run configuration.

Sections mirror :class:`~sysaudit.pipeline.RunConfig`.  The task named in
``[run]`` selects the defaults; every other key overrides one field.
Unknown sections or keys are errors.

.. code-block:: ini

    [run]
    task = event
    seeds = 0, 1, 2, 3, 4

    [generator]
    n_events = 50000

    [generator.signal]
    pt_loc = 110

    [attack]
    kind = pgd
    step_size = 0.04

    [uncertainty.widths]
    jet1_pt = 0.03
"""
from __future__ import annotations

import configparser
from dataclasses import fields, replace
from io import StringIO
from pathlib import Path

from .attacks import AttackConfig
from .bench import CategoryParams, GenConfig
from .errors import ConfigurationError
from .models import ModelSpec, TrainConfig
from .pipeline import RunConfig, default_run_config

_NONE = ("none", "")


def _parse_list(text: str, kind=float) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    return tuple(kind(t) for t in items)


def _coerce(text: str, default, name: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() in _NONE else float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return _parse_list(text, kind)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {text!r}") from exc


def _override(obj, section: configparser.SectionProxy, skip=()):
    known = {f.name for f in fields(obj)} - set(skip)
    changes = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} in [{section.name}]")
        changes[key] = _coerce(text, getattr(obj, key), f"{section.name}.{key}")
    return replace(obj, **changes) if changes else obj


_SECTIONS = {"run", "generator", "generator.signal", "generator.background", "model", "train",
             "uncertainty", "uncertainty.widths", "uncertainty.limits", "attack"}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    unknown = set(parser.sections()) - _SECTIONS
    if unknown:
        raise ConfigurationError(f"{source}: unknown section(s) {sorted(unknown)}")

    run = parser["run"] if parser.has_section("run") else {}
    task = run.get("task", "event")
    n_events = int(parser.get("generator", "n_events", fallback=50_000))
    cfg = default_run_config(task, n_events)
    if parser.has_section("run"):
        for key, value in parser["run"].items():
            if key == "task":
                continue
            if key == "seeds":
                cfg = replace(cfg, seeds=_parse_list(value, int))
            elif key == "split_fractions":
                cfg = replace(cfg, split_fractions=_parse_list(value, float))
            elif key == "chi2_bins":
                cfg = replace(cfg, chi2_bins=int(value))
            elif key == "output_dir":
                cfg = replace(cfg, output_dir=value or None)
            else:
                raise ConfigurationError(f"unknown key {key!r} in [run]")

    gen = cfg.gen
    if parser.has_section("generator"):
        gen = _override(gen, parser["generator"], skip=("signal", "background"))
    for cat in ("signal", "background"):
        name = f"generator.{cat}"
        if parser.has_section(name):
            gen = replace(gen, **{cat: _override(getattr(gen, cat), parser[name])})

    model = cfg.model
    if parser.has_section("model"):
        sec = parser["model"]
        d = model.to_dict()
        for key, value in sec.items():
            if key not in d:
                raise ConfigurationError(f"unknown key {key!r} in [model]")
            if key in ("hidden", "embed"):
                d[key] = _parse_list(value, int)
            elif key == "dropout":
                d[key] = _parse_list(value, float)
                if len(d[key]) == 1:
                    d[key] = d[key][0]
            elif key == "n_features":
                d[key] = int(value)
            else:
                d[key] = value
        if "dropout" not in sec and len(set(d["dropout"])) == 1:
            d["dropout"] = d["dropout"][0]  # a uniform rate follows a changed layer count
        model = ModelSpec(d["family"], d["n_features"], tuple(d["hidden"]), tuple(d["embed"]), d["dropout"])

    train = _override(cfg.train, parser["train"]) if parser.has_section("train") else cfg.train
    attack = _override(cfg.attack, parser["attack"]) if parser.has_section("attack") else cfg.attack

    unc = cfg.uncertainty
    if parser.has_section("uncertainty"):
        changes = {}
        for key, value in parser["uncertainty"].items():
            if key == "n_sigma":
                changes[key] = float(value)
            elif key == "floor":
                changes[key] = None if value.lower() in _NONE else float(value)
            elif key == "masked":
                changes[key] = _parse_list(value, str)
            else:
                raise ConfigurationError(f"unknown key {key!r} in [uncertainty]")
        unc = replace(unc, **changes)
    if parser.has_section("uncertainty.widths"):
        widths = dict(unc.widths)
        widths.update({k: _coerce(v, 0.0, f"uncertainty.widths.{k}") for k, v in parser["uncertainty.widths"].items()})
        unc = replace(unc, widths=widths)
    if parser.has_section("uncertainty.limits"):
        limits = dict(unc.limits)
        for k, v in parser["uncertainty.limits"].items():
            pair = _parse_list(v, float)
            if len(pair) != 2 or pair[0] > pair[1]:
                raise ConfigurationError(f"limit for {k!r} must be 'low, high'")
            limits[k] = pair
        unc = replace(unc, limits=limits)

    try:
        return replace(cfg, gen=gen, model=model, train=train, attack=attack, uncertainty=unc)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text, str(path))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    p["run"] = {"task": cfg.task, "seeds": _fmt(cfg.seeds), "split_fractions": _fmt(cfg.split_fractions),
                "chi2_bins": str(cfg.chi2_bins), "output_dir": cfg.output_dir or ""}
    p["generator"] = {f.name: _fmt(getattr(cfg.gen, f.name)) for f in fields(GenConfig)
                      if f.name not in ("signal", "background")}
    for cat in ("signal", "background"):
        c = getattr(cfg.gen, cat)
        p[f"generator.{cat}"] = {f.name: _fmt(getattr(c, f.name)) for f in fields(CategoryParams)}
    m = cfg.model
    p["model"] = {"family": m.family, "n_features": str(m.n_features), "hidden": _fmt(m.hidden),
                  "embed": _fmt(m.embed), "dropout": _fmt(m.dropout)}
    p["train"] = {f.name: _fmt(getattr(cfg.train, f.name)) for f in fields(TrainConfig)}
    p["attack"] = {f.name: _fmt(getattr(cfg.attack, f.name)) for f in fields(AttackConfig)}
    u = cfg.uncertainty
    p["uncertainty"] = {"n_sigma": _fmt(u.n_sigma), "floor": _fmt(u.floor), "masked": _fmt(u.masked)}
    p["uncertainty.widths"] = {k: _fmt(v) for k, v in u.widths.items()}
    p["uncertainty.limits"] = {k: _fmt(v) for k, v in u.limits.items()}
    buf = StringIO()
    p.write(buf)
    return buf.getvalue()
