"""Run configuration: a hand-editable INI document with [model], [pair],
[field], and [command] sections.

Grammar (full reference in the README):

    [model]
    species = a b
    lambda = 0.5 0.5
    epsilon = 1.0

    [term.1]
    p = 2
    beta = 1.0
    delta2 = all 1.0            # or explicit entries: (a,a)=1 (a,b)=0.5 ...

    [pair]
    m = 0 1
    q = 0.0
    phi = identity              # or: knots = ... plus one phi.<label> = ... per species

    [field]                     # optional external field
    h = 0.0 0.0

    [command]
    name = evaluate
    seed = 1234

Tensor entries are given as (index-tuple)=value pairs; unspecified entries
are zero, and symmetry is validated rather than silently completed.  All
randomized commands require an explicit seed (no wall-clock defaults).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .admissible import AdmissiblePair, DiscreteMeasure, SyncMap, identity_map
from .errors import ValidationError
from .model import MixedModel, make_model


def _floats(text: str) -> np.ndarray:
    return np.array([float(tok) for tok in text.split()])


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]


def _parse_delta(text: str, species: tuple[str, ...], p: int):
    toks = text.split()
    if toks and toks[0] == "all":
        if len(toks) != 2:
            raise ValidationError("'all' tensor shorthand takes exactly one value")
        return np.full((len(species),) * p, float(toks[1]))
    entries = {}
    for tok in toks:
        if "=" not in tok or not tok.startswith("("):
            raise ValidationError(f"bad tensor entry {tok!r}; expected (a,b)=value")
        lhs, rhs = tok.split("=", 1)
        labels = tuple(part.strip() for part in lhs.strip("()").split(","))
        if len(labels) != p:
            raise ValidationError(f"tensor entry {tok!r} has arity {len(labels)}, need {p}")
        entries[labels] = float(rhs)
    return entries


@dataclass
class RunConfig:
    model: MixedModel
    pair: AdmissiblePair | None
    field_h: np.ndarray | None
    command: str
    params: dict
    raw_bytes: bytes
    path: str

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_bytes).hexdigest()

    def get_int(self, key, default=None) -> int:
        val = self.params.get(key, default)
        if val is None:
            raise ValidationError(f"command parameter {key!r} is required")
        return int(val)

    def get_float(self, key, default=None) -> float:
        val = self.params.get(key, default)
        if val is None:
            raise ValidationError(f"command parameter {key!r} is required")
        return float(val)

    def get_ints(self, key, default=None) -> list[int]:
        val = self.params.get(key)
        if val is None:
            if default is None:
                raise ValidationError(f"command parameter {key!r} is required")
            return list(default)
        return _ints(val) if isinstance(val, str) else list(val)

    def get_floats(self, key, default=None) -> np.ndarray:
        val = self.params.get(key)
        if val is None:
            if default is None:
                raise ValidationError(f"command parameter {key!r} is required")
            return np.asarray(default, dtype=np.float64)
        return _floats(val) if isinstance(val, str) else np.asarray(val, dtype=np.float64)

    def get_str(self, key, default=None) -> str:
        val = self.params.get(key, default)
        if val is None:
            raise ValidationError(f"command parameter {key!r} is required")
        return str(val)


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(raw.decode("utf-8"))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc

    if "model" not in parser:
        raise ValidationError("config is missing the [model] section")
    msec = parser["model"]
    species = tuple(msec.get("species", "").split())
    if not species:
        raise ValidationError("[model] species must list at least one label")
    lam = _floats(msec.get("lambda", ""))
    epsilon = float(msec.get("epsilon", "1.0"))
    term_sections = sorted(s for s in parser.sections() if s.startswith("term"))
    terms = []
    for name in term_sections:
        tsec = parser[name]
        p = int(tsec.get("p"))
        beta = float(tsec.get("beta"))
        delta = _parse_delta(tsec.get("delta2", "all 0"), species, p)
        terms.append((p, beta, delta))
    model = make_model(species, lam, terms, epsilon_decay=epsilon)

    pair = None
    if "pair" in parser:
        pair = _parse_pair(parser["pair"], species)

    field_h = None
    if "field" in parser:
        field_h = _floats(parser["field"].get("h", ""))
        if field_h.shape != (len(species),):
            raise ValidationError("[field] h needs one entry per species")

    if "command" not in parser:
        raise ValidationError("config is missing the [command] section")
    csec = parser["command"]
    command = csec.get("name")
    if not command:
        raise ValidationError("[command] must set name")
    params = {k: v for k, v in csec.items() if k != "name"}
    return RunConfig(model=model, pair=pair, field_h=field_h, command=command,
                     params=params, raw_bytes=raw, path=path)


def _parse_pair(sec, species) -> AdmissiblePair:
    m = _floats(sec.get("m", ""))
    q = _floats(sec.get("q", ""))
    measure = DiscreteMeasure(m=m, q=q)
    phi_kind = sec.get("phi", "").strip()
    if phi_kind == "identity" or (not phi_kind and "knots" not in sec):
        sync = identity_map(len(species))
    else:
        knots = _floats(sec.get("knots", ""))
        values = []
        for label in species:
            key = f"phi.{label}"
            if key not in sec:
                raise ValidationError(f"[pair] is missing {key}")
            values.append(_floats(sec.get(key)))
        sync = SyncMap(knots=knots, values=np.stack(values))
    return AdmissiblePair(measure=measure, map=sync)


# ---------------------------------------------------------------------------
# run records and CSV output


def fmt(x) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def join_seq(values) -> str:
    return ";".join(fmt(v) for v in np.asarray(values).ravel())


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class RunRecord:
    """Self-describing run summary: the embedded config text plus command,
    seed, and worker count are enough to reproduce the run."""

    config_hash: str
    command: str
    seed: int | None
    workers: int
    config_text: str = ""
    outputs: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def save(self, path) -> None:
        import numba
        import scipy

        from . import __version__

        payload = {
            "config_hash": self.config_hash,
            "config_text": self.config_text,
            "command": self.command,
            "seed": self.seed,
            "workers": self.workers,
            "outputs": self.outputs,
            "wall_time_s": self.wall_time_s,
            "versions": {
                "msparisi": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False
