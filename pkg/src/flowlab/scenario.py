"""Scenario files: one JSON document describing a model, h recipes and checks.

Matrices are dense and row-major.  Times may be written as decimal strings
(``"0.5"``) or numbers; both are parsed to binary doubles.  States are
referred to by label, defaulting to ``"1".."n"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ScenarioError
from .htransform import h_from_recipe
from .model import make_bundle
from .stopping import Constant, Entrance, Hitting, Min, ShiftedSum

CHECK_TYPES = ("consistency", "first-passage", "h-independence", "markov", "optional-measure",
               "revuz", "strong-markov", "yosida")

_number = {"oneOf": [{"type": "number"}, {"type": "string", "pattern": r"^\s*[-+]?[0-9.eE+-]+\s*$"}]}
_vector = {"type": "array", "items": _number, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["model", "checks"],
    "properties": {
        "name": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["L"],
            "properties": {
                "states": {"type": "array", "items": {"type": ["string", "integer"]}},
                "m": _vector,
                "L": {"type": "array", "items": _vector, "minItems": 1},
                "alpha": _number,
            },
        },
        "hRecipes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "direct": _vector,
                    "resolvent": {"oneOf": [_vector, _number]},
                },
                "oneOf": [{"required": ["direct"]}, {"required": ["resolvent"]}],
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type"],
                "properties": {"type": {"enum": list(CHECK_TYPES)}, "name": {"type": "string"}},
            },
        },
        "mc": {
            "type": "object",
            "properties": {
                "nPaths": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "horizon": {"oneOf": [_number, {"type": "null"}]},
            },
        },
        "tolerances": {
            "type": "object",
            "properties": {"exact": _number, "z": _number},
        },
    },
}


def num(x):
    return float(str(x).strip()) if isinstance(x, str) else float(x)


def vec(xs):
    return np.array([num(x) for x in xs], dtype=float)


@dataclass
class Scenario:
    name: str
    bundle: object
    labels: tuple
    h_list: list
    h_names: list
    checks: list
    n_paths: int = 100_000
    seed: int | None = None
    horizon: float | None = None
    tol_exact: float = 1e-9
    tol_z: float = 4.0
    raw: dict = field(default_factory=dict, repr=False)

    def state(self, label):
        key = str(label)
        if key not in self.labels:
            raise ScenarioError(f"unknown state {label!r}; states are {list(self.labels)}")
        return self.labels.index(key)

    def states(self, labels):
        return [self.state(x) for x in labels]

    def stopping_time(self, spec):
        """JSON stopping-time spec to an expression tree."""
        if isinstance(spec, (int, float, str)):
            return Constant(num(spec))
        if not isinstance(spec, dict) or len(spec) != 1:
            raise ScenarioError(f"bad stopping time {spec!r}")
        (kind, arg), = spec.items()
        if kind == "constant":
            return Constant(num(arg))
        if kind == "hitting":
            return Hitting(self.states(arg))
        if kind == "entrance":
            return Entrance(self.states(arg))
        if kind == "min":
            return Min(self.stopping_time(arg[0]), self.stopping_time(arg[1]))
        if kind == "shiftedSum":
            return ShiftedSum(self.stopping_time(arg[0]), self.stopping_time(arg[1]))
        raise ScenarioError(f"unknown stopping time kind {kind!r}")

    def vector(self, xs, name="vector"):
        v = vec(xs)
        if v.shape != (self.bundle.n,):
            raise ScenarioError(f"{name} must have {self.bundle.n} entries")
        return v


def parse(doc, name=None) -> Scenario:
    """Validate a scenario document and build the model and h-transforms.

    Schema problems raise :class:`ScenarioError`; model problems propagate
    as the model's own errors (e.g. ``NonMetzler``).
    """
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ScenarioError(f"invalid scenario: {e.message}") from None
    mdl = doc["model"]
    L = [vec(r) for r in mdl["L"]]
    if len({len(r) for r in L}) != 1:
        raise ScenarioError("L rows must all have the same length")
    L = np.array(L)
    n = L.shape[0]
    labels = tuple(str(s) for s in mdl.get("states", [str(i + 1) for i in range(n)]))
    m = vec(mdl["m"]) if "m" in mdl else None
    if len(labels) != n:
        raise ScenarioError(f"{len(labels)} state labels for a {n}-state model")
    bundle = make_bundle(L, m, num(mdl.get("alpha", 1.0)), labels)
    recipes = doc.get("hRecipes") or [{"resolvent": 1.0}]
    h_list, h_names = [], []
    for i, r in enumerate(recipes):
        rec = {k: (vec(v) if isinstance(v, list) else num(v)) for k, v in r.items() if k != "name"}
        h_list.append(h_from_recipe(bundle, rec))
        h_names.append(r.get("name", f"h{i + 1}"))
    checks = []
    seen = set()
    for c in doc["checks"]:
        cname = c.get("name", c["type"])
        if cname in seen:
            raise ScenarioError(f"duplicate check name {cname!r}")
        seen.add(cname)
        checks.append({**c, "name": cname})
    mc = doc.get("mc", {})
    tol = doc.get("tolerances", {})
    hz = mc.get("horizon")
    return Scenario(
        name=doc.get("name", name or "scenario"),
        bundle=bundle,
        labels=labels,
        h_list=h_list,
        h_names=h_names,
        checks=checks,
        n_paths=int(mc.get("nPaths", 100_000)),
        seed=mc.get("seed"),
        horizon=None if hz is None else num(hz),
        tol_exact=num(tol.get("exact", 1e-9)),
        tol_z=num(tol.get("z", 4.0)),
        raw=doc,
    )


def shipped():
    """Names of the scenarios bundled with the package."""
    root = resources.files("flowlab") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load(path_or_name) -> Scenario:
    """Read a scenario from a path, or by the name of a shipped scenario."""
    p = Path(path_or_name)
    if p.is_file():
        text, name = p.read_text(), p.stem
    else:
        res = resources.files("flowlab") / "scenarios" / f"{path_or_name}.json"
        if not res.is_file():
            raise ScenarioError(f"no scenario file or shipped scenario named {path_or_name!r}")
        text, name = res.read_text(), str(path_or_name)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: {e}") from None
    return parse(doc, name)
