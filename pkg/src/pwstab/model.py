"""Viscous conservation-law systems  u_t + sum_j f^j(u)_{x_j} = Laplacian(u).

Fluxes are stored as tables of polynomial and trigonometric terms so that
Jacobians are always analytic.  A term contributes to one component
(``target``) of one flux f^j:

    poly:  coeff * prod_k u_k ** vars[k]      (vars are integer exponents)
    sin:   coeff * sin(sum_k vars[k] * u_k)   (vars are real weights)
    cos:   coeff * cos(sum_k vars[k] * u_k)
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TERM_KINDS = ("poly", "sin", "cos")


class ModelConfigError(ValueError):
    """Invalid model document.  ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class UnsupportedDimensionError(ModelConfigError):
    pass


@dataclass(frozen=True)
class FluxTerm:
    kind: str
    target: int
    vars: tuple[float, ...]
    coeff: float

    def to_dict(self) -> dict:
        if self.kind == "poly":
            v: list = [int(e) for e in self.vars]
        else:
            v = [float(w) for w in self.vars]
        return {"kind": self.kind, "target": self.target, "vars": v, "coeff": float(self.coeff)}


@dataclass(frozen=True)
class ModelSystem:
    """Immutable flux description for an n-component system in d dimensions."""

    name: str
    n: int
    d: int
    terms: tuple[tuple[FluxTerm, ...], ...]
    smoothness_order: int = 8
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        _validate(self.n, self.d, self.terms)
        if self.smoothness_order < self.d // 2 + 4:
            warnings.warn(
                f"smoothness_order K={self.smoothness_order} is below floor(d/2)+4="
                f"{self.d // 2 + 4}; decay statements assume more regularity",
                stacklevel=2,
            )

    # -- evaluation -------------------------------------------------------
    def flux(self, u: np.ndarray, j: int = 0) -> np.ndarray:
        """f^j evaluated at states u of shape (..., n); j is zero-based."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape, dtype=float)
        for term in self.terms[j]:
            val, _ = _term_value(term, u, need_grad=False)
            out[..., term.target] += val
        return out

    def jacobian(self, u: np.ndarray, j: int = 0) -> np.ndarray:
        """Df^j at states u of shape (..., n); returns shape (..., n, n)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape + (self.n,), dtype=float)
        for term in self.terms[j]:
            _, grad = _term_value(term, u, need_grad=True)
            out[..., term.target, :] += grad
        return out

    def directional_flux(self, u: np.ndarray, nu: Sequence[float]) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape, dtype=float)
        for j in range(self.d):
            if nu[j] != 0.0:
                out += nu[j] * self.flux(u, j)
        return out

    def directional_jacobian(self, u: np.ndarray, nu: Sequence[float]) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape + (self.n,), dtype=float)
        for j in range(self.d):
            if nu[j] != 0.0:
                out += nu[j] * self.jacobian(u, j)
        return out

    @property
    def is_trivial(self) -> bool:
        return all(len(t) == 0 for t in self.terms)

    # -- transformations ---------------------------------------------------
    def scaled(self, factor: float) -> "ModelSystem":
        """Same model with every flux multiplied by ``factor``."""
        terms = tuple(
            tuple(FluxTerm(t.kind, t.target, t.vars, t.coeff * factor) for t in tj) for tj in self.terms
        )
        return ModelSystem(f"{self.name}*{factor:.17g}", self.n, self.d, terms, self.smoothness_order)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "d": self.d,
            "smoothness_order": self.smoothness_order,
            "flux": [[t.to_dict() for t in tj] for tj in self.terms],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def check_jacobian(self, npts: int = 100, eps: float = 1e-6, seed: int = 0, scale: float = 2.0) -> float:
        """Max relative central-difference mismatch of Df^j over random points."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for j in range(self.d):
            for _ in range(npts):
                u = rng.uniform(-scale, scale, self.n)
                h = rng.normal(size=self.n)
                h /= np.linalg.norm(h)
                fd = (self.flux(u + eps * h, j) - self.flux(u - eps * h, j)) / (2 * eps)
                an = self.jacobian(u, j) @ h
                worst = max(worst, np.linalg.norm(fd - an) / max(1.0, np.linalg.norm(an)))
        return worst


def _term_value(term: FluxTerm, u: np.ndarray, need_grad: bool):
    w = np.asarray(term.vars, dtype=float)
    if term.kind == "poly":
        powers = [u[..., k] ** int(w[k]) for k in range(u.shape[-1])]
        val = term.coeff * np.prod(powers, axis=0) if powers else term.coeff
        if not need_grad:
            return val, None
        grad = np.zeros(u.shape, dtype=float)
        for k in range(u.shape[-1]):
            e = int(w[k])
            if e == 0:
                continue
            g = term.coeff * e * u[..., k] ** (e - 1)
            for l in range(u.shape[-1]):
                if l != k:
                    g = g * powers[l]
            grad[..., k] = g
        return val, grad
    phase = u @ w
    if term.kind == "sin":
        val, dval = term.coeff * np.sin(phase), term.coeff * np.cos(phase)
    else:
        val, dval = term.coeff * np.cos(phase), -term.coeff * np.sin(phase)
    if not need_grad:
        return val, None
    return val, dval[..., None] * w


def _validate(n: int, d: int, terms) -> None:
    if d not in (1, 2):
        raise UnsupportedDimensionError(f"unsupported spatial dimension d={d}; only 1 and 2 are handled", "d")
    if n == 1:
        raise ModelConfigError("scalar systems admit no periodic profiles", "n")
    if n < 1:
        raise ModelConfigError(f"state dimension must be positive, got {n}", "n")
    if len(terms) != d:
        raise ModelConfigError(f"expected {d} flux term lists, got {len(terms)}", "flux")
    for j, tj in enumerate(terms):
        for i, t in enumerate(tj):
            where = f"flux[{j}][{i}]"
            if t.kind not in TERM_KINDS:
                raise ModelConfigError(f"unknown term kind {t.kind!r}", where + ".kind")
            if not 0 <= t.target < n:
                raise ModelConfigError(f"target {t.target} outside 0..{n - 1}", where + ".target")
            if len(t.vars) != n:
                raise ModelConfigError(f"expected {n} entries, got {len(t.vars)}", where + ".vars")
            if t.kind == "poly" and any(e < 0 or int(e) != e for e in t.vars):
                raise ModelConfigError("polynomial exponents must be non-negative integers", where + ".vars")


def _parse_term(raw: Any, where: str) -> FluxTerm:
    if not isinstance(raw, Mapping):
        raise ModelConfigError("term must be an object", where)
    for key in ("kind", "target", "vars", "coeff"):
        if key not in raw:
            raise ModelConfigError("missing key", f"{where}.{key}")
    try:
        return FluxTerm(str(raw["kind"]), int(raw["target"]), tuple(float(v) for v in raw["vars"]), float(raw["coeff"]))
    except (TypeError, ValueError) as exc:
        raise ModelConfigError(str(exc), where) from exc


# -- builtin catalog ---------------------------------------------------------

def _poly(target: int, exps: Sequence[int], coeff: float) -> FluxTerm:
    return FluxTerm("poly", target, tuple(float(e) for e in exps), float(coeff))


def _linear_terms(mat: np.ndarray) -> tuple[FluxTerm, ...]:
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    out = []
    for i in range(n):
        for k in range(n):
            if mat[i, k] != 0.0:
                out.append(_poly(i, [1 if l == k else 0 for l in range(n)], mat[i, k]))
    return tuple(out)


def pendulum(d: int = 1, transverse: Sequence[Sequence[float]] | None = None) -> ModelSystem:
    """f^1 = (u2, -sin u1); f^2 = c u.  With s = q = 0 the profile ODE is the pendulum."""
    f1 = (_poly(0, [0, 1], 1.0), FluxTerm("sin", 1, (1.0, 0.0), -1.0))
    terms = [f1]
    if d == 2:
        c = np.array([[0.5, 0.0], [0.0, 0.25]]) if transverse is None else np.asarray(transverse, float)
        terms.append(_linear_terms(c))
    return ModelSystem("pendulum", 2, d, tuple(terms))


def heat(n: int = 2, d: int = 1) -> ModelSystem:
    """f = 0: decoupled heat equations; admits constant states only."""
    return ModelSystem("heat", n, d, tuple(() for _ in range(d)))


def linear(matrices: Sequence[Sequence[Sequence[float]]] | None = None, d: int | None = None) -> ModelSystem:
    """Constant-coefficient fluxes f^j(u) = A^j u."""
    if matrices is None:
        matrices = [[[0.0, 1.0], [-1.0, 0.0]]]
    mats = [np.asarray(a, float) for a in matrices]
    d = len(mats) if d is None else d
    if len(mats) != d:
        raise ModelConfigError(f"need {d} matrices, got {len(mats)}", "matrices")
    n = mats[0].shape[0]
    return ModelSystem("linear", n, d, tuple(_linear_terms(a) for a in mats))


def cubic(d: int = 1) -> ModelSystem:
    """f^1 = (u2, -u1 + u1^2): oscillator in the potential u^2/2 - u^3/3."""
    f1 = (_poly(0, [0, 1], 1.0), _poly(1, [1, 0], -1.0), _poly(1, [2, 0], 1.0))
    terms = [f1] + ([_linear_terms(np.diag([0.5, 0.25]))] if d == 2 else [])
    return ModelSystem("cubic", 2, d, tuple(terms))


def rotor(beta0: float = 1.0, beta1: float = 0.5) -> ModelSystem:
    """Rotation-equivariant flux f^1 = (beta0 + beta1 |u|^2) J u, J = [[0,1],[-1,0]].

    Profiles are circles and the linearization is constant-coefficient in a
    co-rotating frame, which makes the Bloch spectrum available in closed form.
    """
    f1 = (
        _poly(0, [0, 1], beta0), _poly(0, [2, 1], beta1), _poly(0, [0, 3], beta1),
        _poly(1, [1, 0], -beta0), _poly(1, [3, 0], -beta1), _poly(1, [1, 2], -beta1),
    )
    return ModelSystem("rotor", 2, 1, (f1,))


BUILTINS = {
    "pendulum": pendulum,
    "heat": heat,
    "linear": linear,
    "cubic": cubic,
    "rotor": rotor,
}


def load_model(document: str | Mapping[str, Any]) -> ModelSystem:
    """Parse and validate a model document (JSON text or already-decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ModelConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", "document") from exc
    else:
        doc = copy.deepcopy(dict(document))
    if not isinstance(doc, Mapping):
        raise ModelConfigError("model document must be a JSON object", "document")

    if "builtin" in doc:
        name = doc["builtin"]
        if name not in BUILTINS:
            raise ModelConfigError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}", "builtin")
        params = dict(doc.get("params", {}))
        if "d" in doc:
            params["d"] = doc["d"]
        if "n" in doc and name == "heat":
            params["n"] = doc["n"]
        if "d" in params and params["d"] not in (1, 2):
            raise UnsupportedDimensionError(f"unsupported spatial dimension d={params['d']}", "d")
        try:
            model = BUILTINS[name](**params)
        except TypeError as exc:
            raise ModelConfigError(str(exc), "params") from exc
        if "smoothness_order" in doc:
            model = ModelSystem(model.name, model.n, model.d, model.terms, int(doc["smoothness_order"]))
        return model

    for key in ("n", "d", "flux"):
        if key not in doc:
            raise ModelConfigError("missing required key", key)
    try:
        n, d = int(doc["n"]), int(doc["d"])
    except (TypeError, ValueError) as exc:
        raise ModelConfigError("n and d must be integers", "n") from exc
    if d not in (1, 2):
        raise UnsupportedDimensionError(f"unsupported spatial dimension d={d}; only 1 and 2 are handled", "d")
    if n == 1:
        raise ModelConfigError("scalar systems admit no periodic profiles", "n")
    flux = doc["flux"]
    if not isinstance(flux, list):
        raise ModelConfigError("must be a list of per-direction term lists", "flux")
    terms = []
    for j, tj in enumerate(flux):
        if not isinstance(tj, list):
            raise ModelConfigError("must be a list of terms", f"flux[{j}]")
        terms.append(tuple(_parse_term(t, f"flux[{j}][{i}]") for i, t in enumerate(tj)))
    return ModelSystem(str(doc.get("name", "custom")), n, d, tuple(terms), int(doc.get("smoothness_order", 8)))
