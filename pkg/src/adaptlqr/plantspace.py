"""Structured plant families: parameter boxes, graph sparsity, sampling.

A family describes every entry of (A, B) as one of

* ``Fixed(value)``   -- a universally known constant,
* ``Free(lo, hi)``   -- an interval of admissible values,
* ``ZERO``           -- pinned to zero by the plant graph.

Concrete plants are drawn from the box (uniformly by default), validated
numerically for stabilizability/detectability on construction, and carry
their block structure around so controllers can slice them per subsystem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    NotDetectable,
    NotPositiveDefinite,
    NotStabilizable,
    RejectionLimitExceeded,
)
from .matlin import as_matrix, stab_detect_check, sym_sqrt_psd

_SAMPLE_STREAM_TAG = 0x5A17
_REJECTION_LIMIT = 1000


# ---------------------------------------------------------------------------
# entry specs


@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class Free:
    lo: float
    hi: float


class _Zero:
    """Singleton marker for entries pinned to zero by the plant graph."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ZERO"


ZERO = _Zero()

EntrySpec = Fixed | Free | _Zero


def entry_spec_from_json(obj) -> EntrySpec:
    if obj == "zero":
        return ZERO
    if isinstance(obj, dict):
        if "fixed" in obj:
            return Fixed(float(obj["fixed"]))
        if "free" in obj:
            lo, hi = obj["free"]
            return Free(float(lo), float(hi))
    raise ConfigError(f"bad entry spec: {obj!r}")


def entry_spec_to_json(spec: EntrySpec):
    if spec is ZERO:
        return "zero"
    if isinstance(spec, Fixed):
        return {"fixed": spec.value}
    if isinstance(spec, Free):
        return {"free": [spec.lo, spec.hi]}
    raise TypeError(f"not an entry spec: {spec!r}")


class EntryClass(IntEnum):
    """Role of one (A|B) entry in an estimation problem."""

    KNOWN = 0
    FREE = 1
    ZERO = 2


# ---------------------------------------------------------------------------
# info structure


@dataclass(frozen=True)
class InfoStructure:
    """Subsystem block dimensions plus plant- and design-graph adjacency.

    ``plant_adj[i, j] != 0`` means subsystem j influences subsystem i, so the
    (i, j) blocks of A and B may be nonzero.  ``design_adj[i, j] != 0`` means
    subcontroller i knows block-row j of the model.  Diagonal design entries
    are forced to 1 (each subcontroller knows its own subsystem) unless
    ``allow_no_self_knowledge`` is set, which exists for the centralized
    estimator and its equivalence tests.
    """

    state_dims: tuple[int, ...]
    input_dims: tuple[int, ...]
    plant_adj: np.ndarray
    design_adj: np.ndarray
    allow_no_self_knowledge: bool = False

    def __post_init__(self):
        state_dims = tuple(int(d) for d in self.state_dims)
        input_dims = tuple(int(d) for d in self.input_dims)
        if len(state_dims) != len(input_dims):
            raise DimensionMismatch("state_dims and input_dims must have equal length")
        if any(d < 1 for d in state_dims) or any(d < 0 for d in input_dims):
            raise ConfigError("subsystem dimensions must be positive")
        n_sub = len(state_dims)
        plant_adj = np.asarray(self.plant_adj, dtype=int)
        design_adj = np.array(self.design_adj, dtype=int)
        if plant_adj.shape != (n_sub, n_sub) or design_adj.shape != (n_sub, n_sub):
            raise DimensionMismatch("adjacency matrices must be N x N")
        if not self.allow_no_self_knowledge:
            np.fill_diagonal(design_adj, 1)
        object.__setattr__(self, "state_dims", state_dims)
        object.__setattr__(self, "input_dims", input_dims)
        object.__setattr__(self, "plant_adj", plant_adj)
        object.__setattr__(self, "design_adj", design_adj)

    @property
    def n_subsystems(self) -> int:
        return len(self.state_dims)

    @property
    def n(self) -> int:
        return sum(self.state_dims)

    @property
    def m(self) -> int:
        return sum(self.input_dims)

    def state_slice(self, i: int) -> slice:
        off = sum(self.state_dims[:i])
        return slice(off, off + self.state_dims[i])

    def input_slice(self, i: int) -> slice:
        off = sum(self.input_dims[:i])
        return slice(off, off + self.input_dims[i])

    def block_of_state_row(self, row: int) -> int:
        off = 0
        for i, d in enumerate(self.state_dims):
            off += d
            if row < off:
                return i
        raise IndexError(f"state row {row} out of range")

    def entry_is_graph_zero(self, row: int, col: int, in_b: bool) -> bool:
        i = self.block_of_state_row(row)
        dims = self.input_dims if in_b else self.state_dims
        off = 0
        for j, d in enumerate(dims):
            off += d
            if col < off:
                return self.plant_adj[i, j] == 0
        raise IndexError(f"column {col} out of range")


# ---------------------------------------------------------------------------
# family


@dataclass(frozen=True)
class PlantFamily:
    """A compact box of structured plants sharing Q, R, and graph sparsity.

    ``density`` optionally reweights plants for the average competitive
    ratio: a positive function of the free-parameter vector, used as an
    importance weight on uniformly drawn samples.  ``None`` means uniform.
    """

    info: InfoStructure
    a_spec: tuple[tuple[EntrySpec, ...], ...]
    b_spec: tuple[tuple[EntrySpec, ...], ...]
    q: np.ndarray
    r: np.ndarray
    density: Callable[[np.ndarray], float] | None = None

    def __post_init__(self):
        n, m = self.info.n, self.info.m
        a_spec = tuple(tuple(row) for row in self.a_spec)
        b_spec = tuple(tuple(row) for row in self.b_spec)
        if len(a_spec) != n or any(len(row) != n for row in a_spec):
            raise DimensionMismatch("a_spec must be n x n")
        if len(b_spec) != n or any(len(row) != m for row in b_spec):
            raise DimensionMismatch("b_spec must be n x m")
        q = as_matrix(self.q, "q")
        r = as_matrix(self.r, "r")
        if q.shape != (n, n) or r.shape != (m, m):
            raise DimensionMismatch("q must be n x n, r must be m x m")
        for spec_mat, in_b in ((a_spec, False), (b_spec, True)):
            for i, row in enumerate(spec_mat):
                for j, spec in enumerate(row):
                    zero_here = self.info.entry_is_graph_zero(i, j, in_b)
                    if zero_here and spec is not ZERO:
                        raise ConfigError(
                            f"entry ({i},{j}) of {'B' if in_b else 'A'} must be "
                            "zero by the plant graph"
                        )
                    if isinstance(spec, Free):
                        if not (np.isfinite(spec.lo) and np.isfinite(spec.hi)):
                            raise ConfigError("free intervals must be bounded")
                        if not spec.lo < spec.hi:
                            raise ConfigError("free intervals need lo < hi")
                    if isinstance(spec, Fixed) and not np.isfinite(spec.value):
                        raise ConfigError("fixed entries must be finite")
        object.__setattr__(self, "a_spec", a_spec)
        object.__setattr__(self, "b_spec", b_spec)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    # -- free-entry bookkeeping ------------------------------------------

    def free_entries(self) -> list[tuple[str, int, int, float, float]]:
        """All Free entries as (label, row, combined-col, lo, hi).

        Columns index the combined (A | B) matrix: A columns first, then B.
        Order is row-major over A, then row-major over B.
        """
        n = self.info.n
        out = []
        for i, row in enumerate(self.a_spec):
            for j, spec in enumerate(row):
                if isinstance(spec, Free):
                    out.append((f"a[{i}][{j}]", i, j, spec.lo, spec.hi))
        for i, row in enumerate(self.b_spec):
            for j, spec in enumerate(row):
                if isinstance(spec, Free):
                    out.append((f"b[{i}][{j}]", i, n + j, spec.lo, spec.hi))
        return out

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        ents = self.free_entries()
        lo = np.array([e[3] for e in ents])
        hi = np.array([e[4] for e in ents])
        return lo, hi

    def base_matrix(self) -> np.ndarray:
        """Combined (n, n+m) matrix of Fixed values, zeros elsewhere."""
        n, m = self.info.n, self.info.m
        base = np.zeros((n, n + m))
        for i, row in enumerate(self.a_spec):
            for j, spec in enumerate(row):
                if isinstance(spec, Fixed):
                    base[i, j] = spec.value
        for i, row in enumerate(self.b_spec):
            for j, spec in enumerate(row):
                if isinstance(spec, Fixed):
                    base[i, n + j] = spec.value
        return base

    def assemble(self, free_values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        """(A, B) with the given values scattered into the Free slots."""
        ents = self.free_entries()
        vals = np.asarray(free_values, dtype=float)
        if vals.shape != (len(ents),):
            raise DimensionMismatch(
                f"expected {len(ents)} free values, got shape {vals.shape}"
            )
        combined = self.base_matrix()
        for (label, i, c, lo, hi), v in zip(ents, vals):
            combined[i, c] = v
        n = self.info.n
        return combined[:, :n], combined[:, n:]

    def midpoint(self) -> np.ndarray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def make_plant(self, free_values: Sequence[float]) -> "PlantInstance":
        a, b = self.assemble(free_values)
        return PlantInstance(
            a=a, b=b, q=self.q, r=self.r, info=self.info,
            free_values=np.asarray(free_values, dtype=float),
        )


@dataclass(frozen=True)
class PlantInstance:
    """Concrete (A, B, Q, R) with block structure, validated on construction.

    Construction rejects plants failing the numeric stabilizability or
    detectability tests, so downstream Riccati solves are safe.
    """

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    r: np.ndarray
    info: InfoStructure
    free_values: np.ndarray | None = None

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        q = as_matrix(self.q, "q")
        r = as_matrix(self.r, "r")
        n, m = self.info.n, self.info.m
        if a.shape != (n, n) or b.shape != (n, m):
            raise DimensionMismatch("plant matrices do not match the info structure")
        if q.shape != (n, n) or r.shape != (m, m):
            raise DimensionMismatch("q/r do not match the info structure")
        for i in range(self.info.n_subsystems):
            si = self.info.state_slice(i)
            for j in range(self.info.n_subsystems):
                if self.info.plant_adj[i, j] == 0:
                    if np.any(a[si, self.info.state_slice(j)] != 0.0):
                        raise ConfigError("A violates plant-graph sparsity")
                    if np.any(b[si, self.info.input_slice(j)] != 0.0):
                        raise ConfigError("B violates plant-graph sparsity")
        flags = stab_detect_check(a, b, q)
        if not flags.stabilizable:
            raise NotStabilizable("sampled (A, B) is not numerically stabilizable")
        if not flags.detectable:
            raise NotDetectable("sampled (A, Q^{1/2}) is not numerically detectable")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @property
    def n(self) -> int:
        return self.info.n

    @property
    def m(self) -> int:
        return self.info.m

    def describe(self) -> str:
        if self.free_values is None:
            return "plant(free values unknown)"
        vals = ", ".join(f"{v:.6g}" for v in self.free_values)
        return f"plant({vals})"


# ---------------------------------------------------------------------------
# noise model and whitening


@dataclass(frozen=True)
class NoiseModel:
    """Per-subsystem noise covariances; ``None`` means unit covariance."""

    covariances: tuple[np.ndarray, ...] | None = None

    def is_unit(self) -> bool:
        return self.covariances is None

    def validate(self, info: InfoStructure) -> None:
        if self.covariances is None:
            return
        if len(self.covariances) != info.n_subsystems:
            raise DimensionMismatch("need one covariance per subsystem")
        for i, h in enumerate(self.covariances):
            h = as_matrix(h, f"H_{i}")
            d = info.state_dims[i]
            if h.shape != (d, d):
                raise DimensionMismatch(f"H_{i} must be {d} x {d}")
            if not np.allclose(h, h.T, atol=1e-12):
                raise NotPositiveDefinite(f"H_{i} must be symmetric")
            if np.min(np.linalg.eigvalsh(h)) <= 0:
                raise NotPositiveDefinite(f"H_{i} must be positive definite")


def _blockdiag_sqrt(noise: NoiseModel, info: InfoStructure) -> tuple[np.ndarray, np.ndarray]:
    """(H^{1/2}, H^{-1/2}) as full block-diagonal matrices."""
    n = info.n
    hs = np.zeros((n, n))
    hs_inv = np.zeros((n, n))
    for i, h in enumerate(noise.covariances):
        s = info.state_slice(i)
        root = sym_sqrt_psd(h)
        hs[s, s] = root
        hs_inv[s, s] = np.linalg.inv(root)
    return hs, hs_inv


def whiten(plant: PlantInstance, noise: NoiseModel) -> PlantInstance:
    """Change of variables that makes the process noise unit covariance.

    With per-subsystem covariances H_i, states transform as
    ``x_i -> H_i^{-1/2} x_i``, so ``A_ij -> H_i^{-1/2} A_ij H_j^{1/2}``,
    ``B_ij -> H_i^{-1/2} B_ij``, and ``Q_ij -> H_i^{1/2} Q_ij H_j^{1/2}``,
    which leaves the quadratic running cost unchanged.
    """
    if noise.is_unit():
        return plant
    noise.validate(plant.info)
    hs, hs_inv = _blockdiag_sqrt(noise, plant.info)
    a_bar = hs_inv @ plant.a @ hs
    b_bar = hs_inv @ plant.b
    q_bar = hs @ plant.q @ hs
    # exact zeros survive conjugation by block-diagonal maps only up to
    # roundoff; re-pin graph zeros so validation passes
    for i in range(plant.info.n_subsystems):
        si = plant.info.state_slice(i)
        for j in range(plant.info.n_subsystems):
            if plant.info.plant_adj[i, j] == 0:
                a_bar[si, plant.info.state_slice(j)] = 0.0
                b_bar[si, plant.info.input_slice(j)] = 0.0
    return PlantInstance(
        a=a_bar, b=b_bar, q=q_bar, r=plant.r, info=plant.info,
        free_values=plant.free_values,
    )


# ---------------------------------------------------------------------------
# sampling


def sample_plant(family: PlantFamily, rng_seed: int) -> PlantInstance:
    """Draw a plant from the family box, rejecting invalid samples.

    Free entries are drawn uniformly in their intervals; draws failing the
    stabilizability/detectability check are redrawn (such plants form a
    measure-zero set in well-posed families).  Deterministic given the seed.
    """
    lo, hi = family.bounds()
    if lo.size == 0:
        return family.make_plant(np.empty(0))
    ss = np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFFFFFFFFFF, _SAMPLE_STREAM_TAG])
    rng = np.random.Generator(np.random.Philox(ss))
    for _ in range(_REJECTION_LIMIT):
        vals = lo + (hi - lo) * rng.random(lo.size)
        try:
            return family.make_plant(vals)
        except (NotStabilizable, NotDetectable):
            continue
    raise RejectionLimitExceeded(
        f"no valid plant after {_REJECTION_LIMIT} draws; the family is badly posed"
    )


# ---------------------------------------------------------------------------
# estimation masks


def known_mask(family: PlantFamily, subsystem: int) -> np.ndarray:
    """Entry classification for subcontroller ``subsystem``'s estimator.

    Returns an (n, n+m) array of :class:`EntryClass` over the combined
    (A | B) matrix.  Block-rows j with ``design_adj[subsystem, j] != 0`` are
    KNOWN (fixed at the true values during estimation); Fixed entries are
    KNOWN everywhere (universally known constants); graph zeros are ZERO;
    the rest are FREE decision variables.
    """
    n_sub = family.info.n_subsystems
    if not 0 <= subsystem < n_sub:
        raise IndexError(f"subsystem {subsystem} out of range [0, {n_sub})")
    known_rows = {
        j for j in range(n_sub) if family.info.design_adj[subsystem, j] != 0
    }
    return _classify(family, known_rows)


def no_knowledge_mask(family: PlantFamily) -> np.ndarray:
    """Mask for the centralized estimator: no design-graph knowledge at all."""
    return _classify(family, set())


def _classify(family: PlantFamily, known_rows: set[int]) -> np.ndarray:
    n, m = family.info.n, family.info.m
    mask = np.empty((n, n + m), dtype=np.int8)
    for spec_mat, col_off in ((family.a_spec, 0), (family.b_spec, n)):
        for i, row in enumerate(spec_mat):
            block = family.info.block_of_state_row(i)
            for j, spec in enumerate(row):
                if spec is ZERO:
                    cls = EntryClass.ZERO
                elif block in known_rows or isinstance(spec, Fixed):
                    cls = EntryClass.KNOWN
                else:
                    cls = EntryClass.FREE
                mask[i, col_off + j] = cls
    return mask


# ---------------------------------------------------------------------------
# JSON round trip


def family_to_json(family: PlantFamily) -> dict:
    return {
        "state_dims": list(family.info.state_dims),
        "input_dims": list(family.info.input_dims),
        "plant_adj": family.info.plant_adj.tolist(),
        "design_adj": family.info.design_adj.tolist(),
        "a": [[entry_spec_to_json(s) for s in row] for row in family.a_spec],
        "b": [[entry_spec_to_json(s) for s in row] for row in family.b_spec],
        "q": family.q.tolist(),
        "r": family.r.tolist(),
    }


def family_from_json(doc: dict) -> PlantFamily:
    try:
        info = InfoStructure(
            state_dims=tuple(doc["state_dims"]),
            input_dims=tuple(doc["input_dims"]),
            plant_adj=np.asarray(doc["plant_adj"]),
            design_adj=np.asarray(doc["design_adj"]),
        )
        a_spec = tuple(
            tuple(entry_spec_from_json(s) for s in row) for row in doc["a"]
        )
        b_spec = tuple(
            tuple(entry_spec_from_json(s) for s in row) for row in doc["b"]
        )
        return PlantFamily(
            info=info, a_spec=a_spec, b_spec=b_spec,
            q=np.asarray(doc["q"], dtype=float),
            r=np.asarray(doc["r"], dtype=float),
        )
    except KeyError as exc:
        raise ConfigError(f"family document is missing key {exc}") from exc


def load_family(path: str | Path) -> PlantFamily:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"family file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"family file {path} is not valid JSON: {exc}") from exc
    return family_from_json(doc)


def save_family(family: PlantFamily, path: str | Path) -> None:
    Path(path).write_text(json.dumps(family_to_json(family), indent=2) + "\n")
