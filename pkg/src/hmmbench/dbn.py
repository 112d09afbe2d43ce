"""Synthetic labeled time series from dynamic Bayesian network templates.

A template (:class:`DbnSpec`) lists discrete state/input nodes and
continuous observation nodes plus edges carrying a lag of 0 (same slice),
1 or 2 slices. Discrete nodes use multinomial CPDs, observation nodes
diagonal Gaussians indexed by their discrete parents' values.

Each node keeps one CPD table per *boundary level*: at slice ``t`` a
node whose longest incoming lag is ``L`` reads the table for level
``min(t, L)``, which conditions only on parents that exist at ``t``.
Reduced tables are the full table averaged uniformly over the missing
parents.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import SequenceDataset
from .errors import InvalidInputError, SpecValidationError

STATE = "state"
INPUT = "input"
OBSERVATION = "observation"
NODE_KINDS = (STATE, INPUT, OBSERVATION)

CASES = ("I", "II", "III", "IV")
CASE_DEFAULT_N = {"I": 2000, "II": 2000, "III": 1000, "IV": 2000}


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    #: cardinality for discrete nodes, dimension for observation nodes
    size: int

    @property
    def discrete(self) -> bool:
        return self.kind != OBSERVATION


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    lag: int = 0


@dataclass(frozen=True, eq=False)
class DiscreteCpd:
    """``tables[level]`` has shape (*parent cardinalities, cardinality)."""

    tables: tuple


@dataclass(frozen=True, eq=False)
class GaussianCpd:
    """``means[level]`` / ``variances[level]`` have shape (*parent cardinalities, D)."""

    means: tuple
    variances: tuple


@dataclass(frozen=True, eq=False)
class CpdSet:
    cpds: dict

    def __getitem__(self, name):
        return self.cpds[name]

    def __contains__(self, name):
        return name in self.cpds

    def to_dict(self) -> dict:
        out = {}
        for name, cpd in sorted(self.cpds.items()):
            if isinstance(cpd, DiscreteCpd):
                out[name] = {"type": "multinomial", "tables": [t.tolist() for t in cpd.tables]}
            else:
                out[name] = {"type": "gaussian", "means": [m.tolist() for m in cpd.means],
                             "variances": [v.tolist() for v in cpd.variances]}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "CpdSet":
        cpds = {}
        for name, entry in doc.items():
            if entry["type"] == "multinomial":
                cpds[name] = DiscreteCpd(tuple(np.asarray(t, dtype=float) for t in entry["tables"]))
            else:
                cpds[name] = GaussianCpd(tuple(np.asarray(m, dtype=float) for m in entry["means"]),
                                         tuple(np.asarray(v, dtype=float)
                                               for v in entry["variances"]))
        return cls(cpds)


@dataclass(frozen=True, eq=False)
class DbnSpec:
    name: str
    nodes: tuple
    edges: tuple
    T: int
    cpds: CpdSet | None = None
    default_n: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise SpecValidationError("node names must be unique")
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise SpecValidationError(f"node {n.name!r} has unknown kind {n.kind!r}")
            if int(n.size) < 1:
                raise SpecValidationError(f"node {n.name!r} needs a positive size")
        if sum(n.kind == STATE for n in self.nodes) != 1:
            raise SpecValidationError("a template has exactly one state node")
        for e in self.edges:
            if e.source not in names or e.target not in names:
                raise SpecValidationError(f"edge {e} references an unknown node")
            if e.lag not in (0, 1, 2):
                raise SpecValidationError(f"edge {e.source}->{e.target} has lag {e.lag}; "
                                          "only 0, 1 and 2 are supported")
            if self.node(e.source).kind == OBSERVATION:
                raise SpecValidationError(f"observation node {e.source!r} cannot be a parent")
            if e.lag == 0 and e.source == e.target:
                raise SpecValidationError(f"self-loop on {e.source!r} within a slice")
        if int(self.T) < 1:
            raise SpecValidationError("T must be >= 1")
        self.topological_order()

    # -- structure queries ----------------------------------------------------

    def node(self, name) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise SpecValidationError(f"unknown node {name!r}")

    def _index(self, name):
        return [n.name for n in self.nodes].index(name)

    def parents(self, name, level: int | None = None) -> list:
        """Incoming edges ordered by (lag, declaration order), optionally lag <= level."""
        edges = [e for e in self.edges if e.target == name
                 and (level is None or e.lag <= level)]
        return sorted(edges, key=lambda e: (e.lag, self._index(e.source)))

    def max_lag(self, name) -> int:
        return max((e.lag for e in self.edges if e.target == name), default=0)

    def topological_order(self) -> list:
        names = [n.name for n in self.nodes]
        indeg = {n: 0 for n in names}
        for e in self.edges:
            if e.lag == 0:
                indeg[e.target] += 1
        order = []
        ready = [n for n in names if indeg[n] == 0]
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for e in self.edges:
                if e.lag == 0 and e.source == cur:
                    indeg[e.target] -= 1
                    if indeg[e.target] == 0:
                        ready.append(e.target)
            ready.sort(key=names.index)
        if len(order) != len(names):
            raise SpecValidationError("intra-slice edges contain a cycle")
        return order

    @property
    def state_node(self) -> Node:
        return next(n for n in self.nodes if n.kind == STATE)

    @property
    def input_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == INPUT]

    @property
    def observation_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == OBSERVATION]

    @property
    def Ns(self) -> int:
        return int(self.state_node.size)

    @property
    def D(self) -> int:
        return int(sum(n.size for n in self.observation_nodes))

    def parent_shape(self, name, level) -> tuple:
        return tuple(int(self.node(e.source).size) for e in self.parents(name, level))

    def with_cpds(self, cpds: CpdSet) -> "DbnSpec":
        spec = replace(self, cpds=cpds)
        spec.validate_cpds()
        return spec

    # -- CPD validation ------------------------------------------------------------

    def validate_cpds(self):
        if self.cpds is None:
            raise SpecValidationError("template has no CPDs")
        for node in self.nodes:
            if node.name not in self.cpds:
                raise SpecValidationError(f"node {node.name!r} has no CPD")
            cpd = self.cpds[node.name]
            levels = self.max_lag(node.name) + 1
            for level in range(levels):
                pshape = self.parent_shape(node.name, level)
                pnames = [e.source for e in self.parents(node.name, level)]
                if node.discrete:
                    if not isinstance(cpd, DiscreteCpd) or len(cpd.tables) != levels:
                        raise SpecValidationError(
                            f"node {node.name!r} needs {levels} multinomial tables")
                    table = np.asarray(cpd.tables[level])
                    if table.shape != pshape + (node.size,):
                        raise SpecValidationError(
                            f"CPD of {node.name!r} at level {level} has shape {table.shape}, "
                            f"expected {pshape + (node.size,)}")
                    for cfg in np.ndindex(*pshape):
                        row = table[cfg]
                        if (not np.all(np.isfinite(row)) or np.any(row < 0)
                                or abs(row.sum() - 1.0) > 1e-9):
                            raise SpecValidationError(
                                f"CPD of {node.name!r} is missing or invalid for parent "
                                f"configuration {dict(zip(pnames, cfg))} (level {level})")
                else:
                    if not isinstance(cpd, GaussianCpd) or len(cpd.means) != levels:
                        raise SpecValidationError(
                            f"node {node.name!r} needs {levels} Gaussian tables")
                    means = np.asarray(cpd.means[level])
                    var = np.asarray(cpd.variances[level])
                    if means.shape != pshape + (node.size,) or var.shape != means.shape:
                        raise SpecValidationError(
                            f"Gaussian CPD of {node.name!r} at level {level} has wrong shape")
                    for cfg in np.ndindex(*pshape):
                        if (not np.all(np.isfinite(means[cfg])) or not np.all(np.isfinite(var[cfg]))
                                or np.any(var[cfg] <= 0)):
                            raise SpecValidationError(
                                f"Gaussian CPD of {node.name!r} is missing or invalid for parent "
                                f"configuration {dict(zip(pnames, cfg))} (level {level})")

    # -- serialization ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "T": int(self.T),
            "default_n": self.default_n,
            "nodes": [{"name": n.name, "kind": n.kind, "size": int(n.size)} for n in self.nodes],
            "edges": [{"source": e.source, "target": e.target, "lag": e.lag} for e in self.edges],
            "cpds": None if self.cpds is None else self.cpds.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DbnSpec":
        spec = cls(
            doc["name"],
            tuple(Node(n["name"], n["kind"], int(n["size"])) for n in doc["nodes"]),
            tuple(Edge(e["source"], e["target"], int(e.get("lag", 0))) for e in doc["edges"]),
            int(doc["T"]),
            None,
            doc.get("default_n"),
            dict(doc.get("meta") or {}),
        )
        if doc.get("cpds"):
            spec = spec.with_cpds(CpdSet.from_dict(doc["cpds"]))
        return spec


# -- the four case templates ----------------------------------------------------


def build_case_spec(case: str, T: int | None = None, D: int | None = None,
                    Ns: int | None = None, Nu=None) -> DbnSpec:
    """Template for one of the benchmark topologies ``I``..``IV``.

    ============  ==================================================
    Case I        u1_t, u2_t -> S_t; S_t -> S_t+1; S_t -> O_t (D=2)
    Case II       u_t -> u_t+1; u_t -> S_t, O_t; S_t -> S_t+1, O_t
    Case III      u_t -> S_t, u_t+1, S_t+1; S_t -> S_t+1, O_t, O_t+1
    Case IV       Case II plus S_t -> S_t+2
    ============  ==================================================
    """
    case = str(case).upper()
    if case not in CASES:
        raise InvalidInputError(f"unknown case {case!r}; valid cases are {', '.join(CASES)}")
    defaults = {
        "I": dict(T=50, D=2, Ns=3, Nu=(2, 2)),
        "II": dict(T=20, D=1, Ns=4, Nu=(2,)),
        "III": dict(T=10, D=1, Ns=4, Nu=(2,)),
        "IV": dict(T=20, D=1, Ns=4, Nu=(2,)),
    }[case]
    for name, value in (("T", T), ("D", D), ("Ns", Ns)):
        if value is not None:
            if int(value) < 1:
                raise InvalidInputError(f"{name} override must be positive")
            defaults[name] = int(value)
    if Nu is not None:
        n_inputs = len(defaults["Nu"])
        nu = (int(Nu),) * n_inputs if np.isscalar(Nu) else tuple(int(v) for v in Nu)
        if len(nu) != n_inputs or min(nu) < 1:
            raise InvalidInputError(f"case {case} needs {n_inputs} positive input cardinalities")
        defaults["Nu"] = nu

    nu = defaults["Nu"]
    state = Node("S", STATE, defaults["Ns"])
    obs = Node("O", OBSERVATION, defaults["D"])
    if case == "I":
        inputs = (Node("u1", INPUT, nu[0]), Node("u2", INPUT, nu[1]))
        edges = (Edge("u1", "S"), Edge("u2", "S"), Edge("S", "S", 1), Edge("S", "O"))
    else:
        inputs = (Node("u", INPUT, nu[0]),)
        if case in ("II", "IV"):
            edges = [Edge("u", "u", 1), Edge("u", "S"), Edge("u", "O"),
                     Edge("S", "S", 1), Edge("S", "O")]
            if case == "IV":
                edges.append(Edge("S", "S", 2))
        else:
            edges = [Edge("u", "S"), Edge("u", "u", 1), Edge("u", "S", 1),
                     Edge("S", "S", 1), Edge("S", "O"), Edge("S", "O", 1)]
        edges = tuple(edges)
    return DbnSpec(f"case-{case}", inputs + (state, obs), edges, defaults["T"],
                   default_n=CASE_DEFAULT_N[case], meta={"case": case})


# -- CPD generation ---------------------------------------------------------------


def _reduce_discrete(full, n_missing):
    """Average the trailing ``n_missing`` parent axes (uniform marginalization)."""
    if n_missing == 0:
        return full
    axes = tuple(range(full.ndim - 1 - n_missing, full.ndim - 1))
    return full.mean(axis=axes)


def _reduce_gaussian(means, variances, n_missing):
    if n_missing == 0:
        return means, variances
    axes = tuple(range(means.ndim - 1 - n_missing, means.ndim - 1))
    mean = means.mean(axis=axes)
    # moment-matched mixture over the missing configurations
    second = (variances + means ** 2).mean(axis=axes)
    return mean, second - mean ** 2


def random_cpds(spec: DbnSpec, seed=None, separation: float = 4.0, jitter: float = 0.5,
                concentration: float = 1.0) -> CpdSet:
    """Draw a CPD set for ``spec``.

    Multinomial rows come from a symmetric Dirichlet(``concentration``).
    Observation means sit at ``state * separation`` (unit variance)
    along each dimension, with the sign alternating between dimensions so
    that the coordinates of a multi-dimensional observation are negatively
    correlated. Each parent configuration then adds its own
    N(0, ``jitter``^2) offset.
    """
    if separation < 0 or jitter < 0:
        raise InvalidInputError("separation and jitter must be nonnegative")
    rng = np.random.default_rng(seed)
    cpds = {}
    for node in spec.nodes:
        L = spec.max_lag(node.name)
        full_parents = spec.parents(node.name)
        pshape = spec.parent_shape(node.name, L)
        levels_missing = [len(full_parents) - len(spec.parents(node.name, lv)) for lv in range(L + 1)]
        if node.discrete:
            full = rng.dirichlet(np.full(node.size, concentration), size=pshape)
            cpds[node.name] = DiscreteCpd(tuple(_reduce_discrete(full, m) for m in levels_missing))
        else:
            D = node.size
            sign = np.where(np.arange(D) % 2 == 0, 1.0, -1.0)
            base = np.zeros(pshape + (D,))
            state_axis = next((i for i, e in enumerate(full_parents)
                               if e.lag == 0 and spec.node(e.source).kind == STATE), None)
            if state_axis is not None:
                level = np.arange(pshape[state_axis], dtype=float)
                shape = [1] * len(pshape) + [1]
                shape[state_axis] = pshape[state_axis]
                base = base + level.reshape(shape) * separation * sign
            means = base + jitter * rng.standard_normal(pshape + (D,))
            variances = np.ones(pshape + (D,))
            reduced = [_reduce_gaussian(means, variances, m) for m in levels_missing]
            cpds[node.name] = GaussianCpd(tuple(r[0] for r in reduced),
                                          tuple(r[1] for r in reduced))
    return CpdSet(cpds)


# -- ancestral sampling -----------------------------------------------------------


def _categorical(probs, rng):
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[-1] - 1)


def sample_dataset(spec: DbnSpec, N: int, seed=None) -> SequenceDataset:
    """Ancestral sampling of ``N`` sequences of length ``spec.T``.

    Slices are generated in time order and, within a slice, in the
    topological order of the intra-slice edges; all sequences are drawn
    together from one seeded generator.
    """
    if int(N) < 1:
        raise InvalidInputError("N must be >= 1")
    spec.validate_cpds()
    N, T = int(N), int(spec.T)
    rng = np.random.default_rng(seed)
    order = spec.topological_order()
    values = {n.name: np.zeros((N, T), dtype=np.int64) for n in spec.nodes if n.discrete}
    obs_nodes = spec.observation_nodes
    obs = {n.name: np.zeros((N, T, n.size)) for n in obs_nodes}

    for t in range(T):
        for name in order:
            node = spec.node(name)
            level = min(t, spec.max_lag(name))
            idx = tuple(values[e.source][:, t - e.lag] for e in spec.parents(name, level))
            cpd = spec.cpds[name]
            if node.discrete:
                probs = cpd.tables[level][idx] if idx else np.broadcast_to(
                    cpd.tables[level], (N, node.size))
                values[name][:, t] = _categorical(probs, rng)
            else:
                mean = cpd.means[level][idx] if idx else np.broadcast_to(
                    cpd.means[level], (N, node.size))
                var = cpd.variances[level][idx] if idx else np.broadcast_to(
                    cpd.variances[level], (N, node.size))
                obs[name][:, t] = mean + np.sqrt(var) * rng.standard_normal((N, node.size))

    observations = np.concatenate([obs[n.name] for n in obs_nodes], axis=2)
    inputs = {n.name: values[n.name] for n in spec.input_nodes}
    if isinstance(seed, np.random.SeedSequence):
        seed = {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    prov = {"spec": spec.name, "seed": seed, "N": N, "T": T, "D": spec.D, "Ns": spec.Ns}
    return SequenceDataset.from_arrays(observations, values[spec.state_node.name], inputs,
                                       prov, symbolic=False)


def generate_case(case: str, N: int | None = None, seed: int = 0, separation: float = 4.0,
                  jitter: float = 0.5, **overrides):
    """Build a case template, draw its CPDs and sample a dataset.

    CPDs use ``seed`` and sampling a seed derived from it, so one integer
    reproduces the whole dataset.
    """
    spec = build_case_spec(case, **overrides)
    cpd_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    spec = spec.with_cpds(random_cpds(spec, cpd_seed, separation, jitter))
    spec = replace(spec, meta={**spec.meta, "separation": separation, "jitter": jitter})
    n = spec.default_n if N is None else N
    data = sample_dataset(spec, n, sample_seed)
    prov = dict(data.provenance)
    prov.update(seed=seed, separation=separation, jitter=jitter, case=spec.meta["case"])
    return spec, SequenceDataset(data.observations, data.states, data.inputs, prov)
