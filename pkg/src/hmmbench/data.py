"""Sequence dataset container and its on-disk CSV layout.

A dataset directory holds ``dataset.json`` (the header document) plus
``observations.csv`` and, when present, ``states.csv`` and ``inputs.csv``.
Observation rows are keyed by ``(seq, t)``; continuous data carries one
column per dimension, symbolic data a single ``symbol`` column.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

HEADER_FILE = "dataset.json"
FORMAT_NAME = "hmmbench-dataset"


def _as_sequence(arr, symbolic_hint=None):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise InvalidInputError("observation sequence must have at least one step")
    symbolic = np.issubdtype(arr.dtype, np.integer) if symbolic_hint is None else symbolic_hint
    if symbolic:
        if arr.ndim != 1:
            raise InvalidInputError("symbolic sequences must be one-dimensional")
        return np.ascontiguousarray(arr, dtype=np.int64)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError("continuous sequences must be T x D")
    return np.ascontiguousarray(arr)


def _split(data):
    """Turn an N x T (x D) array or an iterable of sequences into a list."""
    if isinstance(data, np.ndarray):
        return [data[i] for i in range(data.shape[0])]
    return list(data)


@dataclass(frozen=True)
class SequenceDataset:
    """N observation sequences with optional state and input labels.

    Continuous sequences are stored as ``T x D`` float arrays, symbolic
    ones as length-``T`` integer arrays. Labels are integer arrays aligned
    with the observations.
    """

    observations: tuple
    states: tuple | None = None
    inputs: dict | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.observations) == 0:
            raise InvalidInputError("dataset contains no sequences")
        kinds = {obs.ndim for obs in self.observations}
        if len(kinds) != 1:
            raise InvalidInputError("mixed symbolic and continuous sequences")
        if not self.is_symbolic:
            dims = {obs.shape[1] for obs in self.observations}
            if len(dims) != 1:
                raise InvalidInputError(f"inconsistent observation dimensions {sorted(dims)}")
        lengths = self.lengths
        if self.states is not None:
            if [len(s) for s in self.states] != lengths:
                raise InvalidInputError("state labels do not align with observations")
            if any(s.size and s.min() < 0 for s in self.states):
                raise InvalidInputError("state labels must be nonnegative")
        for name, seqs in (self.inputs or {}).items():
            if [len(s) for s in seqs] != lengths:
                raise InvalidInputError(f"input {name!r} does not align with observations")

    @classmethod
    def from_arrays(cls, observations, states=None, inputs=None, provenance=None,
                    symbolic=None):
        obs = tuple(_as_sequence(o, symbolic) for o in _split(observations))
        st = None
        if states is not None:
            st = tuple(np.asarray(s, dtype=np.int64).reshape(-1) for s in _split(states))
        inp = None
        if inputs:
            inp = {name: tuple(np.asarray(s, dtype=np.int64).reshape(-1) for s in _split(v))
                   for name, v in inputs.items()}
        return cls(obs, st, inp, dict(provenance or {}))

    # -- shape queries -------------------------------------------------

    @property
    def n_sequences(self) -> int:
        return len(self.observations)

    @property
    def lengths(self) -> list[int]:
        return [len(o) for o in self.observations]

    @property
    def n_observations(self) -> int:
        return int(sum(self.lengths))

    @property
    def is_symbolic(self) -> bool:
        return self.observations[0].ndim == 1

    @property
    def dim(self) -> int | None:
        return None if self.is_symbolic else int(self.observations[0].shape[1])

    @property
    def equal_length(self) -> bool:
        return len(set(self.lengths)) == 1

    @property
    def T(self) -> int:
        if not self.equal_length:
            raise InvalidInputError("sequences have unequal lengths")
        return self.lengths[0]

    @property
    def has_states(self) -> bool:
        return self.states is not None

    @property
    def n_symbols(self) -> int:
        if not self.is_symbolic:
            raise InvalidInputError("dataset is continuous")
        declared = self.provenance.get("n_symbols")
        observed = int(max(o.max() for o in self.observations)) + 1
        return max(int(declared), observed) if declared is not None else observed

    @property
    def n_states(self) -> int:
        declared = self.provenance.get("Ns")
        if self.states is None:
            if declared is None:
                raise InvalidInputError("dataset has no state labels")
            return int(declared)
        observed = int(max(s.max() for s in self.states)) + 1
        return max(int(declared), observed) if declared is not None else observed

    # -- views -----------------------------------------------------------

    def stacked_observations(self) -> np.ndarray:
        """N x T (x D) array; requires equal lengths."""
        self.T
        return np.stack(self.observations)

    def stacked_states(self) -> np.ndarray:
        if self.states is None:
            raise InvalidInputError("dataset has no state labels")
        self.T
        return np.stack(self.states)

    def pooled_observations(self) -> np.ndarray:
        return np.concatenate(self.observations, axis=0)

    def subset(self, indices: Sequence[int]) -> "SequenceDataset":
        idx = [int(i) for i in indices]
        obs = tuple(self.observations[i] for i in idx)
        st = None if self.states is None else tuple(self.states[i] for i in idx)
        inp = None
        if self.inputs:
            inp = {k: tuple(v[i] for i in idx) for k, v in self.inputs.items()}
        return SequenceDataset(obs, st, inp, dict(self.provenance))

    def select_features(self, columns: Sequence[int]) -> "SequenceDataset":
        if self.is_symbolic:
            raise InvalidInputError("cannot select features of symbolic data")
        cols = list(columns)
        obs = tuple(np.ascontiguousarray(o[:, cols]) for o in self.observations)
        return SequenceDataset(obs, self.states, self.inputs, dict(self.provenance))

    def with_observations(self, observations, **provenance) -> "SequenceDataset":
        obs = tuple(_as_sequence(o) for o in _split(observations))
        if [len(o) for o in obs] != self.lengths:
            raise InvalidInputError("replacement observations change sequence lengths")
        prov = dict(self.provenance)
        prov.update(provenance)
        return SequenceDataset(obs, self.states, self.inputs, prov)


# -- CSV layout ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(dataset: SequenceDataset, directory, header: dict | None = None) -> Path:
    """Write ``dataset`` to ``directory`` and return the header path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": FORMAT_NAME,
        "version": 1,
        "N": dataset.n_sequences,
        "T": dataset.T if dataset.equal_length else None,
        "lengths": None if dataset.equal_length else dataset.lengths,
        "symbolic": dataset.is_symbolic,
        "D": dataset.dim,
        "Ns": dataset.n_states if dataset.has_states or "Ns" in dataset.provenance else None,
        "input_names": sorted(dataset.inputs) if dataset.inputs else [],
        "provenance": dataset.provenance,
    }
    if dataset.is_symbolic:
        doc["n_symbols"] = dataset.n_symbols
    if header:
        doc.update(header)

    with open(out / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if dataset.is_symbolic:
            w.writerow(["seq", "t", "symbol"])
            for n, seq in enumerate(dataset.observations):
                for t, sym in enumerate(seq.tolist()):
                    w.writerow([n, t, sym])
        else:
            w.writerow(["seq", "t"] + [f"dim{d}" for d in range(dataset.dim)])
            for n, seq in enumerate(dataset.observations):
                for t, row in enumerate(seq.tolist()):
                    w.writerow([n, t] + [_fmt(v) for v in row])

    if dataset.states is not None:
        with open(out / "states.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "t", "state"])
            for n, seq in enumerate(dataset.states):
                for t, s in enumerate(seq.tolist()):
                    w.writerow([n, t, s])

    if dataset.inputs:
        names = sorted(dataset.inputs)
        with open(out / "inputs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "t"] + names)
            for n in range(dataset.n_sequences):
                cols = [dataset.inputs[k][n].tolist() for k in names]
                for t in range(len(cols[0])):
                    w.writerow([n, t] + [c[t] for c in cols])

    path = out / HEADER_FILE
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _read_table(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path} is empty")
    return rows[0], rows[1:]


def _group_rows(rows, n_seq, convert):
    per_seq: list[list] = [[] for _ in range(n_seq)]
    for row in rows:
        n, t = int(row[0]), int(row[1])
        if not 0 <= n < n_seq:
            raise InvalidInputError(f"sequence index {n} out of range")
        if t != len(per_seq[n]):
            raise InvalidInputError(f"rows for sequence {n} are not in time order")
        per_seq[n].append(convert(row[2:]))
    return per_seq


def read_header(directory) -> dict:
    path = Path(directory) / HEADER_FILE
    if not path.exists():
        raise FileNotFoundError(f"no dataset header at {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT_NAME:
        raise InvalidInputError(f"{path} is not an hmmbench dataset header")
    return doc


def read_dataset(directory) -> SequenceDataset:
    """Load a dataset written by :func:`write_dataset`."""
    root = Path(directory)
    doc = read_header(root)
    n_seq = int(doc["N"])
    _, rows = _read_table(root / "observations.csv")
    if doc["symbolic"]:
        obs = [np.array(seq, dtype=np.int64)
               for seq in _group_rows(rows, n_seq, lambda c: int(c[0]))]
    else:
        obs = [np.array(seq, dtype=np.float64).reshape(len(seq), -1)
               for seq in _group_rows(rows, n_seq, lambda c: [float(v) for v in c])]

    states = None
    if (root / "states.csv").exists():
        _, rows = _read_table(root / "states.csv")
        states = [np.array(seq, dtype=np.int64)
                  for seq in _group_rows(rows, n_seq, lambda c: int(c[0]))]

    inputs = None
    if (root / "inputs.csv").exists():
        head, rows = _read_table(root / "inputs.csv")
        names = head[2:]
        grouped = _group_rows(rows, n_seq, lambda c: [int(v) for v in c])
        inputs = {name: [np.array([r[j] for r in seq], dtype=np.int64) for seq in grouped]
                  for j, name in enumerate(names)}

    prov = dict(doc.get("provenance") or {})
    if doc.get("Ns") is not None:
        prov.setdefault("Ns", doc["Ns"])
    if doc["symbolic"] and doc.get("n_symbols") is not None:
        prov.setdefault("n_symbols", doc["n_symbols"])
    return SequenceDataset.from_arrays(obs, states, inputs, prov, symbolic=bool(doc["symbolic"]))
