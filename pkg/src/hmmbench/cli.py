"""Command-line entry point: ``hmmbench {generate,discretize,train,eval,sweep}``.

Every command accepts ``--config <file.json>``; values given on the command
line override the file, which overrides built-in defaults. Each command
writes a ``manifest.json`` next to its outputs recording the resolved
configuration, its hash and library versions.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import __version__, hmm
from .data import SequenceDataset, read_dataset, write_dataset
from .dbn import CASES, DbnSpec, random_cpds, sample_dataset, generate_case
from .discretize import (PER_SLICE, POOLED, Codebook, discretize_per_slice, discretize_pooled,
                         select_k_elbow, select_k_silhouette)
from .errors import InvalidInputError, NumericalUnderflowError
from .evaluation import (DEFAULT_RATIOS, MODEL_KINDS, SweepConfig, accuracy, apply_mapping,
                         map_states, run_sweep, split_indices)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRAIN_KINDS = ("supervised-dhmm", "unsupervised-dhmm", "supervised-chmm", "unsupervised-chmm")

DEFAULTS = {
    "generate": {"case": None, "spec": None, "n": None, "T": None, "D": None, "ns": None,
                 "nu": None, "separation": 4.0, "jitter": 0.5, "seed": 0, "out": "data"},
    "discretize": {"data": None, "mode": "pooled", "k": None, "auto": False,
                   "k_range": "2..8", "seed": 0, "out": "data-symbolic"},
    "train": {"data": None, "kind": "supervised-dhmm", "states": None, "n_mix": 1,
              "n_symbols": None, "pseudo_count": 1.0, "restarts": 10, "max_iters": 500,
              "rel_tol": 1e-6, "train_ratio": 0.8, "split_seed": 0, "seed": 0, "out": "model"},
    "eval": {"model": None, "data": None, "train_ratio": None, "split_seed": None,
             "all": False, "out": None, "seed": 0},
    "sweep": {"data": None, "kinds": ",".join(MODEL_KINDS),
              "ratios": ",".join(str(r) for r in DEFAULT_RATIOS), "split_seed": None,
              "train_seed": None, "seed": 0, "states": None, "group_features": True,
              "timing": False, "hyperparams": {}, "out": "sweep"},
}


class ConfigError(Exception):
    """Bad command line or configuration file."""


class Reporter:
    def __init__(self, quiet):
        self.quiet = quiet

    def __call__(self, *args):
        if not self.quiet:
            print(*args)


# -- helpers -------------------------------------------------------------------


def _parse_range(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"cannot parse k range {text!r}") from err


def _parse_list(text, cast=str):
    if isinstance(text, (list, tuple)):
        return [cast(v) for v in text]
    try:
        return [cast(v.strip()) for v in str(text).split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"cannot parse list {text!r}") from err


def _resolve(command, args) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold an object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = __version__
    return {"hmmbench": pkg, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory {out} is not writable: {err}") from err
    return out


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_manifest(out: Path, command: str, cfg: dict, seeds: dict):
    outputs = [p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json"]
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(_canonical(cfg).encode()).hexdigest(),
        "seeds": seeds,
        "versions": _versions(),
        "outputs": sorted(outputs),
    })


def _load_data(path) -> SequenceDataset:
    if path is None:
        raise ConfigError("--data is required")
    return read_dataset(path)


# -- commands --------------------------------------------------------------------


def cmd_generate(cfg, say):
    if (cfg["case"] is None) == (cfg["spec"] is None):
        raise ConfigError("give exactly one of --case or --spec")
    seed = int(cfg["seed"])
    if cfg["case"] is not None:
        case = str(cfg["case"]).upper()
        if case not in CASES:
            raise ConfigError(f"unknown case {cfg['case']!r}; valid cases: {', '.join(CASES)}")
        nu = None if cfg["nu"] is None else _parse_list(cfg["nu"], int)
        spec, data = generate_case(case, N=cfg["n"], seed=seed, separation=float(cfg["separation"]),
                                   jitter=float(cfg["jitter"]), T=cfg["T"], D=cfg["D"],
                                   Ns=cfg["ns"], Nu=nu)
    else:
        path = Path(cfg["spec"])
        if not path.exists():
            raise ConfigError(f"spec file not found: {path}")
        spec = DbnSpec.from_dict(json.loads(path.read_text()))
        cpd_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
        if spec.cpds is None:
            spec = spec.with_cpds(random_cpds(spec, cpd_seed, float(cfg["separation"]),
                                              float(cfg["jitter"])))
        n = cfg["n"] or spec.default_n
        if n is None:
            raise ConfigError("--n is required for a custom spec without default_n")
        data = sample_dataset(spec, int(n), sample_seed)
        data = SequenceDataset(data.observations, data.states, data.inputs,
                               {**data.provenance, "seed": seed})
    out = _prepare_out(cfg["out"])
    write_dataset(data, out)
    _write_manifest(out, "generate", cfg, {"data": seed})
    obs = data.stacked_observations()
    states = data.stacked_states()
    say(f"generated {spec.name}: N={data.n_sequences} T={data.T} D={data.dim} Ns={spec.Ns}")
    for s in range(spec.Ns):
        sel = obs[states == s]
        means = ", ".join(f"{v:.3f}" for v in sel.mean(axis=0)) if len(sel) else "n/a"
        say(f"  state {s}: mean observation [{means}] ({len(sel)} samples)")
    return EXIT_OK


def cmd_discretize(cfg, say):
    data = _load_data(cfg["data"])
    if data.is_symbolic:
        raise InvalidInputError("dataset is already symbolic")
    mode = str(cfg["mode"]).replace("-", "_")
    if mode not in (POOLED, PER_SLICE):
        raise ConfigError(f"unknown mode {cfg['mode']!r}; use pooled or per-slice")
    seed = int(cfg["seed"])
    selection = {}
    if cfg["auto"]:
        ks = _parse_range(cfg["k_range"])
        points = data.pooled_observations()
        sil = select_k_silhouette(points, [k for k in ks if k >= 2], seed=seed)
        selection["silhouette"] = {"k": sil.k, "ks": list(sil.ks), "scores": list(sil.scores)}
        if len(ks) >= 3:
            elb = select_k_elbow(points, ks, seed=seed)
            selection["elbow"] = {"k": elb.k, "ks": list(elb.ks), "sse": list(elb.scores)}
            say(f"elbow choice: k={elb.k}")
        say(f"silhouette choice: k={sil.k} (used)")
        k = sil.k
    elif cfg["k"] is None:
        raise ConfigError("give --k or --auto")
    else:
        k = int(cfg["k"])
    if mode == POOLED:
        sym, book = discretize_pooled(data, k, seed=seed)
    else:
        sym, book = discretize_per_slice(data, k, seed=seed)
    out = _prepare_out(cfg["out"])
    book = Codebook(book.mode, book.centroids, book.fitted_T, {**book.meta, "selection": selection})
    write_dataset(sym, out)
    _write_json(out / "codebook.json", book.to_dict())
    _write_manifest(out, "discretize", cfg, {"kmeans": seed})
    say(f"discretized {data.n_sequences} sequences ({mode}) into an alphabet of "
        f"{book.n_symbols} symbols")
    return EXIT_OK


def _check_arity(model: hmm.HMM, data: SequenceDataset):
    if model.kind == "dhmm":
        if not data.is_symbolic:
            raise InvalidInputError("discrete model cannot score continuous observations; "
                                    "discretize the dataset first")
        if data.n_symbols > model.emission.n_symbols:
            raise InvalidInputError(f"dataset uses {data.n_symbols} symbols but the model "
                                    f"emits only {model.emission.n_symbols}")
    else:
        if data.is_symbolic:
            raise InvalidInputError(f"continuous model ({model.kind}) cannot score symbolic "
                                    "observations")
        if data.dim != model.emission.dim:
            raise InvalidInputError(f"model expects D={model.emission.dim}, dataset has "
                                    f"D={data.dim}")


def cmd_train(cfg, say):
    data = _load_data(cfg["data"])
    kind = cfg["kind"]
    if kind not in TRAIN_KINDS:
        raise ConfigError(f"unknown kind {kind!r}; valid: {', '.join(TRAIN_KINDS)}")
    discrete = kind.endswith("dhmm")
    if discrete != data.is_symbolic:
        need = "symbolic" if discrete else "continuous"
        raise InvalidInputError(f"{kind} needs {need} observations")
    supervised = kind.startswith("supervised")
    if supervised and not data.has_states:
        raise ConfigError(f"{kind} needs state labels")
    ratio = float(cfg["train_ratio"])
    if not 0 < ratio <= 1:
        raise ConfigError("--train-ratio must lie in (0, 1]")
    split_seed = int(cfg["split_seed"])
    if ratio < 1:
        train_idx, _ = split_indices(data.n_sequences, ratio, split_seed)
        train = data.subset(train_idx)
    else:
        train = data
    M = int(cfg["states"] or data.n_states)
    n_mix = int(cfg["n_mix"])
    emission = hmm.DISCRETE if discrete else (hmm.GAUSSIAN if n_mix == 1 else hmm.GMM)
    history = None
    seed = int(cfg["seed"])
    if supervised:
        model = hmm.fit_supervised(train, M, emission, pseudo_count=float(cfg["pseudo_count"]),
                                   n_symbols=cfg["n_symbols"] or (data.n_symbols if discrete
                                                                  else None),
                                   n_mix=n_mix if emission == hmm.GMM else None, seed=seed)
    else:
        em = hmm.EmTrainConfig(max_iters=int(cfg["max_iters"]), rel_tol=float(cfg["rel_tol"]),
                               num_restarts=int(cfg["restarts"]), seed=seed)
        model, history = hmm.baum_welch(
            train, M, emission, em, n_mix=n_mix if emission == hmm.GMM else None,
            n_symbols=cfg["n_symbols"] or (data.n_symbols if discrete else None))
    meta = {"kind": kind, "split": {"train_ratio": ratio, "split_seed": split_seed}}
    if not supervised and train.has_states:
        perm, _ = map_states(train.states, hmm.decode(model, train), M)
        meta["state_mapping"] = list(perm)
    model = model.with_meta(**meta)
    out = _prepare_out(cfg["out"])
    _write_json(out / "model.json", model.to_dict())
    if history is not None:
        _write_json(out / "history.json", history.to_dict())
    _write_manifest(out, "train", cfg, {"training": seed, "split": split_seed})
    ll = model.meta.get("final_log_likelihood")
    say(f"trained {kind} with {M} states on {train.n_sequences} sequences "
        f"({model.n_params} parameters)" + ("" if ll is None else f", log-likelihood {ll:.4f}"))
    return EXIT_OK


def cmd_eval(cfg, say):
    if cfg["model"] is None:
        raise ConfigError("--model is required")
    path = Path(cfg["model"])
    if path.is_dir():
        path = path / "model.json"
    if not path.exists():
        raise InvalidInputError(f"model file not found: {path}")
    model = hmm.load_model(path)
    data = _load_data(cfg["data"])
    if not data.has_states:
        raise InvalidInputError("evaluation needs state labels")
    _check_arity(model, data)
    split = model.meta.get("split", {})
    ratio = cfg["train_ratio"] if cfg["train_ratio"] is not None else split.get("train_ratio", 1.0)
    split_seed = cfg["split_seed"] if cfg["split_seed"] is not None else split.get("split_seed", 0)
    test = data
    if not cfg["all"] and float(ratio) < 1:
        _, test_idx = split_indices(data.n_sequences, float(ratio), int(split_seed))
        if len(test_idx) == 0:
            raise InvalidInputError("held-out split is empty")
        test = data.subset(test_idx)
    paths = hmm.decode(model, test)
    mapping = model.meta.get("state_mapping")
    if mapping is not None:
        paths = apply_mapping(mapping, paths)
    acc = accuracy(test.states, paths)
    say(f"accuracy: {acc:.2f}")
    if cfg["out"]:
        out = _prepare_out(cfg["out"])
        _write_json(out / "eval.json", {"accuracy_pct": round(acc, 10),
                                        "n_test_sequences": test.n_sequences,
                                        "n_test_samples": test.n_observations,
                                        "state_mapping": mapping})
        _write_manifest(out, "eval", cfg, {"split": split_seed})
    return EXIT_OK


def cmd_sweep(cfg, say):
    data = _load_data(cfg["data"])
    kinds = _parse_list(cfg["kinds"])
    ratios = _parse_list(cfg["ratios"], float)
    if not data.has_states:
        raise ConfigError("sweeps need state labels")
    if data.is_symbolic and "unsupervised-chmm" in kinds:
        raise InvalidInputError("unsupervised-chmm needs continuous observations")
    seed = int(cfg["seed"])
    split_seed = seed if cfg["split_seed"] is None else int(cfg["split_seed"])
    train_seed = seed if cfg["train_seed"] is None else int(cfg["train_seed"])
    try:
        config = SweepConfig(tuple(ratios), tuple(kinds), dict(cfg["hyperparams"] or {}),
                             split_seed, train_seed, bool(cfg["group_features"]),
                             cfg["states"], bool(cfg["timing"]))
    except InvalidInputError as err:
        raise ConfigError(str(err)) from err
    result = run_sweep(data, config)
    out = _prepare_out(cfg["out"])
    (out / "results.csv").write_text(result.to_csv(), newline="")
    (out / "results.md").write_text(result.to_markdown())
    _write_manifest(out, "sweep", cfg, {"split": split_seed, "training": train_seed})
    say(result.to_markdown().rstrip())
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "discretize": cmd_discretize, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep}


def _common(p):
    p.add_argument("--config", help="JSON config file; command-line flags take precedence")
    p.add_argument("--seed", type=int, help="random seed (unsigned)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true", default=None, help="suppress console output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmmbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic dataset from a DBN template")
    _common(p)
    p.add_argument("--case", choices=CASES, type=str.upper)
    p.add_argument("--spec", help="custom DbnSpec JSON file instead of --case")
    p.add_argument("--n", type=int, help="number of sequences")
    p.add_argument("--T", "-T", dest="T", type=int, help="sequence length")
    p.add_argument("--D", "-D", dest="D", type=int, help="observation dimension")
    p.add_argument("--ns", type=int, help="number of hidden states")
    p.add_argument("--nu", help="input cardinalities, comma separated")
    p.add_argument("--separation", type=float)
    p.add_argument("--jitter", type=float)

    p = sub.add_parser("discretize", help="quantize observations with K-means")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--mode", choices=("pooled", "per-slice", "per_slice"))
    p.add_argument("--k", type=int)
    p.add_argument("--auto", action="store_true", default=None,
                   help="select k by silhouette (elbow reported alongside)")
    p.add_argument("--k-range", dest="k_range", help="e.g. 2..8 or 2,3,4")

    p = sub.add_parser("train", help="fit an HMM")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--kind", choices=TRAIN_KINDS)
    p.add_argument("--states", type=int)
    p.add_argument("--n-mix", dest="n_mix", type=int)
    p.add_argument("--n-symbols", dest="n_symbols", type=int)
    p.add_argument("--pseudo-count", dest="pseudo_count", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--train-ratio", dest="train_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)

    p = sub.add_parser("eval", help="decode held-out sequences and report accuracy")
    _common(p)
    p.add_argument("--model", help="model.json or the directory containing it")
    p.add_argument("--data")
    p.add_argument("--train-ratio", dest="train_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--all", action="store_true", default=None,
                   help="score every sequence instead of the held-out split")

    p = sub.add_parser("sweep", help="training-ratio sweep over model kinds")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--kinds", help=f"comma separated subset of {', '.join(MODEL_KINDS)}")
    p.add_argument("--ratios", help="comma separated, strictly descending")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--train-seed", dest="train_seed", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--no-grouping", dest="group_features", action="store_false", default=None)
    p.add_argument("--timing", action="store_true", default=None,
                   help="fill the wall_ms column (makes output run-dependent)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    say = Reporter(bool(args.quiet))
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = _resolve(args.command, args)
        if cfg.get("seed") is not None and int(cfg["seed"]) < 0:
            raise ConfigError("--seed must be unsigned")
        return COMMANDS[args.command](cfg, say)
    except ConfigError as err:
        print(f"hmmbench {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalUnderflowError as err:
        print(f"hmmbench {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, FileNotFoundError, OSError) as err:
        print(f"hmmbench {args.command}: error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
