"""
Command-line front end: ``bbfit {simulate,ingest,fit,evaluate} CONFIG``.

Every subcommand reads a JSON run configuration, applies command-line
overrides, validates the result against the bundled JSON schema and only
then starts working. Each run writes ``manifest_<command>.json`` next to
its outputs with the effective configuration, its SHA-256 hash, package
versions and all derived seeds.

Exit codes: 0 success, 1 engine or numeric failure, 2 I/O or configuration
failure. The output directory can be overridden with ``--output`` or the
``BBFIT_OUTPUT_DIR`` environment variable (in that order of precedence).
"""

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from importlib import resources

import numpy as np
import scipy
from jsonschema import Draft202012Validator

from . import __version__
from .datastore import ColumnStore, ecdf_standardize, ingest_csv, make_batches
from .engine import FitOptions, ModelSpec, build_model, fit, fit_two_stage
from .evaluate import evaluate
from .exceptions import BBFitError, ConfigError, StoreError
from .families import get_family
from .simgen import ScenarioConfig, appendix_scenario, candidate_formula, simulate

OUTPUT_ENV = "BBFIT_OUTPUT_DIR"
EXIT_OK, EXIT_ENGINE, EXIT_IO = 0, 1, 2
SEED_STREAMS = ("simulate", "batches_boost", "batches_final", "engine", "evaluate")

DEFAULTS = {
    "batches": {"T": 200, "size": 1000, "sampling": "with-replacement"},
    "engine": {"policy": "two-stage", "nu": 0.1, "criterion": "AIC", "eps_loglik": None,
               "slice": False, "burn_in": None},
    "simulate": {"scenario": "grid", "distribution": "NO", "n": 1000, "nnoise": 0, "rho": 0.0,
                 "n_validation": 0},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_schema():
    """The published run-configuration JSON schema."""
    text = resources.files("bbfit").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _pointer(path):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate_config(config):
    """Raise :class:`ConfigError` located by JSON pointer if ``config`` is invalid."""
    validator = Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, pointer=_pointer(err.absolute_path))
    return config


def load_config(path):
    """Read a JSON configuration file; I/O and syntax problems raise ConfigError."""
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a JSON object")
    return config


def apply_overrides(config, args):
    """Copy of ``config`` with command-line flags written into their sections."""
    config = copy.deepcopy(config)
    engine = {"nu": "nu", "policy": "policy", "criterion": "criterion"}
    batches = {"batch_size": "size", "iters": "T"}
    for flag, key in engine.items():
        value = getattr(args, flag, None)
        if value is not None:
            config.setdefault("engine", {})[key] = value
    for flag, key in batches.items():
        value = getattr(args, flag, None)
        if value is not None:
            config.setdefault("batches", {})[key] = value
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    return config


def config_hash(config):
    """SHA-256 of the canonical JSON form of ``config``."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seeds(config):
    """Seeds of every random stream, all derived from the top-level seed.

    An explicit ``batches.seed`` replaces the derived batch seeds.
    """
    master = config.get("seed")
    master = 0 if master is None else int(master)
    children = np.random.SeedSequence(master).spawn(len(SEED_STREAMS))
    seeds = {"master": master}
    for name, child in zip(SEED_STREAMS, children):
        seeds[name] = int(child.generate_state(1)[0])
    batch_seed = config.get("batches", {}).get("seed")
    if batch_seed is not None:
        a, b = np.random.SeedSequence(int(batch_seed)).spawn(2)
        seeds["batches_boost"] = int(a.generate_state(1)[0])
        seeds["batches_final"] = int(b.generate_state(1)[0])
    return seeds


class _Run:
    """Resolved configuration of one CLI invocation."""

    def __init__(self, command, config, config_path, output_flag=None):
        self.command = command
        self.config = config
        self.base = os.path.dirname(os.path.abspath(config_path))
        out = output_flag or os.environ.get(OUTPUT_ENV)
        if out:
            self.output = os.path.abspath(out)
        else:
            self.output = self.path(config.get("output", "bbfit-output"))
        self.seeds = derive_seeds(config)
        self.outputs = []

    def path(self, p):
        """Config-relative path resolution."""
        return p if os.path.isabs(p) else os.path.join(self.base, p)

    def out(self, name):
        os.makedirs(self.output, exist_ok=True)
        path = os.path.join(self.output, name)
        self.outputs.append(name)
        return path

    def section(self, name, defaults_key=None):
        merged = dict(DEFAULTS.get(defaults_key or name, {}))
        merged.update(self.config.get(name, {}) if name != "simulate"
                      else self.config.get("data", {}).get("simulate", {}))
        return merged

    def write_manifest(self):
        manifest = {
            "command": self.command,
            "config": self.config,
            "config_sha256": config_hash(self.config),
            "seeds": self.seeds,
            "versions": {
                "bbfit": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": sorted(set(self.outputs)),
        }
        path = os.path.join(self.output, f"manifest_{self.command}.json")
        os.makedirs(self.output, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(run):
    """Write train/validation stores and the true model of a scenario."""
    sim = run.section("simulate")
    seed = run.seeds["simulate"]
    if sim["scenario"] == "appendix":
        train, val, truth = appendix_scenario(sim["n"], seed=seed, n_validation=sim["n_validation"])
    else:
        cfg = ScenarioConfig(sim["distribution"], n=sim["n"], nnoise=sim["nnoise"], rho=sim["rho"],
                             seed=seed, n_validation=sim["n_validation"])
        train, val, truth = simulate(cfg)
    train.save(run.out("train.bbfc"))
    if val is not None:
        val.save(run.out("validation.bbfc"))
    _write_json(run.out("truth.json"), truth.to_dict())
    print(f"simulated n={train.n_rows} columns={len(train.names)} ({', '.join(train.names)}) "
          f"seed={seed}")
    return EXIT_OK


def cmd_ingest(run):
    """Convert CSV input into column stores, optionally ECDF-standardized."""
    data = run.config.get("data", {})
    if "csv" not in data:
        raise ConfigError("ingest needs a CSV file", pointer="/data/csv")
    columns = data.get("columns")
    standardize = data.get("standardize") or []
    if not standardize:
        train = ingest_csv(run.path(data["csv"]), run.out("train.bbfc"), columns=columns)
        val = None
        if "validation_csv" in data:
            val = ingest_csv(run.path(data["validation_csv"]), run.out("validation.bbfc"),
                             columns=columns)
    else:
        raw = ingest_csv(run.path(data["csv"]), columns=columns)
        missing = [c for c in standardize if c not in raw.names]
        if missing:
            raise ConfigError(f"unknown column(s) {missing}", pointer="/data/standardize")
        train, tables = ecdf_standardize(raw, standardize)
        train.save(run.out("train.bbfc"))
        _write_json(run.out("ecdf.json"), {c: t.to_dict() for c, t in tables.items()})
        val = None
        if "validation_csv" in data:
            vraw = ingest_csv(run.path(data["validation_csv"]), columns=columns)
            val = vraw.with_columns({c: tables[c](vraw.column(c)) for c in standardize})
            val.save(run.out("validation.bbfc"))
    msg = f"ingested n={train.n_rows} columns={len(train.names)}"
    if val is not None:
        msg += f"; validation n={val.n_rows}"
    print(msg)
    return EXIT_OK


def _open_store(run, key, default_name):
    data = run.config.get("data", {})
    path = run.path(data[key]) if key in data else os.path.join(run.output, default_name)
    return ColumnStore.open(path)


def _default_terms(store, response, family):
    covs = [c for c in store.names if c != response and not c.startswith("true_")]
    return candidate_formula(covs, params=get_family(family).param_names)


def _options(engine, policy, seed):
    return FitOptions(nu=engine["nu"], policy=policy, criterion=engine["criterion"],
                      eps_loglik=engine["eps_loglik"], slice=engine["slice"],
                      burn_in=engine["burn_in"], seed=seed)


def _write_paths(run, prefix, result):
    labels = result.labels
    coef_cols = [f"{lab}[{j}]" for (_, t), lab in zip(result.model.blocks, labels)
                 for j in range(t.n_coef)]
    tau_cols = [f"{lab}[{j}]" for (_, t), lab in zip(result.model.blocks, labels)
                for j in range(t.n_tau)]
    it = np.arange(1, len(result.beta_paths) + 1)
    _write_table(run.out(f"{prefix}beta_paths.csv"), ["iteration"] + coef_cols,
                 ([i] + list(r) for i, r in zip(it, result.beta_paths)))
    _write_table(run.out(f"{prefix}tau_paths.csv"), ["iteration"] + tau_cols,
                 ([i] + list(r) for i, r in zip(it, result.tau_paths)))
    _write_table(run.out(f"{prefix}contributions.csv"), ["iteration"] + labels,
                 ([i] + list(r) for i, r in zip(it, result.contrib)))
    _write_table(run.out(f"{prefix}criterion.csv"), ["iteration", "criterion", "loglik"],
                 zip(it, result.criterion_path, result.loglik_path))


def _write_selection(run, result):
    _write_table(run.out("selection.csv"), ["term", "frequency", "selected"],
                 ((lab, float(f), int(s)) for lab, f, s in
                  zip(result.labels, result.selection_freq, result.selected)))


def cmd_fit(run):
    """Fit the configured model; two-stage by default (boost, then resample)."""
    store = _open_store(run, "train", "train.bbfc")
    data = run.config.get("data", {})
    response = data.get("response", "y")
    model_cfg = run.config.get("model", {})
    family = model_cfg.get("family", "NO")
    terms = model_cfg.get("terms") or _default_terms(store, response, family)
    if response not in store.names:
        raise ConfigError(f"response column {response!r} not in store", pointer="/data/response")
    try:
        model = build_model(family, terms, store, response=response)
    except KeyError as exc:
        raise ConfigError(f"unknown parameter or column {exc}", pointer="/model/terms") from exc
    batches = run.section("batches")
    engine = run.section("engine")
    size = min(batches["size"], store.n_rows)
    plan1 = make_batches(store.n_rows, batches["T"], size, batches["sampling"],
                         run.seeds["batches_boost"])
    seed = run.seeds["engine"]
    policy = engine["policy"]

    if policy == "two-stage":
        plan2 = make_batches(store.n_rows, batches["T"], size, batches["sampling"],
                             run.seeds["batches_final"])
        res = fit_two_stage(model, store, plan1, plan2, _options(engine, "boost", seed),
                            _options(engine, "resample", seed))
        _write_selection(run, res.boost)
        _write_paths(run, "boost_", res.boost)
        final, kept = res.resample, list(res.kept)
    else:
        final = fit(model, store, plan1, _options(engine, policy, seed))
        _write_selection(run, final)
        kept = final.selected_labels()
    _write_paths(run, "", final)
    _write_json(run.out("model.json"), {
        "policy": policy,
        "model": final.model.to_dict(),
        "labels": final.labels,
        "beta": final.beta_final.tolist(),
        "tau": final.tau_final.tolist(),
        "edf": final.edf_final.tolist(),
        "selected": kept,
    })
    rows = [(lab, j, float(v)) for lab, b in zip(final.labels, final.model.split(final.beta_final))
            for j, v in enumerate(b)]
    _write_table(run.out("coefficients.csv"), ["term", "index", "value"], rows)
    print(f"fitted {family} with policy={policy}: {len(final.labels)} terms "
          f"({', '.join(final.labels)})")
    return EXIT_OK


def _load_fit(run):
    path = os.path.join(run.output, "model.json")
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise StoreError(f"no fit output found at {path}; run 'bbfit fit' first") from exc
    return ModelSpec.from_dict(d["model"]), np.asarray(d["beta"], dtype=float)


def cmd_evaluate(run):
    """Score the fitted model on validation data and export diagnostics."""
    model, beta = _load_fit(run)
    store = _open_store(run, "validation", "validation.bbfc")
    needed = set(model.covariates) | {model.response}
    missing = sorted(needed - set(store.names))
    if missing:
        raise StoreError(f"validation store lacks column(s) {missing} required by the model")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = evaluate(model, beta, store, seed=run.seeds["evaluate"])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    report.to_json(run.out("report.json"))
    _write_table(run.out("worm.csv"), ["z", "deviation"],
                 zip(report.worm["z"], report.worm["deviation"]))
    edges = report.pit["edges"]
    _write_table(run.out("pit.csv"), ["lower", "upper", "count"],
                 zip(edges[:-1], edges[1:], report.pit["counts"]))
    # per-term cumulative log-likelihood gains; the boosting stage of a
    # two-stage fit is the informative one
    contrib_path = os.path.join(run.output, "boost_contributions.csv")
    if not os.path.exists(contrib_path):
        contrib_path = os.path.join(run.output, "contributions.csv")
    if os.path.exists(contrib_path):
        header, rows = _read_table(contrib_path)
        values = np.cumsum(np.asarray([[float(v) for v in r[1:]] for r in rows]).reshape(
            len(rows), len(header) - 1), axis=0)
        _write_table(run.out("contribution_paths.csv"), header,
                     ([r[0]] + list(v) for r, v in zip(rows, values)))
    print(f"evaluated n={report.n} crps={report.crps:.6g}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "fit": cmd_fit,
            "evaluate": cmd_evaluate}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="bbfit", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bbfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV} and config)")
        p.add_argument("--seed", type=int, help="top-level seed")
        if name == "fit":
            p.add_argument("--nu", type=float)
            p.add_argument("--policy", choices=["plain", "boost", "resample", "two-stage"])
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--iters", type=int, help="number of batches T")
            p.add_argument("--criterion", choices=["AIC", "BIC", "loglik"])
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    """Run the CLI and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        config = validate_config(apply_overrides(load_config(args.config), args))
        run = _Run(args.command, config, args.config, args.output)
        code = COMMANDS[args.command](run)
        run.write_manifest()
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StoreError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BBFitError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
