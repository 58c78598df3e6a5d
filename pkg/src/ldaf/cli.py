"""Command-line interface: data generation through certification.

Configuration lives in an INI-style file with a fixed schema; every key
is validated before any work happens and command-line overrides win
over file values. All randomness flows from named seeds, so rerunning a
command with identical inputs reproduces its outputs byte for byte.
Failures exit nonzero with a single machine-parsable line on stderr:
"error: <category>: <message>".
"""

import argparse
import configparser
import hashlib
import os
import sys

import numpy as np

from .flowcore import KrylovError
from .pacbayes import (
    OptimizationDivergence,
    PosteriorConfig,
    certify,
    optimize_posterior,
)
from .pipeline import (
    DataFormatError,
    ModelFormatError,
    TrainConfig,
    TrainingDiverged,
    assign_splits,
    evaluate,
    gen_synthetic,
    load_features,
    load_model,
    save_features,
    save_model,
    train_prior,
)
from .pushforward import DegenerateCovariance, moments_from_factor
from .quadrature import (
    LossKind,
    expected_risk_per_datum,
    mc_expected_risk_per_datum,
)


class CliError(Exception):
    def __init__(self, category, message, code):
        super().__init__(message)
        self.category = category
        self.code = code


def _fail(category, message, code):
    raise CliError(category, message, code)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_SCHEMA = {
    "dataset": {
        "kind": str,
        "path": str,
        "m": int,
        "dim": int,
        "c": int,
        "seed": int,
        "noise": float,
        "separation": float,
        "val_fraction": float,
        "test_fraction": float,
    },
    "model": {"n_nodes": int, "T": float},
    "prior": {
        "steps": int,
        "lr": float,
        "momentum": float,
        "weight_decay": float,
        "seed": int,
        "batch_size": int,
    },
    "posterior": {
        "alternations": int,
        "epochs": int,
        "lr": float,
        "n_points": int,
        "epsilon": float,
    },
    "certify": {"epsilon": str, "n_points": int, "padding": bool},
    "bench": {
        "point_counts": str,
        "mc_reference_points": int,
        "data_rows": int,
    },
}

_DEFAULTS = {
    "dataset": {
        "kind": "gaussian_blobs",
        "path": "",
        "m": 3000,
        "dim": 8,
        "c": 3,
        "seed": 0,
        "noise": 1.0,
        "separation": 10.0,
        "val_fraction": None,
        "test_fraction": 0.0,
    },
    "model": {"n_nodes": 10, "T": 1.0},
    "prior": {
        "steps": 200,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 0.001,
        "seed": 0,
        "batch_size": 128,
    },
    "posterior": {
        "alternations": 10,
        "epochs": 5,
        "lr": 0.1,
        "n_points": 2048,
        "epsilon": 0.05,
    },
    "certify": {"epsilon": "0.01,0.05", "n_points": 8192, "padding": False},
    "bench": {
        "point_counts": "512,1024,2048,4096,8192",
        "mc_reference_points": 10000000,
        "data_rows": 100,
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(section, key, raw):
    kind = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError("not a boolean")
        return kind(raw)
    except ValueError:
        _fail(
            "config",
            "bad value for %s.%s: %r" % (section, key, raw),
            2,
        )


def load_config(path, overrides=()):
    """Read, validate and override the run configuration.

    ``overrides`` are "section.key=value" strings (from --set flags);
    they win over file values. Unknown sections or keys are rejected
    up front.
    """
    config = {s: dict(v) for s, v in _DEFAULTS.items()}
    if path:
        if not os.path.exists(path):
            _fail("config", "config file not found: %s" % path, 2)
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case, the schema has "model.T"
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            _fail("config", "cannot parse config: %s" % exc, 2)
        for section in parser.sections():
            if section not in _SCHEMA:
                _fail("config", "unknown config section [%s]" % section, 2)
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    _fail(
                        "config",
                        "unknown config key %s.%s" % (section, key),
                        2,
                    )
                config[section][key] = _parse_value(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            _fail("config", "override must look like section.key=value", 2)
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            _fail("config", "unknown override key %s" % dotted, 2)
        config[section][key] = _parse_value(section, key, raw)
    return config


def config_hash(config):
    lines = []
    for section in sorted(config):
        for key in sorted(config[section]):
            lines.append("%s.%s=%r" % (section, key, config[section][key]))
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def _epsilon_list(config):
    out = []
    for tok in config["certify"]["epsilon"].split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            eps = float(tok)
        except ValueError:
            _fail("config", "bad epsilon value %r" % tok, 2)
        if not 0.0 < eps < 1.0:
            _fail("config", "epsilon must lie in (0, 1), got %s" % tok, 2)
        out.append(eps)
    if not out:
        _fail("config", "no epsilon values configured", 2)
    return out


def _point_count_list(config):
    out = []
    for tok in config["bench"]["point_counts"].split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            n = int(tok)
        except ValueError:
            _fail("config", "bad point count %r" % tok, 2)
        if n < 2:
            _fail("config", "point counts must be at least 2", 2)
        out.append(n)
    if not out:
        _fail("config", "no bench point counts configured", 2)
    return out


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_dataset(config, data_path):
    path = data_path or config["dataset"]["path"]
    if not path:
        _fail("config", "no data path given (flag --data or dataset.path)", 2)
    if not os.path.exists(path):
        _fail("io", "data file not found: %s" % path, 6)
    try:
        dataset = load_features(path)
    except DataFormatError as exc:
        _fail("data", str(exc), 3)
    try:
        dataset = assign_splits(
            dataset,
            val_fraction=config["dataset"]["val_fraction"],
            test_fraction=config["dataset"]["test_fraction"],
            seed=config["dataset"]["seed"],
        )
    except ValueError as exc:
        _fail("data", str(exc), 3)
    counts = {
        name: int((dataset.split == tag).sum())
        for name, tag in (("train", 0), ("val", 1), ("test", 2))
    }
    print(
        "splits: train=%d val=%d test=%d (seed %d)"
        % (
            counts["train"],
            counts["val"],
            counts["test"],
            config["dataset"]["seed"],
        )
    )
    return dataset


def _load_model_dir(path):
    if not os.path.isdir(path):
        _fail("io", "model directory not found: %s" % path, 6)
    try:
        return load_model(path)
    except ModelFormatError as exc:
        _fail("model", str(exc), 4)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _format_float(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    config = load_config(args.config, args.set or ())
    ds = config["dataset"]
    try:
        dataset = gen_synthetic(
            ds["kind"], ds["m"], ds["dim"], ds["c"], ds["seed"],
            noise=ds["noise"], separation=ds["separation"],
        )
    except ValueError as exc:
        _fail("config", str(exc), 2)
    save_features(dataset, args.out)
    print(
        "wrote %s: kind=%s m=%d dim=%d c=%d seed=%d sha=%s"
        % (
            args.out,
            ds["kind"],
            dataset.m,
            dataset.dim,
            dataset.c,
            ds["seed"],
            dataset.content_hash()[:16],
        )
    )
    return 0


def _train_config(config):
    return TrainConfig(
        n_nodes=config["model"]["n_nodes"],
        T=config["model"]["T"],
        steps=config["prior"]["steps"],
        lr=config["prior"]["lr"],
        momentum=config["prior"]["momentum"],
        weight_decay=config["prior"]["weight_decay"],
        batch_size=config["prior"]["batch_size"],
        seed=config["prior"]["seed"],
    )


def cmd_train_prior(args):
    config = load_config(args.config, args.set or ())
    dataset = _load_dataset(config, args.data)
    try:
        bundle = train_prior(dataset, _train_config(config))
    except TrainingDiverged as exc:
        _fail("compute", str(exc), 5)
    except ValueError as exc:
        _fail("config", str(exc), 2)
    bundle.metadata["config_hash"] = config_hash(config)
    bundle.metadata["data_seed"] = str(config["dataset"]["seed"])
    save_model(bundle, args.out_model)
    _write_csv(
        os.path.join(args.out_model, "train_log.csv"),
        "step,loss",
        (
            (str(i), _format_float(loss))
            for i, loss in enumerate(bundle.train_history)
        ),
    )
    first = bundle.train_history[0] if bundle.train_history else float("nan")
    last = bundle.train_history[-1] if bundle.train_history else float("nan")
    print(
        "trained prior: steps=%d loss %.6f -> %.6f, model at %s"
        % (config["prior"]["steps"], first, last, args.out_model)
    )
    return 0


def cmd_train_posterior(args):
    config = load_config(args.config, args.set or ())
    bundle = _load_model_dir(args.model)
    dataset = _load_dataset(config, args.data)
    x_val, y_val = dataset.rows("val")
    if x_val.shape[0] == 0:
        _fail("data", "validation split is empty", 3)
    pc = PosteriorConfig(
        alternations=config["posterior"]["alternations"],
        epochs=config["posterior"]["epochs"],
        lr=config["posterior"]["lr"],
        n_points=config["posterior"]["n_points"],
        epsilon=config["posterior"]["epsilon"],
        threads=args.threads,
    )
    try:
        posterior, lam, trace = optimize_posterior(
            bundle.prior, bundle, (x_val, y_val), pc
        )
    except OptimizationDivergence as exc:
        _write_trace(args.model, exc.trace)
        _fail("compute", "posterior optimization diverged: %s" % exc, 5)
    except (DegenerateCovariance, KrylovError) as exc:
        _fail("compute", str(exc), 5)
    bundle.posterior = posterior
    bundle.metadata["posterior_lambda"] = repr(float(lam))
    save_model(bundle, args.model)
    _write_trace(args.model, trace)
    print(
        "posterior trained: %d alternations, lambda=%.6f, bound %.6f -> %.6f"
        % (len(trace), lam, trace[0]["bound"], trace[-1]["bound"])
    )
    return 0


def _write_trace(model_dir, trace):
    _write_csv(
        os.path.join(model_dir, "bound_trace.csv"),
        "alternation,lambda,surrogate_risk,kl,bound",
        (
            (
                str(t["alternation"]),
                _format_float(t["lambda"]),
                _format_float(t["surrogate_risk"]),
                _format_float(t["kl"]),
                _format_float(t["bound"]),
            )
            for t in trace
        ),
    )


def cmd_certify(args):
    config = load_config(args.config, args.set or ())
    if args.epsilon:
        epsilons = []
        for eps in args.epsilon:
            if not 0.0 < eps < 1.0:
                _fail("config", "epsilon must lie in (0, 1)", 2)
            epsilons.append(eps)
    else:
        epsilons = _epsilon_list(config)
    bundle = _load_model_dir(args.model)
    dataset = _load_dataset(config, args.data)
    x_val, y_val = dataset.rows("val")
    if x_val.shape[0] == 0:
        _fail("data", "validation split is empty", 3)
    posterior = bundle.posterior if bundle.posterior is not None else bundle.prior
    out_dir = args.out_dir or args.model
    os.makedirs(out_dir, exist_ok=True)
    n_points = config["certify"]["n_points"]
    padding = config["certify"]["padding"]
    threads = args.threads

    provenance = {
        "config_hash": config_hash(config),
        "dataset_sha": dataset.content_hash()[:16],
        "data_seed": str(config["dataset"]["seed"]),
        "prior_seed": str(config["prior"]["seed"]),
        "has_posterior": str(int(bundle.posterior is not None)),
    }
    factors = bundle.marginal_factors(x_val)

    certs = []
    for eps in epsilons:
        try:
            cert = certify(
                posterior,
                bundle.prior,
                bundle,
                (x_val, y_val),
                epsilon=eps,
                n_points=n_points,
                padding=padding,
                threads=threads,
                provenance=provenance,
                factors=factors,
            )
        except (DegenerateCovariance, KrylovError) as exc:
            _fail("compute", str(exc), 5)
        recheck = cert.reverify()
        if abs(recheck - cert.bound) > 1e-12:
            _fail("compute", "certificate failed re-verification", 5)
        path = os.path.join(out_dir, "certificate-eps%s.txt" % repr(eps))
        cert.save(path)
        certs.append((eps, cert, path))

    rows = [("deterministic 01 error (val)",
             "%.6f" % evaluate(bundle, x_val, y_val, "deterministic"))]
    prior_moms = [moments_from_factor(f, bundle.prior) for f in factors]
    prior_risk = _mean_risk(prior_moms, y_val, n_points, threads)
    rows.append(("stochastic 01 risk, prior (val)", "%.6f" % prior_risk))
    if bundle.posterior is not None:
        post_moms = [moments_from_factor(f, posterior) for f in factors]
        post_risk = _mean_risk(post_moms, y_val, n_points, threads)
        rows.append(("stochastic 01 risk, posterior (val)", "%.6f" % post_risk))
    for eps, cert, path in certs:
        rows.append(
            (
                "certificate (eps=%s)" % repr(eps),
                "%.6f  [%s]" % (cert.bound, os.path.basename(path)),
            )
        )
    width = max(len(r[0]) for r in rows)
    print("-" * (width + 12))
    for name, value in rows:
        print("%-*s  %s" % (width, name, value))
    print("-" * (width + 12))
    return 0


def _mean_risk(moments, labels, n_points, threads):
    values = expected_risk_per_datum(
        moments, labels, LossKind.ZERO_ONE, n_points, threads=threads
    )
    return float(values.mean())


def cmd_evaluate(args):
    config = load_config(args.config, args.set or ())
    bundle = _load_model_dir(args.model)
    dataset = _load_dataset(config, args.data)
    x_eval, y_eval = dataset.rows(args.split)
    if x_eval.shape[0] == 0:
        _fail(
            "data",
            "%s split is empty (configure dataset.val_fraction or "
            "dataset.test_fraction)" % args.split,
            3,
        )
    modes = ["deterministic", "stochastic_mean"]
    if bundle.posterior is not None or bundle.prior is not None:
        modes.append("stochastic_expected")
    for mode in modes:
        err = evaluate(
            bundle,
            x_eval,
            y_eval,
            mode,
            n_points=config["certify"]["n_points"],
            threads=args.threads,
        )
        print("%s 01 %s (%s): %.6f" % (
            mode,
            "risk" if mode == "stochastic_expected" else "error",
            args.split,
            err,
        ))
    return 0


def cmd_bench_integration(args):
    config = load_config(args.config, args.set or ())
    bundle = _load_model_dir(args.model)
    dataset = _load_dataset(config, args.data)
    x_val, y_val = dataset.rows("val")
    if x_val.shape[0] == 0:
        _fail("data", "validation split is empty", 3)
    rows_limit = min(config["bench"]["data_rows"], x_val.shape[0])
    x_bench, y_bench = x_val[:rows_limit], y_val[:rows_limit]
    counts = _point_count_list(config)
    ref_points = config["bench"]["mc_reference_points"]
    threads = args.threads
    cov = bundle.posterior if bundle.posterior is not None else bundle.prior

    factors = bundle.marginal_factors(x_bench)
    moments = [moments_from_factor(f, cov) for f in factors]
    loss = LossKind.CROSS_ENTROPY
    reference = mc_expected_risk_per_datum(
        moments, y_bench, loss, ref_points, rng_seed=20571, threads=threads
    )

    rows = []
    qmc_wins = 0
    ties = 0
    cells = 0
    for n in counts:
        qmc = expected_risk_per_datum(
            moments, y_bench, loss, n, threads=threads
        )
        mc = mc_expected_risk_per_datum(
            moments, y_bench, loss, n, rng_seed=77003 + n, threads=threads
        )
        for i in range(rows_limit):
            err_q = abs(qmc[i] - reference[i])
            err_m = abs(mc[i] - reference[i])
            rows.append(("QMC", str(n), str(i), _format_float(err_q)))
            rows.append(("MC", str(n), str(i), _format_float(err_m)))
            qmc_wins += int(err_q < err_m)
            ties += int(err_q == err_m)
            cells += 1
    _write_csv(
        args.out,
        "method,n_points,datum_id,abs_error",
        (row for row in rows),
    )
    print(
        "bench: %d data, counts %s, QMC below MC in %d/%d cells"
        " (%d ties); %s"
        % (
            rows_limit,
            ",".join(str(n) for n in counts),
            qmc_wins,
            cells,
            ties,
            args.out,
        )
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_common(sub, config=True):
    if config:
        sub.add_argument("--config", default="", help="INI config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; wins over the file)",
    )
    sub.add_argument(
        "--threads",
        type=int,
        default=None,
        help="data-parallel width (default: LDAF_THREADS or logical cores)",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ldaf",
        description="Stochastic linearized assignment-flow classifiers "
        "with PAC-Bayes risk certificates.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic feature file")
    _add_common(p)
    p.add_argument("--out", required=True, help="output feature file")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-prior", help="train feature map and flow")
    _add_common(p)
    p.add_argument("--data", default="", help="feature file (or dataset.path)")
    p.add_argument("--out-model", required=True, help="output model directory")
    p.set_defaults(func=cmd_train_prior)

    p = subs.add_parser(
        "train-posterior", help="optimize the posterior covariance"
    )
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", default="", help="feature file (or dataset.path)")
    p.set_defaults(func=cmd_train_posterior)

    p = subs.add_parser("certify", help="emit PAC-Bayes risk certificates")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", default="", help="feature file (or dataset.path)")
    p.add_argument(
        "--epsilon",
        type=float,
        action="append",
        help="confidence level (repeatable; overrides certify.epsilon)",
    )
    p.add_argument("--out-dir", default="", help="certificate directory")
    p.set_defaults(func=cmd_certify)

    p = subs.add_parser("evaluate", help="report error rates on a split")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", default="", help="feature file (or dataset.path)")
    p.add_argument(
        "--split", default="test", choices=("train", "val", "test")
    )
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser(
        "bench-integration", help="QMC vs MC integration accuracy CSV"
    )
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", default="", help="feature file (or dataset.path)")
    p.add_argument("--out", default="bench.csv", help="output CSV path")
    p.set_defaults(func=cmd_bench_integration)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: config: --threads must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print("error: %s: %s" % (exc.category, exc), file=sys.stderr)
        return exc.code
    except OSError as exc:
        print("error: io: %s" % exc, file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
