"""Command-line front end.

Subcommands: fit, detect, transfer, infer, simulate.  Options can come
from a flat key = value config file (--config); explicit flags win over
file values, which win over defaults.  All numeric output is written
with 17 significant digits so files round-trip exactly, and every
command is deterministic given the same inputs and --seed.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from transfarm.inference import full_inference
from transfarm.numerics import RngStream
from transfarm.simlab import ALL_ESTIMATORS, SimConfig, run_experiment
from transfarm.transfer import (
    Dataset,
    TransferConfig,
    detect_and_fit,
    detect_sources,
    two_step_fit,
)


class UsageError(Exception):
    """Bad flags, config keys, or input files; exits with code 1."""


# ======================================================================
# dataset ingestion / emission
# ======================================================================


def ingest_dataset(path: str, response: str = "y"):
    """Read a header CSV into (x, y, feature_names).

    The response column is removed from the design; remaining columns
    keep file order.  Precise cell coordinates are reported on parse
    failures (data rows count from 1).
    """
    if not os.path.isfile(path):
        raise UsageError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        hits = [i for i, h in enumerate(header) if h == response]
        if not hits:
            raise UsageError(f"{path}: response column {response!r} not found")
        if len(hits) > 1:
            raise UsageError(f"{path}: response column {response!r} appears twice")
        y_col = hits[0]
        feature_names = [h for i, h in enumerate(header) if i != y_col]
        if not feature_names:
            raise UsageError(f"{path}: no feature columns besides {response!r}")
        xs, ys = [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise UsageError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )
            vals = []
            for i, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise UsageError(
                        f"{path}: non-numeric value at row {row_no}, column {header[i]}"
                    ) from None
                if not math.isfinite(v):
                    raise UsageError(
                        f"{path}: non-finite value at row {row_no}, column {header[i]}"
                    )
                vals.append(v)
            ys.append(vals[y_col])
            xs.append([v for i, v in enumerate(vals) if i != y_col])
    if len(xs) < 2:
        raise UsageError(f"{path}: need at least 2 data rows, got {len(xs)}")
    return np.array(xs), np.array(ys), feature_names


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{float(v):.17g}"
    return str(v)


def _write_csv(path: str, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_dataset(path: str, x: np.ndarray, y: np.ndarray, response: str = "y",
                  feature_names: list[str] | None = None):
    """Emit a dataset as a header CSV that ingest_dataset reads back."""
    if feature_names is None:
        feature_names = [f"x{j + 1}" for j in range(x.shape[1])]
    header = [response] + feature_names
    rows = ([y[i]] + list(x[i]) for i in range(x.shape[0]))
    _write_csv(path, header, rows)


# ======================================================================
# option parsing and merging
# ======================================================================


def _c_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"invalid integer for {key}: {raw!r}") from None


def _c_float(key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise UsageError(f"invalid number for {key}: {raw!r}") from None
    if not math.isfinite(v):
        raise UsageError(f"non-finite number for {key}: {raw!r}")
    return v


def _c_bool(key, raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"invalid boolean for {key}: {raw!r}")


def _c_str(key, raw):
    return str(raw)


def _c_rank(key, raw):
    if str(raw).strip().lower() == "auto":
        return None
    v = _c_int(key, raw)
    if v < 0:
        raise UsageError(f"{key} must be 'auto' or a nonnegative integer, got {raw!r}")
    return v


def _c_mode(key, raw):
    v = str(raw).strip().lower()
    if v not in ("farm", "lasso"):
        raise UsageError(f"{key} must be 'farm' or 'lasso', got {raw!r}")
    return v


def _c_threshold(key, raw):
    v = str(raw).strip()
    if v == "2L0":
        return ("2L0", 0.0)
    if v.startswith("eps0:"):
        eps = _c_float(key, v[len("eps0:"):])
        if eps < 0:
            raise UsageError(f"{key}: eps0 must be nonnegative, got {eps}")
        return ("eps0", eps)
    raise UsageError(f"{key} must be '2L0' or 'eps0:<real>', got {raw!r}")


def _c_group(key, raw):
    v = str(raw).strip()
    if v.lower() == "all":
        return None
    try:
        idx = [int(tok) for tok in v.split(",") if tok.strip() != ""]
    except ValueError:
        raise UsageError(f"{key} must be 'all' or comma-separated indices, got {raw!r}") from None
    if not idx or any(i < 1 for i in idx):
        raise UsageError(f"{key} indices are 1-based positive integers, got {raw!r}")
    return tuple(sorted(set(i - 1 for i in idx)))


def _c_int_list(key, raw):
    try:
        return tuple(int(tok) for tok in str(raw).split(",") if tok.strip() != "")
    except ValueError:
        raise UsageError(f"invalid integer list for {key}: {raw!r}") from None


def _c_float_list(key, raw):
    try:
        return tuple(float(tok) for tok in str(raw).split(",") if tok.strip() != "")
    except ValueError:
        raise UsageError(f"invalid number list for {key}: {raw!r}") from None


def _c_str_list(key, raw):
    return tuple(tok.strip() for tok in str(raw).split(",") if tok.strip() != "")


def _c_paths(key, raw):
    if isinstance(raw, (list, tuple)):
        return list(raw)
    return [tok.strip() for tok in str(raw).split(",") if tok.strip() != ""]


_SHARED = [
    ("seed", 0, _c_int),
    ("out", ".", _c_str),
    ("threads", os.cpu_count() or 1, _c_int),
]
_DATA = [
    ("target", None, _c_str),
    ("source", [], _c_paths),
    ("response", "y", _c_str),
    ("rank", "auto", _c_rank),
    ("lambda_c", 0.5, _c_float),
    ("folds", 3, _c_int),
    ("threshold", "2L0", _c_threshold),
    ("mode", "farm", _c_mode),
]
_INFER = [
    ("alpha", 0.05, _c_float),
    ("B", 500, _c_int),
    ("group", "all", _c_group),
    ("studentized", "true", _c_bool),
]
_SIM = [
    ("sim_n0", 300, _c_int),
    ("sim_nk", 300, _c_int),
    ("sim_p", 500, _c_int),
    ("sim_s", 20, _c_int),
    ("sim_k_sources", 10, _c_int),
    ("sim_a_size", "5", _c_int_list),
    ("sim_eta", 5.0, _c_float),
    ("sim_rank", 2, _c_int),
    ("sim_signal", 0.5, _c_float),
    ("sim_gamma0", "0.5,0.5", _c_float_list),
    ("sim_gamma_jitter_informative", 0.1, _c_float),
    ("sim_gamma_jitter_adversarial", 0.5, _c_float),
    ("sim_adversarial_mult", 2.0, _c_float),
    ("sim_rho", 0.5, _c_float),
    ("sim_cov_spike", 0.3, _c_float),
    ("sim_loading_width", 1.0, _c_float),
    ("sim_replications", 30, _c_int),
    ("sim_roster", ",".join(ALL_ESTIMATORS), _c_str_list),
    ("sim_fix_rank", "false", _c_bool),
    ("sim_max_rank", None, _c_int),
    ("sim_redraw_informative", "true", _c_bool),
    ("lambda_c", 0.5, _c_float),
    ("folds", 3, _c_int),
    ("threshold", "2L0", _c_threshold),
]

_COMMAND_SPECS = {
    "fit": _SHARED + _DATA,
    "detect": _SHARED + _DATA,
    "transfer": _SHARED + _DATA,
    "infer": _SHARED + _DATA + _INFER,
    "simulate": _SHARED + _SIM,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="transfarm", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, spec in _COMMAND_SPECS.items():
        p = sub.add_parser(name)
        p.add_argument("--config")
        seen = set()
        for key, _, _ in spec:
            if key in seen:
                continue
            seen.add(key)
            flag = "--" + key.replace("_", "-") if key != "B" else "--B"
            if key == "source":
                p.add_argument(flag, action="append", default=None, dest=key)
            else:
                p.add_argument(flag, default=None, dest=key)
    return parser


def _read_config_file(path: str, allowed: set[str]) -> dict[str, str]:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}: line {line_no} is not 'key = value'")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if key not in allowed:
                raise UsageError(f"{path}: unknown config key {key!r}")
            out[key] = value.strip()
    return out


def _merge(args: argparse.Namespace, command: str) -> dict:
    spec = _COMMAND_SPECS[command]
    allowed = {key for key, _, _ in spec}
    file_values = {}
    if args.config is not None:
        file_values = _read_config_file(args.config, allowed)
    merged = {}
    for key, default, conv in spec:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            raw = flag_value
        elif key in file_values:
            raw = file_values[key]
        else:
            raw = default
        if raw is None:
            merged[key] = None
        else:
            merged[key] = conv(key, raw)
    return merged


# ======================================================================
# commands
# ======================================================================


def _load_datasets(m: dict, need_target=True):
    if need_target and not m["target"]:
        raise UsageError("--target is required")
    x, y, _ = ingest_dataset(m["target"], m["response"])
    target = Dataset(x=x, y=y, role=0)
    sources = []
    for i, path in enumerate(m["source"]):
        sx, sy, _ = ingest_dataset(path, m["response"])
        sources.append(Dataset(x=sx, y=sy, role=i + 1))
    return target, sources


def _pipeline_config(m: dict) -> TransferConfig:
    rule, eps0 = m["threshold"]
    return TransferConfig(
        lambda_c=m["lambda_c"],
        rank=m["rank"],
        mode=m["mode"],
        folds=m["folds"],
        threshold=rule,
        eps0=eps0,
        seed=m["seed"],
    )


def _outpath(m: dict, name: str) -> str:
    os.makedirs(m["out"], exist_ok=True)
    return os.path.join(m["out"], name)


def _write_fit(m: dict, fit):
    rows = (
        (j + 1, fit.pooled_coef[j], fit.correction_coef[j], fit.coef[j])
        for j in range(fit.coef.size)
    )
    _write_csv(_outpath(m, "fit.csv"), ["index", "w_hat", "delta_hat", "beta_hat"], rows)


def _write_detection(m: dict, report):
    rows = [(0, report.target_loss, 1)]
    for k in range(report.source_losses.size):
        rows.append((k + 1, report.source_losses[k], (k + 1) in report.selected))
    _write_csv(_outpath(m, "detection.csv"), ["k", "loss", "included"], rows)


def _cmd_fit(m: dict) -> int:
    # every --source file is part of the transfer set; pass none for a
    # target-only fit
    target, sources = _load_datasets(m)
    set_a = tuple(range(1, len(sources) + 1))
    fit = two_step_fit(target, sources, set_a, _pipeline_config(m))
    _write_fit(m, fit)
    return 0


def _cmd_detect(m: dict) -> int:
    target, sources = _load_datasets(m)
    report = detect_sources(target, sources, _pipeline_config(m))
    _write_detection(m, report)
    return 0


def _cmd_transfer(m: dict) -> int:
    target, sources = _load_datasets(m)
    fit, report = detect_and_fit(target, sources, _pipeline_config(m))
    _write_fit(m, fit)
    _write_detection(m, report)
    return 0


def _cmd_infer(m: dict) -> int:
    target, sources = _load_datasets(m)
    if m["alpha"] is not None and not 0.0 < m["alpha"] < 1.0:
        raise UsageError(f"alpha must lie in (0, 1), got {m['alpha']}")
    test, cis, _, _ = full_inference(
        target,
        sources,
        _pipeline_config(m),
        rng=RngStream(m["seed"]),
        group=m["group"],
        alpha=m["alpha"],
        studentized=m["studentized"],
        draws=m["B"],
    )
    rows = (
        (g + 1, cis.beta_tilde[g], cis.lower[i], cis.upper[i])
        for i, g in enumerate(cis.group)
    )
    _write_csv(_outpath(m, "intervals.csv"), ["index", "beta_tilde", "lo", "hi"], rows)
    print(
        f"reject={'true' if test.reject else 'false'}"
        f" statistic={test.statistic:.17g} critical={test.quantile:.17g}"
    )
    return 0


def _cmd_simulate(m: dict) -> int:
    rule, eps0 = m["threshold"]
    gamma0 = m["sim_gamma0"]
    if len(gamma0) != m["sim_rank"] and gamma0 == (0.5, 0.5):
        # the stock factor effect follows the configured rank
        gamma0 = (0.5,) * m["sim_rank"]
    results_rows = []
    summary_rows = []
    total_failures = 0
    for a_size in m["sim_a_size"]:
        config = SimConfig(
            n0=m["sim_n0"],
            nk=m["sim_nk"],
            p=m["sim_p"],
            s=m["sim_s"],
            k_sources=m["sim_k_sources"],
            a_size=a_size,
            eta=m["sim_eta"],
            rank=m["sim_rank"],
            signal=m["sim_signal"],
            gamma0=gamma0,
            gamma_jitter_informative=m["sim_gamma_jitter_informative"],
            gamma_jitter_adversarial=m["sim_gamma_jitter_adversarial"],
            adversarial_mult=m["sim_adversarial_mult"],
            rho=m["sim_rho"],
            cov_spike=m["sim_cov_spike"],
            loading_width=m["sim_loading_width"],
            replications=m["sim_replications"],
            base_seed=m["seed"],
            roster=m["sim_roster"],
            lambda_c=m["lambda_c"],
            folds=m["folds"],
            threshold=rule,
            eps0=eps0,
            fix_rank=m["sim_fix_rank"],
            max_rank=m["sim_max_rank"],
            redraw_informative=m["sim_redraw_informative"],
        )
        result = run_experiment(config, threads=m["threads"])
        total_failures += len(result.failures)
        for row in result.rows:
            results_rows.append(
                (row.estimator, a_size, row.replication, row.l1_error, row.l2_error, row.seconds)
            )
        for name, agg in result.aggregates().items():
            summary_rows.append(
                (
                    name,
                    a_size,
                    agg["replications"],
                    agg["l1_mean"],
                    agg["l1_stderr"],
                    agg["l2_mean"],
                    agg["l2_stderr"],
                )
            )
    _write_csv(
        _outpath(m, "results.csv"),
        ["estimator", "A_size", "replication", "l1_error", "l2_error", "seconds"],
        results_rows,
    )
    _write_csv(
        _outpath(m, "summary.csv"),
        ["estimator", "A_size", "replications", "l1_mean", "l1_stderr", "l2_mean", "l2_stderr"],
        summary_rows,
    )
    if total_failures:
        print(f"warning: {total_failures} estimator runs failed", file=sys.stderr)
    return 0


_RUNNERS = {
    "fit": _cmd_fit,
    "detect": _cmd_detect,
    "transfer": _cmd_transfer,
    "infer": _cmd_infer,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        merged = _merge(args, args.command)
        return _RUNNERS[args.command](merged)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map library failures to exit 2
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
