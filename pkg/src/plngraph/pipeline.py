"""End-to-end fitting pipeline: ingestion, preprocessing, initialization,
transformation, path fitting, model selection and reporting.

Every stage writes its artifact to the output directory so a run can be
inspected or resumed; data artifacts are byte-stable given the same input,
configuration and seed (the manifest additionally records wall-clock
timings, which are not).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchConfig, run_benchmark, write_roc_csv, write_summary_csv
from .errors import ConfigError, InvalidInputError
from .glasso import (
    DEFAULT_PATH_LENGTH,
    DEFAULT_PATH_RATIO,
    CovarianceInput,
    ebic_select,
    fit_path,
    lambda_grid,
    write_edges_tsv,
    write_fit_summary,
)
from .model import (
    CountMatrix,
    InitialEstimate,
    eb_gamma,
    fit_trend,
    mirna_shrink_init,
    moment_init,
    with_gamma,
)
from .transform import DEFAULT_LARGE_COUNT_THRESHOLD, DEFAULT_REL_TOL, transform_matrix

ORIENTATIONS = ("samples", "variables")
INITIALIZERS = ("moment", "mirna")


@dataclass
class PipelineConfig:
    """Everything one fit run needs; JSON-serializable."""

    input_path: str
    output_dir: str
    orientation: str = "samples"
    min_variance_quantile: float = 0.75
    depth_adjust: bool = True
    initializer: str = "moment"
    gamma: float = 0.5
    empirical_bayes: bool = False
    eb_reps: int = 200
    large_count_threshold: int = DEFAULT_LARGE_COUNT_THRESHOLD
    rel_tol: float = DEFAULT_REL_TOL
    path_length: int = DEFAULT_PATH_LENGTH
    path_ratio: float = DEFAULT_PATH_RATIO
    ebic_gamma: float = 0.5
    top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"orientation must be one of {ORIENTATIONS}")
        if self.initializer not in INITIALIZERS:
            raise ConfigError(f"initializer must be one of {INITIALIZERS}")
        if not (0.0 <= self.min_variance_quantile < 1.0):
            raise ConfigError("min_variance_quantile must lie in [0, 1)")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie strictly inside (0, 1)")
        if not (0.0 <= self.ebic_gamma <= 1.0):
            raise ConfigError("ebic_gamma must lie in [0, 1]")

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class PreprocessResult:
    """Filtered (and optionally depth-adjusted) counts plus bookkeeping."""

    data: CountMatrix
    size_factors: np.ndarray | None
    pre_round: np.ndarray | None
    dropped: tuple
    flags: tuple


@dataclass
class NetworkReport:
    """Edges, degrees and the most connected variables of a fitted network."""

    edges: list
    degrees: dict
    top: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        deg = {name: 0 for name in self.degrees}
        for a, b, _ in self.edges:
            deg[a] += 1
            deg[b] += 1
        if deg != dict(self.degrees):
            raise InvalidInputError("degrees are inconsistent with the edge list")
        expect = sorted(self.degrees.items(), key=lambda kv: (-kv[1], kv[0]))
        k = len(self.top)
        if [tuple(t) for t in self.top] != [tuple(t) for t in expect[:k]]:
            raise InvalidInputError("top list must be sorted by degree then name")

    def to_dict(self) -> dict:
        return {
            "edges": [[a, b, w] for a, b, w in self.edges],
            "degrees": dict(self.degrees),
            "top": [[name, deg] for name, deg in self.top],
            "metadata": self.metadata,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _parse_count(cell: str, row_label: str, col_label: str) -> int:
    text = cell.strip()
    try:
        value = int(text)
    except ValueError:
        try:
            as_float = float(text)
        except ValueError as exc:
            raise InvalidInputError(
                f"cell (row {row_label!r}, column {col_label!r}) is not a number: {text!r}"
            ) from exc
        if not as_float.is_integer():
            raise InvalidInputError(
                f"cell (row {row_label!r}, column {col_label!r}) is not an integer: {text!r}"
            )
        value = int(as_float)
    if value < 0:
        raise InvalidInputError(
            f"cell (row {row_label!r}, column {col_label!r}) is negative: {text!r}"
        )
    return value


def ingest(path, orientation: str = "samples") -> CountMatrix:
    """Read a delimited count matrix with a header row and an id column.

    The delimiter (comma or tab) is auto-detected from the header line.  With
    ``orientation='variables'`` the file stores variables as rows and is
    transposed after parsing.  Malformed cells are rejected with their
    coordinates.
    """
    if orientation not in ORIENTATIONS:
        raise InvalidInputError(f"orientation must be one of {ORIENTATIONS}")
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"input file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.strip():
            raise InvalidInputError("input file is empty")
        delim = "\t" if first.count("\t") >= first.count(",") else ","
        fh.seek(0)
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader)
        col_names = [c.strip() for c in header[1:]]
        if not col_names:
            raise InvalidInputError("header contains no variable names")
        row_names: list[str] = []
        rows: list[list[int]] = []
        for lineno, record in enumerate(reader, start=2):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != len(header):
                raise InvalidInputError(
                    f"line {lineno} has {len(record)} fields, expected {len(header)}"
                )
            label = record[0].strip()
            row_names.append(label)
            rows.append(
                [_parse_count(c, label, col_names[j]) for j, c in enumerate(record[1:])]
            )
    if not rows:
        raise InvalidInputError("input file contains no data rows")
    values = np.asarray(rows, dtype=np.int64)
    if orientation == "variables":
        values = values.T
        row_names, col_names = col_names, row_names
    if len(set(col_names)) != len(col_names):
        raise InvalidInputError("duplicate variable names in input")
    if len(set(row_names)) != len(row_names):
        raise InvalidInputError("duplicate sample ids in input")
    return CountMatrix(values=values, variable_names=tuple(col_names), sample_ids=tuple(row_names))


def write_counts_csv(data: CountMatrix, path) -> None:
    """Inverse of :func:`ingest` for the samples-as-rows orientation."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(data.variable_names) + "\n")
        for j in range(data.n):
            fh.write(data.sample_ids[j] + "," + ",".join(str(int(v)) for v in data.values[j]) + "\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess(
    data: CountMatrix,
    min_variance_quantile: float = 0.75,
    depth_adjust: bool = True,
) -> PreprocessResult:
    """Drop low-variance variables and adjust for sequencing depth.

    Variables whose variance falls below the requested quantile of all
    variable variances are removed.  Depth adjustment divides each sample by
    its size factor (median of ratios to the per-variable geometric mean,
    over variables observed in every sample) and rounds back to integers so
    the count model still applies; the unrounded values are retained.  When
    no variable is positive in every sample, total-count scaling is used and
    flagged.
    """
    if data.n < 2:
        raise InvalidInputError("preprocessing needs at least two samples")
    flags: list[str] = []
    variances = data.values.astype(float).var(axis=0)
    threshold = float(np.quantile(variances, min_variance_quantile))
    keep = variances >= threshold
    dropped = tuple(
        name for name, k in zip(data.variable_names, keep) if not k
    )
    if not np.any(keep):
        raise InvalidInputError("preprocessing dropped every variable")
    values = data.values[:, keep]
    names = tuple(n for n, k in zip(data.variable_names, keep) if k)

    size_factors = None
    pre_round = None
    if depth_adjust:
        vals = values.astype(float)
        all_positive = np.all(values > 0, axis=0)
        if np.any(all_positive):
            ref = np.exp(np.log(vals[:, all_positive]).mean(axis=0))
            ratios = vals[:, all_positive] / ref
            size_factors = np.median(ratios, axis=1)
        else:
            totals = vals.sum(axis=1)
            if np.any(totals <= 0):
                raise InvalidInputError("cannot depth-adjust samples with zero totals")
            size_factors = totals / np.exp(np.log(totals).mean())
            flags.append("size_factors_total_count_fallback")
        if np.any(size_factors <= 0):
            raise InvalidInputError("degenerate size factors; check the input counts")
        pre_round = vals / size_factors[:, None]
        values = np.rint(pre_round).astype(np.int64)

    out = CountMatrix(values=values, variable_names=names, sample_ids=data.sample_ids)
    return PreprocessResult(
        data=out,
        size_factors=size_factors,
        pre_round=pre_round,
        dropped=dropped,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# full fit
# ---------------------------------------------------------------------------


def _write_matrix_csv(values, variable_names, sample_ids, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(variable_names) + "\n")
        for j in range(values.shape[0]):
            fh.write(sample_ids[j] + "," + ",".join(format(x, ".17g") for x in values[j]) + "\n")


def read_matrix_csv(path) -> tuple[np.ndarray, tuple, tuple]:
    """Read back a real-valued matrix written by the pipeline stages."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(h.strip() for h in header[1:])
        ids, rows = [], []
        for record in reader:
            if not record:
                continue
            ids.append(record[0])
            rows.append([float(c) for c in record[1:]])
    return np.asarray(rows, dtype=float), names, tuple(ids)


def _build_initial(data: CountMatrix, config: PipelineConfig):
    extra: dict = {}
    if config.initializer == "moment":
        return moment_init(data), extra
    trend = fit_trend(data)
    if config.empirical_bayes:
        gammas = eb_gamma(data, trend, config.eb_reps, config.seed)
        trend = with_gamma(trend, gammas.gamma)
        extra["eb_sigma_r2"] = gammas.sigma_r2
        extra["eb_flagged"] = int(np.sum(gammas.flagged))
        return mirna_shrink_init(data, trend), extra
    return mirna_shrink_init(data, trend, config.gamma), extra


def run_fit(config: PipelineConfig) -> NetworkReport:
    """Execute ingest -> preprocess -> initialize -> transform -> fit ->
    select, writing every intermediate artifact into the output directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    flags: list[str] = []

    def timed(stage, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            raise type(exc)(f"[stage {stage}] {exc}") from exc
        timings[stage] = time.perf_counter() - t0
        return result

    data = timed("ingest", ingest, config.input_path, config.orientation)
    pre = timed(
        "preprocess", preprocess, data, config.min_variance_quantile, config.depth_adjust
    )
    flags.extend(pre.flags)
    clean = pre.data
    write_counts_csv(clean, out / "counts_preprocessed.csv")

    estimate, init_extra = timed("initialize", _build_initial, clean, config)
    with open(out / "initial_estimate.json", "w", encoding="utf-8") as fh:
        json.dump(estimate.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    tm = timed(
        "transform",
        transform_matrix,
        clean,
        estimate,
        config.large_count_threshold,
        config.rel_tol,
    )
    tm.to_csv(out / "transformed.csv", clean.variable_names, clean.sample_ids)
    tm.write_sidecar(out / "transformed.json")

    s = tm.covariance()
    _write_matrix_csv(s, clean.variable_names, clean.variable_names, out / "covariance.csv")
    cov = CovarianceInput(s=s, n=clean.n)
    grid = timed("lambda_grid", lambda_grid, cov, config.path_length, config.path_ratio)
    if grid.degenerate:
        flags.append("degenerate_lambda_grid")
    path = timed("fit_path", fit_path, cov, grid.values)
    best_lambda, best = timed(
        "ebic_select", ebic_select, path, config.ebic_gamma, clean.n, clean.p
    )
    write_edges_tsv(best, clean.variable_names, out / "edges.tsv")
    idx = int(np.where(path.lambdas == best_lambda)[0][0])
    write_fit_summary(best, out / "fit_summary.json", ebic=float(path.ebic_scores[idx]))

    report = build_report(
        best.omega,
        best.support,
        clean.variable_names,
        top_k=config.top_k,
        metadata={
            "config_hash": config.config_hash(),
            "selected_lambda": float(best_lambda),
            "flags": flags,
            "dropped_variables": len(pre.dropped),
            "timings": {k: round(v, 6) for k, v in timings.items()},
            **init_extra,
        },
    )
    report.write_json(out / "report.json")

    manifest = {
        "config": asdict(config),
        "config_hash": config.config_hash(),
        "version": __version__,
        "n_samples": clean.n,
        "n_variables": clean.p,
        "dropped_variables": list(pre.dropped),
        "size_factors": None
        if pre.size_factors is None
        else [float(x) for x in pre.size_factors],
        "flags": flags,
        "selected_lambda": float(best_lambda),
        "edges": best.n_edges,
        "timings": {k: round(v, 6) for k, v in timings.items()},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def build_report(
    omega: np.ndarray,
    support,
    variable_names,
    top_k: int = 10,
    metadata: dict | None = None,
) -> NetworkReport:
    """Assemble the degree/edge report for a fitted precision support."""
    names = list(variable_names)
    edges = sorted(
        ((names[i], names[k], float(omega[i, k])) for i, k in support),
        key=lambda r: (-abs(r[2]), r[0], r[1]),
    )
    degrees = {name: 0 for name in names}
    for a, b, _ in edges:
        degrees[a] += 1
        degrees[b] += 1
    ranked = sorted(degrees.items(), key=lambda kv: (-kv[1], kv[0]))
    return NetworkReport(
        edges=edges,
        degrees=degrees,
        top=ranked[: max(0, int(top_k))],
        metadata=metadata or {},
    )


def report_from_edges_tsv(path, top_k: int = 10) -> NetworkReport:
    """Rebuild a report from a stored edge list."""
    edges = []
    names = set()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("var_i"):
            raise InvalidInputError("not an edge list file")
        for line in fh:
            a, b, w = line.rstrip("\n").split("\t")
            edges.append((a, b, float(w)))
            names.update((a, b))
    degrees = {name: 0 for name in sorted(names)}
    for a, b, _ in edges:
        degrees[a] += 1
        degrees[b] += 1
    ranked = sorted(degrees.items(), key=lambda kv: (-kv[1], kv[0]))
    edges = sorted(edges, key=lambda r: (-abs(r[2]), r[0], r[1]))
    return NetworkReport(edges=edges, degrees=degrees, top=ranked[: max(0, int(top_k))])


# ---------------------------------------------------------------------------
# benchmark entry
# ---------------------------------------------------------------------------


def run_bench(config: BenchConfig, output_dir) -> None:
    """Run one benchmark study and write its ROC and summary tables."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_benchmark(config)
    write_roc_csv(result, out / "roc.csv")
    write_summary_csv([result], out / "summary.csv")
    if any(result.failure_counts.values()):
        warnings.warn(
            f"benchmark replicate failures: {result.failure_counts}", RuntimeWarning
        )
