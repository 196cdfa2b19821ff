"""Structure-recovery benchmark: graph generators, competing transformations
and ROC/AUC scoring.

A benchmark run draws a graph (hub, scale-free or random), builds a signed
precision matrix on its support, samples counts, applies each competing
transformation, fits a regularization path and scores edge recovery against
the true support.  Replicates are independent and seeded from the master
seed, so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy.stats import boxcox_llf

from .errors import InvalidInputError, NumericalFailureError
from .glasso import (
    DEFAULT_PATH_LENGTH,
    DEFAULT_PATH_RATIO,
    CovarianceInput,
    RegularizationPath,
    fit_path,
    lambda_grid,
)
from .model import CountMatrix, InitialEstimate, PlnParams, moment_init, sample_pln
from .transform import DEFAULT_LARGE_COUNT_THRESHOLD, DEFAULT_REL_TOL, transform_matrix

METHODS = ("ORIG", "LOG", "BOX", "ONESTEP", "MODSTEP")
GRAPH_KINDS = ("hub", "scale_free", "random")

#: Minimum eigenvalue targeted when a generated precision needs inflating.
MIN_EIGENVALUE = 0.1

BOXCOX_SEARCH_INTERVAL = (-2.0, 2.0)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class GraphStructure:
    """Undirected simple graph on ``p`` nodes, edges as ordered index pairs."""

    p: int
    edges: frozenset
    kind: str

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS:
            raise InvalidInputError(f"kind must be one of {GRAPH_KINDS}")
        edges = set()
        for i, k in self.edges:
            if i == k:
                raise InvalidInputError("self-loops are not allowed")
            if not (0 <= i < self.p and 0 <= k < self.p):
                raise InvalidInputError("edge index out of range")
            edges.add((min(i, k), max(i, k)))
        self.edges = frozenset(edges)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.p, dtype=int)
        for i, k in self.edges:
            deg[i] += 1
            deg[k] += 1
        return deg


@dataclass
class BenchConfig:
    """Settings for one benchmark study on a single network kind."""

    n: int = 150
    p: int = 50
    kind: str = "hub"
    n_hubs: int = 3
    n_edges: int = 204
    diag: float = 1.0
    edge_weight: float = 0.25
    methods: tuple = METHODS
    replicates: int = 100
    path_length: int = DEFAULT_PATH_LENGTH
    path_ratio: float = DEFAULT_PATH_RATIO
    seed: int = 0
    fixed_graph: bool = False
    beta_low: float = 0.0
    beta_high: float = 2.0
    large_count_threshold: int = DEFAULT_LARGE_COUNT_THRESHOLD
    rel_tol: float = DEFAULT_REL_TOL

    def __post_init__(self):
        if self.replicates < 1:
            raise InvalidInputError("replicates must be at least 1")
        if not self.methods:
            raise InvalidInputError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidInputError(f"unknown methods: {bad}")
        if self.kind not in GRAPH_KINDS:
            raise InvalidInputError(f"kind must be one of {GRAPH_KINDS}")


@dataclass
class MethodRoc:
    """One ROC curve: per-lambda rates ordered by decreasing penalty."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class ReplicateOutcome:
    replicate: int
    edge_count: int
    inflation: float
    rocs: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)


@dataclass
class BenchResult:
    """Per-replicate curves plus aggregate AUC summaries for one network."""

    config: BenchConfig
    outcomes: list
    mean_auc: dict
    sd_auc: dict
    mean_curve: dict
    failure_counts: dict


@dataclass
class PrecisionBuild:
    """A precision matrix built on a graph, with any diagonal inflation."""

    omega: np.ndarray
    inflation: float


# ---------------------------------------------------------------------------
# graph generators
# ---------------------------------------------------------------------------


def gen_hub(p: int, n_hubs: int, seed: int) -> GraphStructure:
    """Attach every non-hub node to one of the first ``n_hubs`` nodes,
    chosen uniformly at random."""
    if not (1 <= n_hubs < p):
        raise InvalidInputError("need 1 <= n_hubs < p")
    rng = np.random.default_rng(seed)
    assignment = rng.integers(0, n_hubs, size=p - n_hubs)
    edges = {(int(assignment[idx]), node) for idx, node in enumerate(range(n_hubs, p))}
    return GraphStructure(p=p, edges=frozenset(edges), kind="hub")


def gen_scale_free(p: int, seed: int) -> GraphStructure:
    """Preferential-attachment graph adding one edge per new node."""
    if p < 2:
        raise InvalidInputError("scale-free graph needs p >= 2")
    g = nx.barabasi_albert_graph(p, 1, seed=int(seed))
    return GraphStructure(p=p, edges=frozenset(g.edges()), kind="scale_free")


def gen_random(p: int, n_edges: int, seed: int) -> GraphStructure:
    """Uniform draw among graphs with exactly ``n_edges`` edges."""
    max_edges = p * (p - 1) // 2
    if not (0 <= n_edges <= max_edges):
        raise InvalidInputError(f"n_edges must lie in [0, {max_edges}]")
    g = nx.gnm_random_graph(p, n_edges, seed=int(seed))
    return GraphStructure(p=p, edges=frozenset(g.edges()), kind="random")


def graph_to_precision(
    g: GraphStructure, diag: float, edge_weight: float, seed: int
) -> PrecisionBuild:
    """Signed precision matrix on the graph support.

    Edges get ``edge_weight`` with independent random signs; if the result is
    not positive-definite the whole diagonal is inflated until the minimum
    eigenvalue reaches :data:`MIN_EIGENVALUE`, and the inflation amount is
    reported.
    """
    if diag <= 0:
        raise InvalidInputError("diag must be positive")
    rng = np.random.default_rng(seed)
    omega = np.eye(g.p) * diag
    for i, k in sorted(g.edges):
        w = edge_weight * (1.0 if rng.random() < 0.5 else -1.0)
        omega[i, k] = w
        omega[k, i] = w
    eigmin = float(np.linalg.eigvalsh(omega).min())
    inflation = 0.0
    if eigmin < MIN_EIGENVALUE:
        inflation = MIN_EIGENVALUE - eigmin
        omega[np.diag_indices_from(omega)] += inflation
    return PrecisionBuild(omega=omega, inflation=inflation)


# ---------------------------------------------------------------------------
# competing transformations
# ---------------------------------------------------------------------------


def _golden_max(f, a: float, b: float, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Golden-section maximization of a unimodal scalar function on [a, b]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def boxcox_lambda(x: np.ndarray) -> float:
    """Power-transform parameter maximizing the profile log-likelihood."""
    x = np.asarray(x, dtype=float)

    def llf(lmb):
        val = boxcox_llf(lmb, x)
        return float(val) if np.isfinite(val) else -np.inf

    lo, hi = BOXCOX_SEARCH_INTERVAL
    if not np.isfinite(llf(0.0)):
        raise NumericalFailureError("profile log-likelihood is degenerate")
    return _golden_max(llf, lo, hi)


def _boxcox_apply(x: np.ndarray, lmb: float) -> np.ndarray:
    if lmb == 0.0:
        return np.log(x)
    return (np.power(x, lmb) - 1.0) / lmb


def boxcox_transform(data: CountMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-variable power transform of ``counts + 1``.

    Returns the transformed matrix, the selected per-variable parameters and
    a flag vector marking columns where the profile-likelihood search failed
    and the log transform was used instead.
    """
    shifted = data.values.astype(float) + 1.0
    p = data.p
    out = np.empty_like(shifted)
    lambdas = np.empty(p)
    fallback = np.zeros(p, dtype=bool)
    for i in range(p):
        try:
            lambdas[i] = boxcox_lambda(shifted[:, i])
        except NumericalFailureError:
            lambdas[i] = 0.0
            fallback[i] = True
        out[:, i] = _boxcox_apply(shifted[:, i], lambdas[i])
    return out, lambdas, fallback


def apply_method(
    data: CountMatrix,
    method: str,
    truth: PlnParams | None = None,
    large_count_threshold: int = DEFAULT_LARGE_COUNT_THRESHOLD,
    rel_tol: float = DEFAULT_REL_TOL,
) -> np.ndarray:
    """Produce the real-valued matrix a competing method feeds to the fitter.

    ORIG passes the counts through, LOG uses ``log(y + 1)``, BOX the
    per-variable power transform, ONESTEP the posterior-mean transform with
    the moment start, and MODSTEP the same transform started from the true
    latent means and variances (``truth`` required).
    """
    if method == "ORIG":
        return data.values.astype(float)
    if method == "LOG":
        return np.log(data.values.astype(float) + 1.0)
    if method == "BOX":
        out, _, _ = boxcox_transform(data)
        return out
    if method == "ONESTEP":
        est = moment_init(data)
        return transform_matrix(data, est, large_count_threshold, rel_tol).values
    if method == "MODSTEP":
        if truth is None:
            raise InvalidInputError("MODSTEP needs the generating parameters")
        est = InitialEstimate(
            beta0=truth.beta,
            sigma0_diag=np.diag(truth.covariance()),
            origin="external",
        )
        return transform_matrix(data, est, large_count_threshold, rel_tol).values
    raise InvalidInputError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def score_roc(path: RegularizationPath, truth: GraphStructure) -> MethodRoc:
    """True/false positive rates of each path support against the true edges,
    with the area under the sorted curve completed through (0,0) and (1,1)."""
    if truth.n_edges == 0:
        raise InvalidInputError("ROC scoring needs a non-empty true edge set")
    total_pairs = truth.p * (truth.p - 1) // 2
    negatives = total_pairs - truth.n_edges
    fprs, tprs = [], []
    for est in path.estimates:
        if est is None:
            continue
        if est.p != truth.p:
            raise InvalidInputError("path and truth disagree on the node count")
        found = est.support
        tp = len(found & truth.edges)
        fp = len(found - truth.edges)
        tprs.append(tp / truth.n_edges)
        fprs.append(fp / negatives if negatives > 0 else 0.0)
    fpr = np.asarray(fprs)
    tpr = np.asarray(tprs)
    order = np.lexsort((tpr, fpr))
    fx = np.concatenate([[0.0], fpr[order], [1.0]])
    fy = np.concatenate([[0.0], tpr[order], [1.0]])
    auc = float(np.trapezoid(fy, fx))
    return MethodRoc(fpr=fpr, tpr=tpr, auc=auc)


# ---------------------------------------------------------------------------
# benchmark driver
# ---------------------------------------------------------------------------


def _generate_graph(config: BenchConfig, seed: int) -> GraphStructure:
    if config.kind == "hub":
        return gen_hub(config.p, config.n_hubs, seed)
    if config.kind == "scale_free":
        return gen_scale_free(config.p, seed)
    return gen_random(config.p, config.n_edges, seed)


def _replicate_seeds(master_seed: int, replicate: int) -> list[int]:
    ss = np.random.SeedSequence([int(master_seed), int(replicate)])
    return [int(s) for s in ss.generate_state(4)]


def run_benchmark(config: BenchConfig) -> BenchResult:
    """Run the full study for one network kind.

    Per replicate: draw the graph (or reuse the replicate-0 graph when
    ``fixed_graph``), build the precision, draw latent means uniformly on
    ``[beta_low, beta_high]``, sample counts, and score every requested
    method along its own penalty path.  Method failures are recorded and
    excluded from the aggregates.
    """
    outcomes: list[ReplicateOutcome] = []
    fixed = None
    if config.fixed_graph:
        fixed = _generate_graph(config, _replicate_seeds(config.seed, 0)[0])
    for r in range(config.replicates):
        graph_seed, sign_seed, beta_seed, sample_seed = _replicate_seeds(config.seed, r)
        graph = fixed if fixed is not None else _generate_graph(config, graph_seed)
        build = graph_to_precision(graph, config.diag, config.edge_weight, sign_seed)
        beta = np.random.default_rng(beta_seed).uniform(
            config.beta_low, config.beta_high, size=config.p
        )
        params = PlnParams(beta=beta, precision=build.omega)
        data = sample_pln(params, config.n, sample_seed)
        outcome = ReplicateOutcome(
            replicate=r, edge_count=graph.n_edges, inflation=build.inflation
        )
        for method in config.methods:
            try:
                mat = apply_method(
                    data,
                    method,
                    truth=params,
                    large_count_threshold=config.large_count_threshold,
                    rel_tol=config.rel_tol,
                )
                s = np.cov(mat, rowvar=False, bias=True)
                cov = CovarianceInput(s=s, n=config.n)
                grid = lambda_grid(cov, config.path_length, config.path_ratio)
                path = fit_path(cov, grid.values)
                outcome.rocs[method] = score_roc(path, graph)
            except (InvalidInputError, NumericalFailureError) as exc:
                outcome.errors[method] = str(exc)
        outcomes.append(outcome)

    mean_auc, sd_auc, mean_curve, failures = {}, {}, {}, {}
    for method in config.methods:
        aucs = [o.rocs[method].auc for o in outcomes if method in o.rocs]
        failures[method] = sum(1 for o in outcomes if method in o.errors)
        if aucs:
            mean_auc[method] = float(np.mean(aucs))
            sd_auc[method] = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
        curves = [
            o.rocs[method]
            for o in outcomes
            if method in o.rocs and o.rocs[method].fpr.size == config.path_length
        ]
        if curves:
            mean_curve[method] = (
                np.mean([c.fpr for c in curves], axis=0),
                np.mean([c.tpr for c in curves], axis=0),
            )
    return BenchResult(
        config=config,
        outcomes=outcomes,
        mean_auc=mean_auc,
        sd_auc=sd_auc,
        mean_curve=mean_curve,
        failure_counts=failures,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_roc_csv(result: BenchResult, path) -> None:
    """Tidy per-replicate ROC table for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("replicate,network,method,lambda_index,fpr,tpr\n")
        for outcome in result.outcomes:
            for method in result.config.methods:
                roc = outcome.rocs.get(method)
                if roc is None:
                    continue
                for idx in range(roc.fpr.size):
                    fh.write(
                        f"{outcome.replicate},{result.config.kind},{method},{idx},"
                        f"{format(roc.fpr[idx], '.17g')},{format(roc.tpr[idx], '.17g')}\n"
                    )


def write_summary_csv(results, path) -> None:
    """Mean/SD AUC per network and method."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("network,method,mean_auc,sd_auc\n")
        for result in results:
            for method in result.config.methods:
                if method not in result.mean_auc:
                    continue
                fh.write(
                    f"{result.config.kind},{method},"
                    f"{format(result.mean_auc[method], '.17g')},"
                    f"{format(result.sd_auc[method], '.17g')}\n"
                )
