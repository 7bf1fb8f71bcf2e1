"""DAG factorization of a joint density into per-node conditional factors.

A joint density over D columns is written as a product of conditionals
p(col_i | parents(col_i)) following a DAG whose parents always precede the
node in column order.  Each factor is fit independently by the score-matched
estimator; the first node of a chain (no parents) uses a constant
conditioning kernel, which reduces it to an unconditional fit.

Variable ordering is the dataset column order throughout; no order search is
performed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, KexpfamError
from .kernels import ConstantKernel, GaussianKernelSpec, median_heuristic
from .score_fit import BaseDensity, FactorModel, fit_factor, unnorm_logpdf

DAG_KINDS = ("full", "markov", "custom")


@dataclass(frozen=True)
class DagSpec:
    """Parent lists over ``node_count`` nodes, one tuple per node.

    Parents are 0-based column indices and must be strictly smaller than the
    node's own index, so the column order is a topological order.
    """

    node_count: int
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.node_count < 1:
            raise DataError("a DAG needs at least one node")
        parents = tuple(tuple(int(p) for p in ps) for ps in self.parents)
        if len(parents) != self.node_count:
            raise DataError(
                f"expected {self.node_count} parent lists, got {len(parents)}"
            )
        for i, ps in enumerate(parents):
            if len(set(ps)) != len(ps):
                raise DataError(f"node {i} has duplicate parents {ps}")
            for p in ps:
                if p < 0 or p >= i:
                    raise DataError(
                        f"node {i} lists parent {p}; parents must be earlier nodes"
                    )
        object.__setattr__(self, "parents", parents)


def make_dag(kind: str, node_count: int,
             custom_parents=None) -> DagSpec:
    """Build a DAG specification.

    ``full`` gives every node all earlier nodes as parents, ``markov`` only
    the immediately preceding one, and ``custom`` takes explicit 0-based
    parent lists (one sequence per node).
    """
    if kind not in DAG_KINDS:
        raise DataError(f"unknown DAG kind {kind!r}; expected one of {DAG_KINDS}")
    if node_count < 1:
        raise DataError("a DAG needs at least one node")
    if kind == "full":
        parents = tuple(tuple(range(i)) for i in range(node_count))
    elif kind == "markov":
        parents = tuple(() if i == 0 else (i - 1,) for i in range(node_count))
    else:
        if custom_parents is None:
            raise DataError("custom DAG requires explicit parent lists")
        parents = tuple(tuple(sorted(int(p) for p in ps)) for ps in custom_parents)
    return DagSpec(node_count=node_count, parents=parents)


@dataclass(frozen=True, eq=False)
class NodeHyperparams:
    """Per-node fit settings.

    Bandwidths default to the median heuristic of the node's own training
    columns, optionally rescaled; explicit bandwidth vectors override the
    heuristic entirely.
    """

    lam: float = 0.01
    x_bandwidths: np.ndarray | None = None
    y_bandwidths: np.ndarray | None = None
    x_scale: float = 1.0
    y_scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise DataError("lambda must be positive and finite")
        if self.x_scale <= 0 or self.y_scale <= 0:
            raise DataError("bandwidth scales must be positive")


@dataclass(frozen=True, eq=False)
class JointModel:
    """Fitted factors in column order plus the standardization applied to
    the training data (per-column mean and std, std > 0)."""

    dag: DagSpec
    factors: tuple[FactorModel, ...]
    column_means: np.ndarray
    column_stds: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.factors) != self.dag.node_count:
            raise DataError("factor count must equal the DAG node count")
        means = np.asarray(self.column_means, dtype=np.float64).reshape(-1)
        stds = np.asarray(self.column_stds, dtype=np.float64).reshape(-1)
        if means.size != self.dag.node_count or stds.size != self.dag.node_count:
            raise DataError("standardization stats must have one entry per node")
        if np.any(stds <= 0) or not np.all(np.isfinite(stds)):
            raise DataError("standardization stds must be positive and finite")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != self.dag.node_count:
            raise DataError("need one column name per node")
        means = means.copy()
        stds = stds.copy()
        means.flags.writeable = False
        stds.flags.writeable = False
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "column_means", means)
        object.__setattr__(self, "column_stds", stds)
        object.__setattr__(self, "column_names", names)

    @property
    def dim(self) -> int:
        return self.dag.node_count

    def standardize_rows(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.dim:
            raise DataError(
                f"rows have {rows.shape[1]} columns, model expects {self.dim}"
            )
        return (rows - self.column_means) / self.column_stds

    def destandardize_rows(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        return rows * self.column_stds + self.column_means

    @property
    def log_jacobian(self) -> float:
        """Log-density shift from standardized to original units."""
        return -float(np.sum(np.log(self.column_stds)))


def _node_kernels(values: np.ndarray, parents: tuple[int, ...], node: int,
                  hp: NodeHyperparams):
    y_cols = values[:, [node]]
    if hp.y_bandwidths is not None:
        ky = GaussianKernelSpec(np.asarray(hp.y_bandwidths, dtype=np.float64))
    else:
        ky = GaussianKernelSpec(hp.y_scale * median_heuristic(y_cols))
    if not parents:
        return ConstantKernel(1.0), ky
    x_cols = values[:, list(parents)]
    if hp.x_bandwidths is not None:
        kx = GaussianKernelSpec(np.asarray(hp.x_bandwidths, dtype=np.float64))
    else:
        kx = GaussianKernelSpec(hp.x_scale * median_heuristic(x_cols))
    return kx, ky


def fit_joint(dataset, dag: DagSpec, hyper=None,
              base: BaseDensity | None = None) -> JointModel:
    """Fit one conditional factor per DAG node by the chain rule.

    ``dataset`` is either a StandardizedDataset or a plain (n, D) array that
    is assumed to be standardized already (stats then default to mean 0,
    std 1).  ``hyper`` is a single NodeHyperparams applied to every node or a
    sequence with one entry per node.  Factors are independent: refitting one
    node never touches the others.
    """
    if hasattr(dataset, "values"):
        values = np.asarray(dataset.values, dtype=np.float64)
        means = np.asarray(dataset.column_means, dtype=np.float64)
        stds = np.asarray(dataset.column_stds, dtype=np.float64)
        names = tuple(dataset.column_names)
    else:
        values = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
        means = np.zeros(values.shape[1])
        stds = np.ones(values.shape[1])
        names = tuple(f"x{i}" for i in range(values.shape[1]))
    if values.shape[1] != dag.node_count:
        raise DataError(
            f"dataset has {values.shape[1]} columns but the DAG has "
            f"{dag.node_count} nodes"
        )
    base = base if base is not None else BaseDensity()
    if hyper is None:
        hyper = NodeHyperparams()
    if isinstance(hyper, NodeHyperparams):
        hyper = [hyper] * dag.node_count
    if len(hyper) != dag.node_count:
        raise DataError("need one hyperparameter set per node")

    factors = []
    for node in range(dag.node_count):
        parents = dag.parents[node]
        hp = hyper[node]
        try:
            kx, ky = _node_kernels(values, parents, node, hp)
            x = values[:, list(parents)]
            y = values[:, [node]]
            factors.append(fit_factor(x, y, kx, ky, hp.lam, base))
        except KexpfamError as exc:
            raise type(exc)(f"fit failed at node {node}: {exc}") from exc
    return JointModel(
        dag=dag, factors=tuple(factors), column_means=means,
        column_stds=stds, column_names=names,
    )


def joint_unnorm_logpdf_terms(model: JointModel, row) -> np.ndarray:
    """Per-node unnormalized conditional log-densities at one standardized row.

    Term i is the unnormalized log-density of factor i at (parent values,
    own value).  Summing the terms and subtracting each factor's log
    normalizer gives the standardized-scale joint log-density; the evaluation
    module adds the Jacobian shift for original units.
    """
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.size != model.dim:
        raise DataError(f"row has dimension {row.size}, model expects {model.dim}")
    terms = np.empty(model.dim)
    for node in range(model.dim):
        parents = model.dag.parents[node]
        x = row[list(parents)]
        terms[node] = unnorm_logpdf(model.factors[node], x, row[[node]])
    return terms
