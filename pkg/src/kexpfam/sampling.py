"""Samplers: HMC for fitted conditionals, ancestral composition over a DAG,
and the synthetic grid dataset generator.

Every chain owns a private counter-based (Philox) stream keyed by
(seed, node index, chain index), so running chains in parallel or serially
produces identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .factorization import JointModel
from .kernels import kernel_matrix
from .score_fit import FactorModel, _as_x_row, _T_terms

_INIT_RETRIES = 100
_TRIAL_CAP = 1_000_000


@dataclass(frozen=True)
class HmcConfig:
    """Leapfrog-Metropolis sampler settings.

    Defaults follow the experimental protocol this library reproduces:
    burn-in of 100 iterations, 20 chains, thinning by 10.  The mass matrix
    is the identity and no step-size adaptation is performed, which keeps
    runs reproducible.
    """

    step_size: float = 0.1
    leapfrog_steps: int = 20
    burn_in: int = 100
    thin: int = 10
    chains: int = 20
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise DataError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise DataError("leapfrog_steps must be >= 1")
        if self.burn_in < 0:
            raise DataError("burn_in must be >= 0")
        if self.thin < 1:
            raise DataError("thin must be >= 1")
        if self.chains < 1:
            raise DataError("chains must be >= 1")


@dataclass(frozen=True, eq=False)
class GridDatasetConfig:
    """Synthetic 'grid' distribution: first coordinate uniform on the
    support, each later coordinate i distributed proportionally to
    1 + sin(2*pi*wa_i * x_i) * sin(2*pi*wb_i * x_{i-1}).

    ``weights_a``/``weights_b`` hold one value per dimension (entry 0 is
    unused).  Scalars broadcast to every dimension.
    """

    dim: int
    n: int
    weights_a: np.ndarray = 1.0
    weights_b: np.ndarray = 1.0
    support: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DataError("grid dimension must be >= 1")
        if self.n < 1:
            raise DataError("sample count must be >= 1")
        lo, hi = self.support
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise DataError("support must be a finite interval (lo, hi)")
        for name in ("weights_a", "weights_b"):
            w = np.broadcast_to(
                np.asarray(getattr(self, name), dtype=np.float64), (self.dim,)
            ).copy()
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise DataError(f"{name} must be finite and nonnegative")
            w.flags.writeable = False
            object.__setattr__(self, name, w)


def _chain_rng(seed: int, node_index: int, chain_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=(int(seed), int(node_index), int(chain_index)))
    return np.random.Generator(np.random.Philox(ss))


def leapfrog(y: np.ndarray, p: np.ndarray, grad_potential,
             step_size: float, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics for one trajectory.

    ``y`` and ``p`` are (C, d) position/momentum batches and
    ``grad_potential`` maps positions to potential gradients of the same
    shape.  Returns the final (position, momentum) pair; the integrator is
    time-reversible up to roundoff when the momentum is negated.
    """
    y = np.array(y, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    p -= 0.5 * step_size * grad_potential(y)
    for step in range(n_steps):
        y += step_size * p
        g = grad_potential(y)
        p -= step_size * g if step < n_steps - 1 else 0.5 * step_size * g
    return y, p


def _make_potential(model: FactorModel, x_rows: np.ndarray):
    """Potential -log(unnormalized density) and its gradient, batched over
    chains with fixed per-chain conditioning rows."""
    kx_pair = kernel_matrix(model.kernel_x, model.x_train, x_rows)

    def potential(Y):
        value, _, _ = _T_terms(model, x_rows, Y, want_value=True, kx_pair=kx_pair)
        return -(model.base.log_pdf_rows(Y) + value)

    def grad_potential(Y):
        _, grad, _ = _T_terms(model, x_rows, Y, want_value=False, want_grad=True,
                              kx_pair=kx_pair)
        return -(model.base.grad_log(Y) + grad)

    return potential, grad_potential


def _run_chains(model: FactorModel, x_rows: np.ndarray, samples_per_chain: int,
                config: HmcConfig, node_index: int = 0):
    """Run one independent chain per row of ``x_rows``.

    Returns (samples (C, samples_per_chain, d), acceptance rate).
    """
    C = x_rows.shape[0]
    d = model.d
    rngs = [_chain_rng(config.seed, node_index, c) for c in range(C)]
    potential, grad_potential = _make_potential(model, x_rows)

    y = np.vstack([model.base.sample(rng, 1, d) for rng in rngs])
    U = potential(y)
    for _ in range(_INIT_RETRIES):
        bad = ~np.isfinite(U)
        if not np.any(bad):
            break
        for c in np.nonzero(bad)[0]:
            y[c] = model.base.sample(rngs[c], 1, d)[0]
        U = potential(y)
    else:
        raise NumericalError(
            "potential is non-finite at initialization after "
            f"{_INIT_RETRIES} resampling attempts"
        )

    total_iters = config.burn_in + config.thin * samples_per_chain
    out = np.empty((C, samples_per_chain, d))
    n_kept = 0
    accepted = 0
    for t in range(total_iters):
        p0 = np.vstack([rng.normal(size=d) for rng in rngs])
        log_u = np.log(np.array([rng.uniform() for rng in rngs]))
        h_old = U + 0.5 * np.sum(p0 * p0, axis=1)
        y_prop, p_prop = leapfrog(y, p0, grad_potential,
                                  config.step_size, config.leapfrog_steps)
        U_prop = potential(y_prop)
        h_new = U_prop + 0.5 * np.sum(p_prop * p_prop, axis=1)
        log_ratio = np.where(np.isfinite(h_new), h_old - h_new, -np.inf)
        accept = log_u < log_ratio
        y[accept] = y_prop[accept]
        U[accept] = U_prop[accept]
        accepted += int(np.sum(accept))
        if t >= config.burn_in and (t - config.burn_in + 1) % config.thin == 0:
            out[:, n_kept, :] = y
            n_kept += 1
    accept_rate = accepted / (total_iters * C) if total_iters else 1.0
    return out, accept_rate


def hmc_sample_conditional(model: FactorModel, x, n_samples: int,
                           config: HmcConfig | None = None,
                           return_stats: bool = False):
    """Draw samples from the fitted conditional p(y | x) by HMC.

    ``config.chains`` chains start from independent base-density draws, run
    ``burn_in`` iterations, and then emit every ``thin``-th state until
    ``n_samples`` total are collected (round-robin across chains).
    """
    config = config if config is not None else HmcConfig()
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    x_row = _as_x_row(x, model.p)
    C = config.chains
    per_chain = -(-n_samples // C)
    x_rows = np.repeat(x_row, C, axis=0)
    chains, accept_rate = _run_chains(model, x_rows, per_chain, config)
    samples = chains.transpose(1, 0, 2).reshape(-1, model.d)[:n_samples]
    if return_stats:
        return samples, {"accept_rate": accept_rate}
    return samples


def ancestral_sample(model: JointModel, count: int,
                     config: HmcConfig | None = None) -> np.ndarray:
    """Draw joint samples by sampling each node after its parents.

    Each output row runs its own HMC chain per node, conditioned on the
    row's already-sampled parent values.  Model math happens in
    standardized coordinates; results are mapped back to original units at
    the end.
    """
    config = config if config is not None else HmcConfig()
    if count < 1:
        raise DataError("count must be >= 1")
    D = model.dim
    out = np.empty((count, D))
    for node in range(D):
        factor = model.factors[node]
        parents = model.dag.parents[node]
        x_rows = out[:, list(parents)]
        try:
            chains, _ = _run_chains(factor, x_rows, 1, config, node_index=node)
        except NumericalError as exc:
            raise NumericalError(f"HMC failed at node {node}: {exc}") from exc
        out[:, node] = chains[:, 0, 0]
    return model.destandardize_rows(out)


def rejection_sample_grid(config: GridDatasetConfig, return_stats: bool = False):
    """Generate the synthetic grid dataset by per-dimension rejection.

    The first coordinate is uniform on the support.  Each later coordinate
    proposes uniformly and accepts with probability
    (1 + sin(2*pi*wa_i*x_i) * sin(2*pi*wb_i*x_{i-1})) / 2, which lies in
    [0, 1].  A hard cap of 1e6 trials per coordinate guards against a
    non-terminating loop.
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = config.support
    n, D = config.n, config.dim
    X = np.empty((n, D))
    X[:, 0] = rng.uniform(lo, hi, size=n)
    proposals = 0
    accepts = 0
    for i in range(1, D):
        wa = config.weights_a[i]
        wb = config.weights_b[i]
        pending = np.arange(n)
        attempts = np.zeros(n, dtype=np.int64)
        while pending.size:
            cand = rng.uniform(lo, hi, size=pending.size)
            u = rng.uniform(0.0, 1.0, size=pending.size)
            prev = X[pending, i - 1]
            p_acc = 0.5 * (1.0 + np.sin(2.0 * np.pi * wa * cand)
                           * np.sin(2.0 * np.pi * wb * prev))
            acc = u < p_acc
            X[pending[acc], i] = cand[acc]
            attempts[pending] += 1
            proposals += pending.size
            accepts += int(np.sum(acc))
            pending = pending[~acc]
            if pending.size and attempts[pending].max() >= _TRIAL_CAP:
                raise NumericalError(
                    f"rejection sampler exceeded {_TRIAL_CAP} trials for "
                    f"coordinate {i}"
                )
    if return_stats:
        rate = accepts / proposals if proposals else 1.0
        return X, {"accept_rate": rate, "proposals": proposals}
    return X
