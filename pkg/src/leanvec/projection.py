"""Learning the query-side and database-side projection matrices.

Three trainers are provided:

* ``train_id``: PCA of the database Gram matrix (same matrix for both sides).
* ``train_ood_fw``: block-coordinate Frank-Wolfe over the unit spectral-norm
  ball, alternating one conditional-gradient step on ``a`` and one on ``b``.
* ``train_ood_es``: a shared projection made of the leading eigenvectors of a
  blend of the normalized query and database Grams, with the blend weight
  picked by bounded scalar minimization.

All of them work on precomputed D x D Gram matrices, so training cost does
not depend on the number of vectors once the Grams are built.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ValidationError
from .linalg import GramPair, accumulate_gram, spectral_lmo, stiefel_retract, sym_eig

MAX_TRAIN_DATA = 100_000
MAX_TRAIN_QUERIES = 10_000


@dataclass(frozen=True)
class ProjectionPair:
    a: np.ndarray  # query side, d x D
    b: np.ndarray  # database side, d x D
    orthonormal: bool = True

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ValidationError(f"projection matrices must share a d x D shape, got {a.shape} and {b.shape}")
        d, big_d = a.shape
        if not 1 <= d <= big_d:
            raise ValidationError(f"need 1 <= d <= D, got d={d}, D={big_d}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def D(self) -> int:  # noqa: N802
        return self.a.shape[1]

    @property
    def shared(self) -> bool:
        return self.a is self.b or np.array_equal(self.a, self.b)

    def project_queries(self, q) -> np.ndarray:
        return np.asarray(q, dtype=np.float64) @ self.a.T

    def project_data(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.b.T

    @classmethod
    def identity(cls, dim: int) -> "ProjectionPair":
        eye = np.eye(dim)
        return cls(eye, eye, True)


@dataclass(frozen=True)
class FwConfig:
    alpha: float = 0.75
    max_iters: int = 500
    rel_tol: float = 1e-3
    retract_output: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"step exponent alpha must lie in (0, 1), got {self.alpha}")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValidationError("rel_tol must be positive")


@dataclass
class ConvergenceReport:
    """Per-iteration trace of a Frank-Wolfe run.

    ``losses[0]`` is the loss at the starting point and ``losses[t + 1]`` the
    loss after iteration ``t``; gaps and step sizes have one entry per
    iteration.
    """

    losses: list[float] = field(default_factory=list)
    gaps_a: list[float] = field(default_factory=list)
    gaps_b: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    iterations_run: int = 0
    termination: str = "max_iters"
    loss_before_retraction: float | None = None
    loss_after_retraction: float | None = None

    @property
    def retraction_penalty(self) -> float | None:
        if self.loss_before_retraction is None or self.loss_after_retraction is None:
            return None
        base = abs(self.loss_before_retraction)
        if base == 0.0:
            return 0.0 if self.loss_after_retraction == 0.0 else math.inf
        return (self.loss_after_retraction - self.loss_before_retraction) / base

    def to_dict(self) -> dict:
        out = asdict(self)
        out["retraction_penalty"] = self.retraction_penalty
        return out


def stride_sample(x: np.ndarray, limit: int) -> np.ndarray:
    """Every k-th row so that at most ``limit`` rows remain (no RNG)."""
    n = x.shape[0]
    if n <= limit:
        return x
    stride = -(-n // limit)
    return x[::stride]


def normalize_queries(q: np.ndarray) -> np.ndarray:
    """Rescale each query to squared norm ``1/m``; zero queries stay zero."""
    q = np.asarray(q, dtype=np.float64)
    m = q.shape[0]
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    scale = np.divide(1.0 / math.sqrt(m), norms, out=np.zeros_like(norms), where=norms > 0)
    return q * scale


def build_grams(
    queries,
    data,
    normalize: bool = True,
    max_queries: int = MAX_TRAIN_QUERIES,
    max_data: int = MAX_TRAIN_DATA,
    workers: int = 1,
) -> GramPair:
    """Query and database Grams from (strided subsamples of) the raw vectors."""
    q = stride_sample(np.asarray(queries), max_queries)
    x = stride_sample(np.asarray(data), max_data)
    if q.ndim != 2 or x.ndim != 2 or q.shape[1] != x.shape[1]:
        raise ValidationError("queries and data must be matrices with the same number of columns")
    dim = x.shape[1]
    if q.shape[0] < dim or x.shape[0] < dim:
        raise ValidationError(
            f"need at least D={dim} query and database vectors for training, "
            f"got m={q.shape[0]}, n={x.shape[0]}"
        )
    if normalize:
        q = normalize_queries(q)
    return GramPair(
        k_q=accumulate_gram(q, workers=workers),
        k_x=accumulate_gram(x, workers=workers),
        m=q.shape[0],
        n=x.shape[0],
    )


def _check_psd(k: np.ndarray, name: str):
    vals = sym_eig(k).values
    if vals[-1] < -1e-7 * max(vals[0], 0.0) - 1e-300:
        raise ValidationError(f"{name} is not positive semidefinite (smallest eigenvalue {vals[-1]:.3e})")
    return vals


def _leading_rows(k: np.ndarray, d: int) -> np.ndarray:
    return sym_eig(k).vectors[:, :d].T.copy()


def _check_target_dim(d: int, big_d: int):
    if not 1 <= d < big_d:
        raise ValidationError(f"target dimension must satisfy 1 <= d < D, got d={d}, D={big_d}")


def train_id(k_x, d: int) -> ProjectionPair:
    """PCA projection: the ``d`` leading eigenvectors of ``k_x`` as rows."""
    k_x = np.asarray(k_x, dtype=np.float64)
    _check_target_dim(d, k_x.shape[0])
    m = _leading_rows(k_x, d)
    return ProjectionPair(m, m, True)


def reconstruction_loss(pair: ProjectionPair, k_x) -> float:
    """``||X - b^T b X||_F^2`` from the Gram; assumes orthonormal rows."""
    k_x = np.asarray(k_x, dtype=np.float64)
    return float(np.trace(k_x) - np.sum((pair.b @ k_x) * pair.b))


def _check_shapes(pair: ProjectionPair, grams: GramPair):
    if grams.k_q.shape != grams.k_x.shape or grams.k_x.shape != (pair.D, pair.D):
        raise ValidationError(
            f"shape mismatch: projection is {pair.a.shape}, Grams are {grams.k_q.shape} and {grams.k_x.shape}"
        )


def _loss(a, b, k_q, k_x) -> float:
    akq = a @ k_q
    bkx = b @ k_x
    first = np.sum((akq @ a.T) * (bkx @ b.T).T)
    const = np.sum(k_q * k_x)
    cross = np.sum(bkx * akq)
    return float(first + const - 2.0 * cross)


def ood_loss(pair: ProjectionPair, grams: GramPair) -> float:
    """``tr(A Kq A^T B Kx B^T + Kq Kx - 2 Kq A^T B Kx)``.

    Equal to ``||Q^T A^T B X - Q^T X||_F^2`` for the vectors behind the Grams.
    """
    _check_shapes(pair, grams)
    return _loss(pair.a, pair.b, grams.k_q, grams.k_x)


def _grad_a(a, b, k_q, k_x):
    bkx = b @ k_x
    return 2.0 * (bkx @ b.T) @ (a @ k_q) - 2.0 * bkx @ k_q


def _grad_b(a, b, k_q, k_x):
    akq = a @ k_q
    return 2.0 * (akq @ a.T) @ (b @ k_x) - 2.0 * akq @ k_x


def ood_gradients(pair: ProjectionPair, grams: GramPair) -> tuple[np.ndarray, np.ndarray]:
    _check_shapes(pair, grams)
    return _grad_a(pair.a, pair.b, grams.k_q, grams.k_x), _grad_b(pair.a, pair.b, grams.k_q, grams.k_x)


def _gap(grad: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    s = spectral_lmo(-grad)
    return float(np.sum(-grad * (s - z))), s


def fw_gap(pair: ProjectionPair, grams: GramPair) -> tuple[float, float]:
    """Frank-Wolfe gaps of both blocks, evaluated at the same point."""
    grad_a, grad_b = ood_gradients(pair, grams)
    return _gap(grad_a, pair.a)[0], _gap(grad_b, pair.b)[0]


def train_ood_fw(
    grams: GramPair,
    d: int,
    cfg: FwConfig | None = None,
    init: ProjectionPair | None = None,
) -> tuple[ProjectionPair, ConvergenceReport]:
    """Alternating Frank-Wolfe on the hull-relaxed loss.

    Starts from ``a = b = 0`` unless ``init`` is given. Each iteration takes
    one conditional-gradient step on ``a`` (gradient at the current ``b``),
    then one on ``b`` (gradient at the new ``a``), both with step
    ``1 / (t + 1) ** alpha``. Stops when the relative loss change drops to
    ``rel_tol`` or after ``max_iters`` iterations.
    """
    cfg = cfg or FwConfig()
    k_q = np.asarray(grams.k_q, dtype=np.float64)
    k_x = np.asarray(grams.k_x, dtype=np.float64)
    big_d = k_x.shape[0]
    _check_target_dim(d, big_d)
    _check_psd(k_q, "k_q")
    _check_psd(k_x, "k_x")

    if init is None:
        a = np.zeros((d, big_d))
        b = np.zeros((d, big_d))
    else:
        if init.a.shape != (d, big_d):
            raise ValidationError(f"initial projection has shape {init.a.shape}, expected {(d, big_d)}")
        a, b = init.a.copy(), init.b.copy()

    report = ConvergenceReport()
    loss = _loss(a, b, k_q, k_x)
    report.losses.append(loss)
    for t in range(cfg.max_iters):
        gamma = 1.0 / (t + 1) ** cfg.alpha
        gap_a, s_a = _gap(_grad_a(a, b, k_q, k_x), a)
        a = (1.0 - gamma) * a + gamma * s_a
        gap_b, s_b = _gap(_grad_b(a, b, k_q, k_x), b)
        b = (1.0 - gamma) * b + gamma * s_b

        new_loss = _loss(a, b, k_q, k_x)
        report.gaps_a.append(gap_a)
        report.gaps_b.append(gap_b)
        report.step_sizes.append(gamma)
        report.losses.append(new_loss)
        report.iterations_run = t + 1
        done = loss == 0.0 or abs(new_loss - loss) / abs(loss) <= cfg.rel_tol
        loss = new_loss
        if done:
            report.termination = "tolerance"
            break

    if cfg.retract_output:
        report.loss_before_retraction = loss
        a, b = stiefel_retract(a), stiefel_retract(b)
        report.loss_after_retraction = _loss(a, b, k_q, k_x)
        return ProjectionPair(a, b, True), report
    return ProjectionPair(a, b, False), report


def es_projection(grams: GramPair, d: int, beta: float) -> np.ndarray:
    """Rows = ``d`` leading eigenvectors of ``(1-beta)/m Kq + beta/n Kx``."""
    if beta == 1.0:
        return _leading_rows(grams.k_x, d)
    if beta == 0.0:
        return _leading_rows(grams.k_q, d)
    k_q, k_x = grams.normalized()
    return _leading_rows((1.0 - beta) * k_q + beta * k_x, d)


def es_loss(grams: GramPair, d: int, beta: float) -> float:
    """Loss on the sample-normalized Grams for the shared projection at ``beta``."""
    k_q, k_x = grams.normalized()
    p = es_projection(grams, d, beta)
    return _loss(p, p, k_q, k_x)


def train_ood_es(
    grams: GramPair,
    d: int,
    xtol: float = 1e-3,
    trace: list | None = None,
) -> tuple[ProjectionPair, float]:
    """Eigenvector search over the blend weight ``beta`` in [0, 1].

    Bounded Brent minimization plus explicit evaluation at 0, 0.5 and 1; the
    best evaluated point wins and ties go to the earliest of 1, 0, 0.5.
    ``trace``, if given, receives every ``(beta, loss)`` pair evaluated.
    """
    if grams.m <= 0 or grams.n <= 0:
        raise ValidationError(f"sample counts must be positive (m={grams.m}, n={grams.n})")
    _check_target_dim(d, grams.dim)
    cache: dict[float, float] = {}

    def objective(beta):
        beta = float(min(max(beta, 0.0), 1.0))
        if beta not in cache:
            cache[beta] = es_loss(grams, d, beta)
            if trace is not None:
                trace.append((beta, cache[beta]))
        return cache[beta]

    for beta in (1.0, 0.0, 0.5):
        objective(beta)
    minimize_scalar(objective, bounds=(0.0, 1.0), method="bounded", options={"xatol": xtol})
    best = min(cache, key=lambda k: cache[k])  # dict order breaks ties
    p = es_projection(grams, d, best)
    return ProjectionPair(p, p, True), best


MODES = ("id", "ood-fw", "ood-es")


@dataclass
class TrainingResult:
    pair: ProjectionPair
    mode: str
    loss: float  # on the normalized Grams
    pca_loss: float  # same loss for the PCA projection, as a reference
    convergence: ConvergenceReport | None = None
    beta: float | None = None
    beta_trace: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {
            "mode": self.mode,
            "d": self.pair.d,
            "D": self.pair.D,
            "loss": self.loss,
            "pca_loss": self.pca_loss,
            "orthonormal": self.pair.orthonormal,
            "shared": self.pair.shared,
        }
        if self.convergence is not None:
            out["convergence"] = self.convergence.to_dict()
        if self.beta is not None:
            out["beta"] = self.beta
            out["beta_trace"] = [list(p) for p in sorted(self.beta_trace)]
        return out


def fit_projection(mode: str, data, d: int, queries=None, workers: int = 1,
                   fw_config: FwConfig | None = None) -> TrainingResult:
    """Train a projection of the given kind from raw vectors."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "id":
        x = stride_sample(np.asarray(data), MAX_TRAIN_DATA)
        k_x = accumulate_gram(x, workers=workers)
        # ID loss is evaluated with the database standing in for the queries
        grams = GramPair(k_q=accumulate_gram(normalize_queries(x), workers=workers), k_x=k_x, m=x.shape[0], n=x.shape[0])
    else:
        if queries is None:
            raise ValidationError(f"mode {mode} needs a training query set")
        grams = build_grams(queries, data, workers=workers)
    norm = GramPair(*grams.normalized(), 1, 1)
    pca = train_id(grams.k_x, d)
    pca_loss = ood_loss(pca, norm)
    if mode == "id":
        return TrainingResult(pca, mode, pca_loss, pca_loss)
    if mode == "ood-fw":
        pair, report = train_ood_fw(grams, d, fw_config)
        return TrainingResult(pair, mode, ood_loss(pair, norm), pca_loss, convergence=report)
    trace: list = []
    pair, beta = train_ood_es(grams, d, trace=trace)
    return TrainingResult(pair, mode, ood_loss(pair, norm), pca_loss, beta=beta, beta_trace=trace)
