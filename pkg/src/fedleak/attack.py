"""Label-count recovery from a transmitted model update.

Pipeline: estimate per-class logit moments on an auxiliary set, turn them
into an erroneous-confidence matrix by Monte Carlo, recombine the update's
output-bias delta into a scheme-normalized target, solve a least-squares
problem on the probability simplex, and round to integer counts. For
multi-epoch updates a posterior search refines the crude solution by
simulating how the confidences drift over the local epochs.

Everything here sees only what a curious server would: the global model,
the transmitted update, past transmissions, the training recipe, and an
auxiliary dataset. Ground-truth label counts never enter.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._kernels import mean_softmax, pgd_simplex_ls
from .data import Dataset, largest_remainder
from .fedsim import LocalUpdate, SchemeConfig, UpdateHistory
from .nn import Model, forward_batch

METHOD_SINGLE = "single_epoch"
METHOD_CRUDE = "crude_multi_epoch"
METHOD_SEARCH = "posterior_search"
METHODS = (METHOD_SINGLE, METHOD_CRUDE, METHOD_SEARCH)

_JITTER_SCALE = 1e-6
_JITTER_CAP = 1e-2


class DegenerateUpdateError(RuntimeError):
    """The update carries no usable signal (zero delta, eta = 0, ...)."""


@dataclass
class LogitMoments:
    """Per-class mean and covariance of the output logits."""

    mu: np.ndarray  # (N, N): row n = mean logit vector for true class n
    sigma: np.ndarray  # (N, N, N): sigma[n] = covariance for true class n


@dataclass
class ConfusionMatrix:
    """Erroneous confidences: s[n, j] = E[softmax_j | true class n], j != n.

    The diagonal is stored as zero and never read.
    """

    s: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.s.shape[0]


@dataclass
class SchemeCoefficients:
    """Per-epoch weights rho and additive history offset h for one round.

    h is None for schemes whose offset is identically zero.
    """

    rho: np.ndarray  # (m,)
    h: np.ndarray = None  # (N,) or None


@dataclass
class AttackParams:
    mc_samples: int = 10000
    search_iters: int = 5
    search_mc_samples: int = 1000
    tol: float = 1e-10
    max_iters: int = 10000
    eps_adj: float = 0.01
    rel_threshold: float = 0.1
    include_bias_factor: bool = False
    seed: int = 0


@dataclass
class AttackReport:
    z_star: np.ndarray
    counts: np.ndarray
    residual: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Serialize with a stable key order so reports diff cleanly."""
        payload = {
            "method": self.method,
            "counts": [int(c) for c in self.counts],
            "z_star": [float(z) for z in self.z_star],
            "residual": float(self.residual),
            "diagnostics": {k: self.diagnostics[k] for k in sorted(self.diagnostics)},
        }
        return json.dumps(payload, indent=2)


def save_report(path, report: AttackReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Symmetric factor L with L L^T ~= sigma, jitter-escalating on failure."""
    sym = 0.5 * (sigma + sigma.T)
    diag_scale = float(np.mean(np.diag(sym)))
    scale = diag_scale if diag_scale > 0 else 1.0
    extra = 0.0
    while True:
        try:
            w, v = np.linalg.eigh(sym + extra * np.eye(sym.shape[0]))
        except np.linalg.LinAlgError:
            extra = _JITTER_SCALE * scale if extra == 0.0 else extra * 10.0
            if extra > _JITTER_CAP * scale:
                raise RuntimeError("covariance factorization failed at maximum jitter")
            continue
        return v * np.sqrt(np.clip(w, 0.0, None))


def estimate_moments(model: Model, aux: Dataset, jitter_scale: float = _JITTER_SCALE) -> LogitMoments:
    """Empirical logit moments per true class over the auxiliary set.

    Covariances use denominator max(count - 1, 1) and get jitter_scale *
    mean(diagonal) added on the diagonal, which keeps later factorizations
    stable without moving zero-variance cases off exact zero.
    """
    n = model.n_classes
    logits, _ = forward_batch(model, aux.features)
    mu = np.zeros((n, n))
    sigma = np.zeros((n, n, n))
    for cls in range(n):
        rows = logits[aux.labels == cls]
        if len(rows) == 0:
            raise ValueError(f"auxiliary set has no samples for class {cls}")
        mu[cls] = rows.mean(axis=0)
        centered = rows - mu[cls]
        cov = centered.T @ centered / max(len(rows) - 1, 1)
        cov = 0.5 * (cov + cov.T)
        jitter = jitter_scale * float(np.mean(np.diag(cov)))
        sigma[cls] = cov + jitter * np.eye(n)
    return LogitMoments(mu, sigma)


def _confusion_core(mu: np.ndarray, factors, n_samples: int, rng) -> np.ndarray:
    n = mu.shape[0]
    s = np.empty((n, n))
    for cls in range(n):
        draws = mu[cls] + rng.standard_normal((n_samples, n)) @ factors[cls].T
        s[cls] = mean_softmax(draws)
        s[cls, cls] = 0.0
    return s


def mc_confusion(moments: LogitMoments, n_samples: int, seed: int) -> ConfusionMatrix:
    """Monte Carlo confusion matrix from Gaussian logit moments.

    Draws n_samples logit vectors per class through a symmetric factor of
    the class covariance and averages the softmax. Deterministic per seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    factors = [_psd_factor(moments.sigma[cls]) for cls in range(moments.mu.shape[0])]
    rng = np.random.default_rng(seed)
    return ConfusionMatrix(_confusion_core(moments.mu, factors, n_samples, rng))


def _geometric_rho(decay: float, m: int) -> np.ndarray:
    # rho_tau = (1 - decay^(m + 1 - tau)) / (1 - decay), the tail-sum of a
    # geometric momentum series; decay = 0 collapses to all-ones.
    taus = np.arange(1, m + 1)
    if decay == 0.0:
        return np.ones(m)
    return (1.0 - decay ** (m + 1 - taus)) / (1.0 - decay)


def _infer_n_classes(history: UpdateHistory):
    for lst in (history.past_local_bias, history.past_global_bias, history.server_variate_bias):
        if lst:
            return lst[0].shape[0]
    return None


def scheme_coefficients(cfg: SchemeConfig, round_idx: int, history: UpdateHistory) -> SchemeCoefficients:
    """Per-epoch weights and history offset for attacking round `round_idx`.

    The history must cover rounds below round_idx (bias slices of past
    local and global updates; server-variate bias slices through the
    current round for scaffold). Raises on lambda * eta >= 1, where the
    proximal recursions stop contracting.
    """
    m, eta, lam, gamma = cfg.epochs, cfg.eta, cfg.lam, cfg.gamma
    if round_idx < 1:
        raise ValueError("round index starts at 1")
    if len(history.past_local_bias) < round_idx - 1:
        raise RuntimeError(
            f"history has {len(history.past_local_bias)} past updates; round {round_idx} needs {round_idx - 1}"
        )
    if cfg.scheme in ("fedprox", "feddyn", "feddc") and lam * eta >= 1.0:
        raise ValueError("lambda * eta must be below 1")

    if cfg.scheme == "fedavg":
        if cfg.optimizer == "sgd":
            return SchemeCoefficients(np.ones(m), None)
        if cfg.optimizer == "sgdm":
            return SchemeCoefficients(_geometric_rho(gamma, m), None)
        # nag: one extra power of gamma in every tail sum
        taus = np.arange(1, m + 1)
        if gamma == 0.0:
            return SchemeCoefficients(np.ones(m), None)
        rho = (1.0 - gamma ** (m + 2 - taus)) / (1.0 - gamma)
        return SchemeCoefficients(rho, None)

    if cfg.scheme == "scaffold":
        if len(history.server_variate_bias) < round_idx:
            raise RuntimeError("scaffold needs server variates for rounds 1..t")
        n = _infer_n_classes(history)
        h = np.zeros(n)
        for r in range(2, round_idx + 1):
            h += eta * m * history.server_variate_bias[r - 1]
        for db in history.past_local_bias[: round_idx - 1]:
            h += db
        return SchemeCoefficients(np.ones(m), h)

    # fedprox / feddyn / feddc share the proximal decay profile.
    q = 1.0 - lam * eta
    taus = np.arange(1, m + 1)
    rho = q ** (m - taus)
    if cfg.scheme == "fedprox":
        return SchemeCoefficients(rho, None)

    n = _infer_n_classes(history)
    if n is None:
        raise RuntimeError("cannot size the history offset from an empty history")
    shrink = 1.0 - q**m
    h = np.zeros(n)
    for db in history.past_local_bias[: round_idx - 1]:
        h += shrink * db
    if cfg.scheme == "feddyn":
        return SchemeCoefficients(rho, h)

    # feddc: previous-round drift correction on top of the feddyn offset.
    if round_idx > 1:
        if len(history.past_global_bias) < round_idx - 1:
            raise RuntimeError("feddc needs past global updates")
        coef = 1.0 if lam * eta == 0.0 else shrink / (lam * eta * m)
        h = h + coef * (history.past_local_bias[round_idx - 2] - history.past_global_bias[round_idx - 2])
    return SchemeCoefficients(rho, h)


def build_system(confusion: ConfusionMatrix) -> np.ndarray:
    """System matrix A with (A z)_j = z_j sum_n s[j, n] - sum_n z_n s[n, j]."""
    s = confusion.s
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("confusion matrix must be square")
    return np.diag(s.sum(axis=1)) - s.T


def make_target(update: LocalUpdate, coeffs: SchemeCoefficients, cfg: SchemeConfig) -> np.ndarray:
    """Normalized target u = (delta_b + h) / (eta * sum(rho)).

    Solving A z = u over the simplex then reads z as the batch class
    proportions. For a single plain-SGD epoch this reduces to delta_b/eta.
    """
    if cfg.eta == 0:
        raise DegenerateUpdateError("eta = 0 transmits no gradient signal")
    sum_rho = float(coeffs.rho.sum())
    if sum_rho <= 0:
        raise ValueError("sum of rho must be positive")
    offset = 0.0 if coeffs.h is None else coeffs.h
    return (update.delta_b_out + offset) / (cfg.eta * sum_rho)


def solve_simplex_ls(a: np.ndarray, u: np.ndarray, tol: float = 1e-10, max_iters: int = 10000):
    """min ||A z - u||^2 over the probability simplex, by projected gradient.

    Step size is 1/||A^T A||_2 (power iteration). Returns (z, info) where
    info carries iterations, converged, and the objective at z. On
    non-convergence the best iterate is returned with converged False.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != u.size:
        raise ValueError("A must be square and match u")
    if not (np.isfinite(a).all() and np.isfinite(u).all()):
        raise ValueError("non-finite system")
    n = u.size
    ata = a.T @ a
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(100):
        w = ata @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        v = w / lam
    if lam <= 1e-300:
        z = np.full(n, 1.0 / n)
        resid = a @ z - u
        return z, {"iterations": 0, "converged": True, "objective": float(resid @ resid)}
    z, iters, converged = pgd_simplex_ls(a, u, 1.0 / lam, tol, max_iters)
    resid = a @ z - u
    return z, {"iterations": int(iters), "converged": bool(converged), "objective": float(resid @ resid)}


def round_counts(z: np.ndarray, total: int) -> np.ndarray:
    """Integer counts from simplex weights, conserving the exact total."""
    z = np.asarray(z, dtype=np.float64)
    if total < 0:
        raise ValueError("total must be non-negative")
    if not np.isfinite(z).all() or (z < -1e-9).any():
        raise ValueError("z must be finite and non-negative")
    if abs(z.sum() - 1.0) > 1e-6:
        raise ValueError("z must lie on the probability simplex")
    return largest_remainder(np.maximum(z, 0.0) * total, total)


def estimate_embedding_norm(delta_w: np.ndarray, delta_b: np.ndarray, rel_threshold: float = 0.1) -> float:
    """Estimate sum_l e_l^2 of the batch-mean embedding from the output slice.

    Each admissible row j (|delta_b_j| at or above rel_threshold of the max)
    votes delta_W[j, :] / delta_b_j; the componentwise median is squared and
    summed.
    """
    delta_w = np.asarray(delta_w, dtype=np.float64)
    delta_b = np.asarray(delta_b, dtype=np.float64)
    if delta_w.ndim != 2 or delta_w.shape[0] != delta_b.size:
        raise ValueError("delta_w must be (N, L) aligned with delta_b")
    peak = float(np.abs(delta_b).max()) if delta_b.size else 0.0
    if peak == 0.0:
        raise DegenerateUpdateError("all bias deltas are zero")
    mask = np.abs(delta_b) >= rel_threshold * peak
    candidates = delta_w[mask] / delta_b[mask, None]
    ebar = np.median(candidates, axis=0)
    return float(np.sum(ebar * ebar))


def posterior_search(
    crude_counts: np.ndarray,
    moments: LogitMoments,
    s_first: ConfusionMatrix,
    s_last_observed: ConfusionMatrix,
    embed_norm: float,
    cfg: SchemeConfig,
    search_iters: int = 5,
    mc_samples: int = 1000,
    seed: int = 0,
    eps_adj: float = 0.01,
    include_bias_factor: bool = False,
) -> np.ndarray:
    """Refine crude multi-epoch counts by simulating the confidence drift.

    Starts from per-epoch counts g = crude/m (largest-remainder repaired to
    batch_size). Each outer iteration simulates the m local epochs: the
    expected bias movement under g shifts every class's logit mean by
    embed_norm (optionally +1 for the bias coordinate itself), and the
    confusion matrix is re-estimated by Monte Carlo. Comparing the
    simulated final matrix against the observed one column-wise moves one
    count unit from the most over-represented class to the most
    under-represented, stopping early at a fixed point. Returns m * g.
    """
    crude = np.asarray(crude_counts, dtype=np.int64)
    n = crude.size
    m, batch = cfg.epochs, cfg.batch_size
    if search_iters < 0:
        raise ValueError("search_iters must be non-negative")
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    if crude.sum() != m * batch:
        raise ValueError("crude counts must sum to epochs * batch_size")

    g = largest_remainder(crude / m, batch)
    if search_iters == 0:
        return g * m

    factor = embed_norm + (1.0 if include_bias_factor else 0.0)
    factors = [_psd_factor(moments.sigma[cls]) for cls in range(n)]
    rng = np.random.default_rng(seed)
    # One fixed draw set for the whole search (common random numbers): the
    # adjustment signal becomes a deterministic function of g instead of a
    # noise-driven walk across outer iterations, and the drift below is a
    # paired difference whose sampling error largely cancels.
    draws = [rng.standard_normal((mc_samples, n)) @ factors[cls].T for cls in range(n)]
    base = np.empty((n, n))
    for cls in range(n):
        base[cls] = mean_softmax(moments.mu[cls] + draws[cls])
        base[cls, cls] = 0.0
    scale = cfg.eta / batch
    for _ in range(search_iters):
        mu = moments.mu.copy()
        s_cur = s_first.s.copy()
        for _tau in range(m):
            exp_db = scale * (g * s_cur.sum(axis=1) - s_cur.T @ g)
            mu += exp_db[None, :] * factor
            # Control variate: the M-sample estimate only carries the drift
            # relative to the same draws at the starting moments, anchored
            # at the higher-precision starting matrix.
            for cls in range(n):
                row = mean_softmax(mu[cls] + draws[cls])
                s_cur[cls] = s_first.s[cls] + (row - base[cls])
                s_cur[cls, cls] = 0.0
        d = (s_last_observed.s - s_cur).sum(axis=0) / (n - 1)
        hi = int(np.argmax(d))
        lo = int(np.argmin(d))
        if d[hi] - d[lo] > eps_adj and g[lo] >= 1:
            g[hi] += 1
            g[lo] -= 1
        else:
            break
    return g * m


def rlu_attack(
    global_model: Model,
    update: LocalUpdate,
    aux: Dataset,
    cfg: SchemeConfig,
    history: UpdateHistory,
    params: AttackParams = None,
) -> AttackReport:
    """Recover the label counts behind one transmitted update.

    history must be the round-start state for update.round. Raises
    DegenerateUpdateError when the update carries no signal. All Monte
    Carlo randomness derives from params.seed.
    """
    params = params or AttackParams()
    if cfg.eta == 0:
        raise DegenerateUpdateError("eta = 0 transmits no gradient signal")
    if update.delta.max_abs() == 0.0:
        raise DegenerateUpdateError("update delta is identically zero")

    seeds = np.random.SeedSequence(params.seed).generate_state(3)
    moments_first = estimate_moments(global_model, aux)
    s_first = mc_confusion(moments_first, params.mc_samples, int(seeds[0]))

    local_model = global_model.copy()
    local_model.params().add_(update.delta, 1.0)
    moments_last = estimate_moments(local_model, aux)
    s_last = mc_confusion(moments_last, params.mc_samples, int(seeds[1]))

    coeffs = scheme_coefficients(cfg, update.round, history)
    u = make_target(update, coeffs, cfg)

    diagnostics = {"mc_samples": params.mc_samples}
    if cfg.epochs == 1:
        a = build_system(s_first)
        z, info = solve_simplex_ls(a, u, params.tol, params.max_iters)
        counts = round_counts(z, cfg.batch_size)
        method = METHOD_SINGLE
    else:
        a = build_system(ConfusionMatrix(0.5 * (s_first.s + s_last.s)))
        z, info = solve_simplex_ls(a, u, params.tol, params.max_iters)
        crude = round_counts(z, cfg.epochs * cfg.batch_size)
        diagnostics["crude_counts"] = [int(c) for c in crude]
        if params.search_iters <= 0:
            counts = crude
            method = METHOD_CRUDE
        else:
            embed_norm = estimate_embedding_norm(update.delta_w_out, update.delta_b_out, params.rel_threshold)
            diagnostics["embedding_norm"] = float(embed_norm)
            counts = posterior_search(
                crude,
                moments_first,
                s_first,
                s_last,
                embed_norm,
                cfg,
                params.search_iters,
                params.search_mc_samples,
                int(seeds[2]),
                params.eps_adj,
                params.include_bias_factor,
            )
            method = METHOD_SEARCH
    diagnostics["solver_iterations"] = info["iterations"]
    diagnostics["solver_converged"] = info["converged"]
    return AttackReport(z, counts, info["objective"], method, diagnostics)
