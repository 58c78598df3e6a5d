"""PAC-Bayes-lambda bounds, low-rank KL algebra and certification.

For posteriors and priors that differ only in their zero-mean Gaussian
initialization, the hypothesis-space KL divergence collapses to the KL
between the coordinate Gaussians N(0, M^2) and N(0, Mt^2) where
M = Diag(d) + q q^T is the shared covariance factor shape. The matrix
determinant lemma and the Sherman-Morrison identity make the divergence
and its gradients O(k) in the factor dimension k.

The bound: with probability at least 1 - epsilon over the m-sample,

    risk(post) <= E_hat / (1 - lam/2)
                  + (KL(post||prior) + log(2 sqrt(m)/epsilon))
                    / (m * lam * (1 - lam/2))

holds for every lam in (0, 2) and every posterior simultaneously, so
both may be tuned on the same sample. Certificates are only issued for
the zero-one loss; cross entropy is the differentiable surrogate used
during posterior training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .pushforward import (
    DegenerateCovariance,
    LowRankCov,
    grad_from_factor,
    moments_from_factor,
)
from .quadrature import (
    LossKind,
    expected_risk,
    expected_risk_grad,
    DEFAULT_N_POINTS,
)


class OptimizationDivergence(RuntimeError):
    """Posterior optimization made the bound worse repeatedly.

    Carries the alternation trace gathered so far in ``trace``.
    """

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# KL divergence between two low-rank initialization covariances
# ---------------------------------------------------------------------------


def _logdet_factor(d, q):
    # log det (Diag(d) + q q^T) via the determinant lemma; d > 0 entrywise.
    return float(np.sum(np.log(d)) + np.log1p(np.dot(q, q / d)))


def kl_lowrank(post, prior):
    """KL( N(0, M^2) || N(0, Mt^2) ) for M, Mt of Diag+rank-one shape.

    ``post`` and ``prior`` are LowRankCov with matching shapes. Runs in
    O(k) time and memory; no k-by-k matrix is ever formed.
    """
    if post.shape != prior.shape:
        raise ValueError("posterior and prior covariance shapes differ")
    d = np.asarray(post.d, dtype=np.float64)
    q = np.asarray(post.q, dtype=np.float64)
    dt = np.asarray(prior.d, dtype=np.float64)
    qt = np.asarray(prior.q, dtype=np.float64)
    k = d.shape[0]

    # Mt^{-1} = Dt^{-1} - gamma u u^T with u = qt/dt (Sherman-Morrison).
    u = qt / dt
    gamma = 1.0 / (1.0 + np.dot(qt, u))

    # X = Mt^{-1} M = Diag(delta) + a q^T + b w^T, all ingredients O(k).
    delta = d / dt
    a = q / dt - gamma * np.dot(u, q) * u
    b = -gamma * u
    w = u * d

    # trace(Mt^{-2} M^2) = ||X||_F^2 expanded over the three terms.
    tr = float(np.dot(delta, delta))
    tr += 2.0 * float(np.dot(delta * a, q))
    tr += 2.0 * float(np.dot(delta * b, w))
    tr += float(np.dot(a, a) * np.dot(q, q))
    tr += 2.0 * float(np.dot(a, b) * np.dot(q, w))
    tr += float(np.dot(b, b) * np.dot(w, w))

    # KL = (tr - k)/2 + (log det Mt^2 - log det M^2)/2.
    return 0.5 * (tr - k) + _logdet_factor(dt, qt) - _logdet_factor(d, q)


def kl_lowrank_grad(post, prior):
    """Gradient of kl_lowrank with respect to the posterior's (d, q).

    Returns ``(g_d, g_q)`` as float64 arrays of length k. O(k).
    """
    if post.shape != prior.shape:
        raise ValueError("posterior and prior covariance shapes differ")
    d = np.asarray(post.d, dtype=np.float64)
    q = np.asarray(post.q, dtype=np.float64)
    dt = np.asarray(prior.d, dtype=np.float64)
    qt = np.asarray(prior.q, dtype=np.float64)

    # With Sigma = M^2 the divergence reads tr(S M^2)/2 - k/2 + const
    # - log det M, S = Mt^{-2}, so dKL/dM = (S M + M S)/2 - M^{-1} =: G
    # and the chain rule onto d and q gives diag(G) and 2 G q.
    u = qt / dt
    gamma = 1.0 / (1.0 + np.dot(qt, u))
    v = u / dt
    alpha = gamma * gamma * np.dot(u, u)

    # S = Dt^{-2} - gamma (v u^T + u v^T) + alpha u u^T.
    uq = np.dot(u, q)
    vq = np.dot(v, q)
    ud = u * d
    vd = v * d

    # S M = Diag(d/dt^2) + sum of rank-one x y^T terms.
    rank_ones = [
        (q / (dt * dt), q),
        (-gamma * v, ud),
        (-gamma * uq * v, q),
        (-gamma * u, vd),
        (-gamma * vq * u, q),
        (alpha * u, ud),
        (alpha * uq * u, q),
    ]
    diag_sm = d / (dt * dt)
    for x, y in rank_ones:
        diag_sm = diag_sm + x * y

    # diag(M^{-1}) and M^{-1} q, again by Sherman-Morrison on M itself.
    g0 = 1.0 / (1.0 + np.dot(q, q / d))
    diag_minv = 1.0 / d - g0 * (q / d) ** 2
    minv_q = g0 * (q / d)

    # diag(MS) = diag(SM) by symmetry of S and M, so diag(G) = diag(SM)
    # - diag(M^{-1}).
    g_d = diag_sm - diag_minv

    # 2 G q = (S M) q + M (S q) - 2 M^{-1} q.
    smq = (d / (dt * dt)) * q
    for x, y in rank_ones:
        smq = smq + x * np.dot(y, q)
    sq = q / (dt * dt) - gamma * uq * v - gamma * vq * u + alpha * uq * u
    msq = d * sq + q * np.dot(q, sq)
    g_q = smq + msq - 2.0 * minv_q
    return g_d, g_q


def kl_lowrank_dense(post, prior):
    """Dense-matrix reference for kl_lowrank. O(k^3); testing only."""
    m_post = post.factor_matrix()
    m_prior = prior.factor_matrix()
    sig = m_post @ m_post.T
    sig_t = m_prior @ m_prior.T
    k = sig.shape[0]
    sol = np.linalg.solve(sig_t, sig)
    sign_p, logdet_p = np.linalg.slogdet(sig)
    sign_t, logdet_t = np.linalg.slogdet(sig_t)
    if sign_p <= 0 or sign_t <= 0:
        raise ValueError("covariance not positive definite")
    return 0.5 * (np.trace(sol) - k + logdet_t - logdet_p)


def random_prior_cov(shape, seed, d_floor=1e-4):
    """Draw an initialization covariance factor M = Diag(d) + q q^T.

    Entries of d and q come from a normal centered at 0.1 with variance
    0.01; d is floored to keep the factor positive definite.
    """
    rng = np.random.default_rng(seed)
    k = shape.coord_dim
    d = 0.1 + 0.1 * rng.standard_normal(k)
    q = 0.1 + 0.1 * rng.standard_normal(k)
    return LowRankCov(np.maximum(d, d_floor), q, shape)


# ---------------------------------------------------------------------------
# Bound arithmetic
# ---------------------------------------------------------------------------


def bound_rhs(emp_risk, kl_value, m, epsilon, lam):
    """Arithmetic of the bound's right-hand side at a given lambda.

    Only lambda's open-interval domain (the formula has poles at 0 and
    2) and positive m are enforced; range policy for certification
    lives in BoundInputs. Training calls this directly because the
    cross-entropy surrogate risk may exceed 1.
    """
    lam = float(lam)
    if not 0.0 < lam < 2.0:
        raise ValueError("lambda must lie strictly inside (0, 2)")
    m = int(m)
    if m < 1:
        raise ValueError("sample size must be at least 1")
    log_term = math.log(2.0 * math.sqrt(m) / float(epsilon))
    half = 1.0 - lam / 2.0
    return float(emp_risk) / half + (float(kl_value) + log_term) / (m * lam * half)


def bound_eval(inputs):
    """Evaluate the bound for a validated BoundInputs."""
    if not isinstance(inputs, BoundInputs):
        raise TypeError("bound_eval expects BoundInputs; use bound_rhs for raw values")
    return bound_rhs(inputs.emp_risk, inputs.kl, inputs.m, inputs.epsilon, inputs.lam)


def lambda_opt(emp_risk, kl_value, m, epsilon):
    """Closed-form minimizer of the bound over lambda in (0, 2).

    Setting the derivative to zero gives
    lam* = 2 / (sqrt(2 m E_hat / C + 1) + 1) with C = KL + log(2 sqrt(m)
    / epsilon). Zero empirical risk yields lam* = 1 exactly.
    """
    m = int(m)
    if m < 1:
        raise ValueError("sample size must be at least 1")
    emp_risk = float(emp_risk)
    if emp_risk < 0.0:
        raise ValueError("empirical risk must be nonnegative")
    c = float(kl_value) + math.log(2.0 * math.sqrt(m) / float(epsilon))
    if c <= 0.0:
        raise ValueError("complexity term must be positive")
    return 2.0 / (math.sqrt(2.0 * m * emp_risk / c + 1.0) + 1.0)


@dataclass(frozen=True)
class BoundInputs:
    """Validated ingredients of a certificate-grade bound evaluation."""

    emp_risk: float
    kl: float
    m: int
    epsilon: float
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.emp_risk <= 1.0:
            raise ValueError("empirical risk must lie in [0, 1]")
        if self.kl < 0.0:
            raise ValueError("KL divergence must be nonnegative")
        if self.m < 1:
            raise ValueError("sample size must be at least 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("confidence epsilon must lie in (0, 1)")
        if not 0.0 < self.lam < 2.0:
            raise ValueError("lambda must lie strictly inside (0, 2)")

    def evaluate(self):
        return bound_rhs(self.emp_risk, self.kl, self.m, self.epsilon, self.lam)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

_CERT_FORMAT = "ldaf-certificate-v1"


@dataclass
class Certificate:
    """A self-contained, re-verifiable risk certificate.

    ``bound`` upper-bounds the true zero-one risk of the stochastic
    classifier with probability at least 1 - epsilon. ``provenance``
    holds free-form string metadata (config hash, seeds) that makes the
    producing run reproducible.
    """

    bound: float
    lambda_star: float
    kl: float
    emp_risk_01: float
    error_estimate: float
    epsilon: float
    m: int
    n_points: int
    padding: bool = False
    loss: str = "01"
    provenance: dict = field(default_factory=dict)

    def to_text(self):
        lines = ["format = %s" % _CERT_FORMAT]
        lines.append("loss = %s" % self.loss)
        lines.append("bound = %s" % repr(float(self.bound)))
        lines.append("lambda_star = %s" % repr(float(self.lambda_star)))
        lines.append("kl = %s" % repr(float(self.kl)))
        lines.append("emp_risk_01 = %s" % repr(float(self.emp_risk_01)))
        lines.append("error_estimate = %s" % repr(float(self.error_estimate)))
        lines.append("epsilon = %s" % repr(float(self.epsilon)))
        lines.append("m = %d" % self.m)
        lines.append("n_points = %d" % self.n_points)
        lines.append("padding = %d" % (1 if self.padding else 0))
        for key in sorted(self.provenance):
            value = str(self.provenance[key])
            if "\n" in value or "\n" in key:
                raise ValueError("provenance entries must be single-line")
            lines.append("provenance.%s = %s" % (key, value))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        provenance = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if " = " not in line:
                raise ValueError("malformed certificate line: %r" % raw)
            key, value = line.split(" = ", 1)
            if key.startswith("provenance."):
                provenance[key[len("provenance."):]] = value
            else:
                fields[key] = value
        if fields.get("format") != _CERT_FORMAT:
            raise ValueError("unrecognized certificate format")
        return cls(
            bound=float(fields["bound"]),
            lambda_star=float(fields["lambda_star"]),
            kl=float(fields["kl"]),
            emp_risk_01=float(fields["emp_risk_01"]),
            error_estimate=float(fields["error_estimate"]),
            epsilon=float(fields["epsilon"]),
            m=int(fields["m"]),
            n_points=int(fields["n_points"]),
            padding=bool(int(fields["padding"])),
            loss=fields["loss"],
            provenance=provenance,
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def effective_risk(self):
        if self.padding:
            return self.emp_risk_01 + self.error_estimate
        return self.emp_risk_01

    def reverify(self):
        """Recompute the bound from the stored ingredients.

        Returns the recomputed value; callers compare it to ``bound``.
        """
        return bound_rhs(
            self.effective_risk(), self.kl, self.m, self.epsilon, self.lambda_star
        )


# ---------------------------------------------------------------------------
# Posterior optimization and certification
# ---------------------------------------------------------------------------


@dataclass
class PosteriorConfig:
    alternations: int = 10
    epochs: int = 5
    lr: float = 0.1
    n_points: int = 2048
    epsilon: float = 0.05
    lambda_tol: float = 1e-3
    d_floor: float = 1e-4
    max_bound_increases: int = 3
    threads: int = None


def _surrogate_state(factors, post, labels, n_points, threads):
    moments = [moments_from_factor(f, post) for f in factors]
    est = expected_risk(
        moments,
        labels,
        LossKind.CROSS_ENTROPY,
        n_points=n_points,
        threads=threads,
    )
    return moments, est.value


def optimize_posterior(prior, model, val_data, config=None):
    """Alternate exact lambda updates with gradient steps on (d, q).

    ``model`` must expose ``marginal_factors(features)`` returning the
    per-datum pushforward factors for its trained flow; only the
    initialization covariance moves here, so the factors are computed
    once and reused throughout.

    Each epoch takes a gradient step of size ``config.lr`` on the
    fixed-lambda objective, halving the step until it actually
    decreases the objective (drawn priors can carry noise scales near
    the positivity floor, where the KL term's curvature ~ 1/d^2 makes
    the full step overshoot). A step that decreases the objective at
    full size is taken unmodified, so the backtracking only engages on
    stiff coordinates. Together with the exact lambda step this makes
    the recorded bound trace non-increasing.

    Returns ``(posterior, lambda_star, trace)`` where ``trace`` is a
    list of per-alternation dicts (lambda, surrogate risk, kl, bound).
    Raises OptimizationDivergence if the surrogate bound increases on
    ``max_bound_increases`` consecutive alternations or the state
    degenerates numerically.
    """
    if config is None:
        config = PosteriorConfig()
    features, labels = val_data
    labels = np.asarray(labels)
    m = int(labels.shape[0])
    if m < 1:
        raise ValueError("validation set is empty")

    factors = model.marginal_factors(features)
    post = prior.copy()
    trace = []
    prev_lam = None
    prev_bound = None
    increases = 0
    stepped_since_entry = False

    def record_entry():
        try:
            moments, risk = _surrogate_state(
                factors, post, labels, config.n_points, config.threads
            )
            kl_value = kl_lowrank(post, prior)
        except (DegenerateCovariance, np.linalg.LinAlgError):
            raise OptimizationDivergence(
                "posterior covariance degenerated during gradient epochs",
                trace,
            ) from None
        if not (math.isfinite(risk) and math.isfinite(kl_value)):
            raise OptimizationDivergence(
                "surrogate bound became non-finite", trace
            )
        lam = lambda_opt(risk, kl_value, m, config.epsilon)
        bound = bound_rhs(risk, kl_value, m, config.epsilon, lam)
        trace.append(
            {
                "alternation": len(trace),
                "lambda": lam,
                "surrogate_risk": risk,
                "kl": kl_value,
                "bound": bound,
            }
        )
        return lam, bound

    for alternation in range(config.alternations):
        lam, bound = record_entry()
        stepped_since_entry = False

        increased = prev_bound is not None and bound > prev_bound * (
            1.0 + 1e-12
        ) + 1e-15
        if increased:
            increases += 1
            if increases >= config.max_bound_increases:
                raise OptimizationDivergence(
                    "surrogate bound increased on %d consecutive alternations"
                    % increases,
                    trace,
                )
        else:
            increases = 0
        prev_bound = bound

        # A stabilized lambda only counts as convergence if the bound
        # did not just get worse; a blow-up can pin lambda while the
        # bound explodes, and that must reach the divergence abort.
        if (
            prev_lam is not None
            and abs(lam - prev_lam) < config.lambda_tol
            and not increased
        ):
            break
        prev_lam = lam

        # Gradient epochs at fixed lambda. The risk term enters the
        # bound through 1/(1 - lam/2), the KL term through
        # 1/(m lam (1 - lam/2)); expected_risk_grad already averages
        # over the sample.
        half = 1.0 - lam / 2.0
        kl_scale = 1.0 / (m * lam * half)

        def objective(cov):
            moments = [moments_from_factor(f, cov) for f in factors]
            risk = expected_risk(
                moments,
                labels,
                LossKind.CROSS_ENTROPY,
                n_points=config.n_points,
                threads=config.threads,
            ).value
            return risk / half + kl_scale * kl_lowrank(cov, prior)

        stalled = False
        for _ in range(config.epochs):
            try:
                f_cur = objective(post)
                moments = [moments_from_factor(f, post) for f in factors]
                per_datum = expected_risk_grad(
                    moments,
                    labels,
                    n_points=config.n_points,
                    upstream=1.0 / half,
                    threads=config.threads,
                )
                g_d = np.zeros_like(post.d)
                g_q = np.zeros_like(post.q)
                for factor, mom, (gm, gchol, gshift) in zip(
                    factors, moments, per_datum
                ):
                    fd, fq = grad_from_factor(factor, post, mom, gchol)
                    g_d += fd
                    g_q += fq
                kd, kq = kl_lowrank_grad(post, prior)
                g_d += kl_scale * kd
                g_q += kl_scale * kq
            except (DegenerateCovariance, np.linalg.LinAlgError):
                raise OptimizationDivergence(
                    "posterior covariance degenerated during gradient epochs",
                    trace,
                ) from None
            if not (math.isfinite(f_cur) and np.all(np.isfinite(g_d))
                    and np.all(np.isfinite(g_q))):
                raise OptimizationDivergence(
                    "surrogate objective became non-finite", trace
                )
            sq_norm = float(g_d @ g_d + g_q @ g_q)
            step = config.lr
            accepted = None
            for _ in range(60):
                cand = LowRankCov(
                    np.maximum(post.d - step * g_d, config.d_floor),
                    post.q - step * g_q,
                    post.shape,
                )
                try:
                    f_cand = objective(cand)
                except (DegenerateCovariance, np.linalg.LinAlgError):
                    f_cand = math.inf
                if f_cand <= f_cur - 1e-4 * step * sq_norm:
                    accepted = cand
                    break
                step *= 0.5
            if accepted is None:
                # No step length descends any more: the posterior has
                # stopped moving, so treat the alternation as converged.
                stalled = True
                break
            post = accepted
            stepped_since_entry = True
        if stalled and not stepped_since_entry:
            break

    if stepped_since_entry:
        lam, bound = record_entry()
    # Returning a posterior worse than the untouched prior would hand
    # the caller a silently broken result; the prior itself was always
    # available, so ending above the starting bound is a failure.
    if trace[-1]["bound"] > trace[0]["bound"] * (1.0 + 1e-9) + 1e-12:
        raise OptimizationDivergence(
            "optimization ended with a worse bound than it started", trace
        )
    return post, trace[-1]["lambda"], trace


def certify(
    posterior,
    prior,
    model,
    val_data,
    epsilon,
    n_points=DEFAULT_N_POINTS,
    padding=False,
    threads=None,
    provenance=None,
    factors=None,
):
    """Issue a zero-one risk certificate for the stochastic classifier.

    The expected empirical zero-one risk is computed by quasi-random
    quadrature with a spread of digit-shifted replicates supplying
    ``error_estimate``; with ``padding`` the estimate is added to the
    risk before the bound is taken, covering residual quadrature error.
    lambda is re-optimized for the zero-one risk.
    """
    features, labels = val_data
    labels = np.asarray(labels)
    m = int(labels.shape[0])
    if m < 1:
        raise ValueError("validation set is empty")
    if not 0.0 < float(epsilon) < 1.0:
        raise ValueError("confidence epsilon must lie in (0, 1)")

    if factors is None:
        factors = model.marginal_factors(features)
    moments = [moments_from_factor(f, posterior) for f in factors]
    est = expected_risk(
        moments,
        labels,
        LossKind.ZERO_ONE,
        n_points=n_points,
        threads=threads,
        with_error_estimate=True,
    )
    kl_value = kl_lowrank(posterior, prior)
    if kl_value < 0.0:
        # Exact KL is nonnegative; tiny negative values are roundoff.
        if kl_value < -1e-9:
            raise ValueError("KL divergence came out negative")
        kl_value = 0.0
    effective = est.value + (est.error_estimate if padding else 0.0)
    lam = lambda_opt(effective, kl_value, m, epsilon)
    bound = bound_rhs(effective, kl_value, m, epsilon, lam)
    return Certificate(
        bound=bound,
        lambda_star=lam,
        kl=kl_value,
        emp_risk_01=est.value,
        error_estimate=est.error_estimate,
        epsilon=float(epsilon),
        m=m,
        n_points=int(n_points),
        padding=bool(padding),
        provenance=dict(provenance or {}),
    )
