"""Datasets, feature maps, prior training, evaluation and persistence.

The classifier pipeline: features map affinely into the tangent space,
the initial state lifts them onto the assignment manifold, the
linearized flow integrates to time T, and the first node's block (plus
the feature logit shift) is read out as class scores. Training fits the
feature map and the coupling matrix by empirical cross-entropy risk
minimization; the randomized initialization covariance is drawn once
and kept fixed, defining the PAC-Bayes prior.
"""

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    GraphShape,
    STATE_FLOOR,
    barycenter,
    lift,
    project_tangent,
)
from .flowcore import (
    DENSE_LIMIT,
    FlowParams,
    assemble_linearized_batch,
    frechet_expm_batched,
    phi_batched,
    solve_ldaf,
)
from .pushforward import (
    LowRankCov,
    marginal_factor,
    marginal_factor_batch,
    moments_from_factor,
)
from .quadrature import DEFAULT_N_POINTS, LossKind, expected_risk
from .pacbayes import random_prior_cov

SPLIT_TRAIN = 0
SPLIT_VAL = 1
SPLIT_TEST = 2

_SPLIT_NAMES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}

_FEATURE_MAGIC = b"LDAF"
_FEATURE_VERSION = 1
_MODEL_FORMAT = "ldaf-model-v1"


class DataFormatError(ValueError):
    """A feature file or dataset failed structural validation."""


class ModelFormatError(ValueError):
    """A model directory failed structural validation."""


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Feature matrix with integer labels and per-row split tags."""

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    c: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.split = np.ascontiguousarray(self.split, dtype=np.int8)
        m = self.features.shape[0]
        if self.features.ndim != 2:
            raise DataFormatError("features must be a 2-D matrix")
        if self.labels.shape != (m,) or self.split.shape != (m,):
            raise DataFormatError("labels and split tags must match row count")
        if self.c < 2:
            raise DataFormatError("need at least two classes")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.c):
            raise DataFormatError("labels out of range [0, %d)" % self.c)
        bad = ~np.isin(self.split, (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST))
        if bad.any():
            raise DataFormatError("unknown split tags present")
        for arr in (self.features, self.labels, self.split):
            arr.flags.writeable = False

    @property
    def m(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows(self, split):
        """(features, labels) of one split, by name or tag value."""
        tag = _SPLIT_NAMES[split] if isinstance(split, str) else int(split)
        mask = self.split == tag
        return self.features[mask], self.labels[mask]

    def content_hash(self):
        """Hex digest over features, labels and shape (not split tags)."""
        h = hashlib.sha256()
        h.update(struct.pack("<QQI", self.m, self.dim, self.c))
        h.update(self.features.tobytes())
        h.update(self.labels.astype("<u4").tobytes())
        return h.hexdigest()


def _balanced_labels(m, c):
    counts = np.full(c, m // c, dtype=np.int64)
    counts[: m % c] += 1
    return np.repeat(np.arange(c, dtype=np.int64), counts)


def gen_synthetic(kind, m, dim, c, seed, noise=1.0, separation=10.0):
    """Reproducible synthetic classification data, balanced within 1.

    gaussian_blobs: isotropic Gaussian clusters with pairwise centroid
    distance ``separation`` (in units of the noise scale), trivially
    solvable by a nearest-centroid rule. ring: classes are angular
    sectors of a noisy circle in the first two coordinates.
    """
    if m < c:
        raise ValueError("need at least one datum per class")
    if dim < 2:
        raise ValueError("need at least two feature dimensions")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(m, c)

    if kind == "gaussian_blobs":
        if c <= dim:
            basis, _ = np.linalg.qr(rng.standard_normal((dim, c)))
            centroids = (separation * noise / np.sqrt(2.0)) * basis.T
        else:
            raw = rng.standard_normal((c, dim))
            diff = raw[:, None, :] - raw[None, :, :]
            dist = np.sqrt((diff**2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            centroids = raw * (separation * noise / dist.min())
        features = centroids[labels] + noise * rng.standard_normal((m, dim))
    elif kind == "ring":
        sector = 2.0 * np.pi / c
        gap = 0.1 * sector
        theta = labels * sector + gap + (sector - 2 * gap) * rng.random(m)
        radius = 10.0 * noise + 0.5 * noise * rng.standard_normal(m)
        features = 0.1 * noise * rng.standard_normal((m, dim))
        features[:, 0] = radius * np.cos(theta)
        features[:, 1] = radius * np.sin(theta)
    else:
        raise ValueError("unknown synthetic kind %r" % (kind,))

    order = rng.permutation(m)
    return Dataset(
        features=features[order],
        labels=labels[order],
        split=np.zeros(m, dtype=np.int8),
        c=c,
    )


def assign_splits(dataset, val_fraction=None, test_fraction=0.0, seed=0):
    """Return a copy of the dataset with train/val/test tags drawn.

    Validation size defaults to min(10000, 25% of rows). Tags are a
    seeded permutation so the assignment is reproducible.
    """
    m = dataset.m
    if val_fraction is None:
        n_val = min(10000, int(round(0.25 * m)))
    else:
        n_val = int(round(val_fraction * m))
    n_test = int(round(test_fraction * m))
    if n_val + n_test >= m:
        raise ValueError("splits leave no training rows")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    split = np.zeros(m, dtype=np.int8)
    split[order[:n_val]] = SPLIT_VAL
    split[order[n_val : n_val + n_test]] = SPLIT_TEST
    return Dataset(
        features=dataset.features,
        labels=dataset.labels,
        split=split,
        c=dataset.c,
    )


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def save_features(dataset, path):
    """Write the binary feature-file format (or CSV for .csv paths)."""
    if str(path).endswith(".csv"):
        _save_features_csv(dataset, path)
        return
    buf = io.BytesIO()
    buf.write(_FEATURE_MAGIC)
    buf.write(struct.pack("<I", _FEATURE_VERSION))
    buf.write(struct.pack("<QQ", dataset.m, dataset.dim))
    buf.write(struct.pack("<I", dataset.c))
    buf.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
    buf.write(dataset.labels.astype("<u4").tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_features(path):
    """Read a feature file; binary by magic sniff, CSV otherwise.

    Rows come back tagged train; split assignment is a separate,
    configured step.
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != _FEATURE_MAGIC:
        return _load_features_csv(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 + 4 + 4 + 16 + 4:
        raise DataFormatError("feature file truncated")
    payload, digest = blob[:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != digest:
        raise DataFormatError("feature file checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != _FEATURE_VERSION:
        raise DataFormatError("unsupported feature file version %d" % version)
    rows, dim = struct.unpack_from("<QQ", payload, off)
    off += 16
    (c,) = struct.unpack_from("<I", payload, off)
    off += 4
    need = off + rows * dim * 8 + rows * 4
    if len(payload) != need:
        raise DataFormatError("feature file truncated")
    features = np.frombuffer(payload, dtype="<f8", count=rows * dim, offset=off)
    features = features.reshape(rows, dim)
    off += rows * dim * 8
    labels = np.frombuffer(payload, dtype="<u4", count=rows, offset=off)
    labels = labels.astype(np.int64)
    if rows and labels.max() >= c:
        raise DataFormatError("label out of range in feature file")
    return Dataset(
        features=features.copy(),
        labels=labels,
        split=np.zeros(rows, dtype=np.int8),
        c=int(c),
    )


def _save_features_csv(dataset, path):
    header = "label," + ",".join("f%d" % (j + 1) for j in range(dataset.dim))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(dataset.m):
            row = ",".join(repr(float(x)) for x in dataset.features[i])
            fh.write("%d,%s\n" % (dataset.labels[i], row))


def _load_features_csv(path):
    try:
        return _parse_features_csv(path)
    except UnicodeDecodeError:
        raise DataFormatError(
            "not a feature file: bad magic and not parseable as CSV"
        ) from None


def _parse_features_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[0] != "label" or any(
            c != "f%d" % (j + 1) for j, c in enumerate(cols[1:])
        ):
            raise DataFormatError("CSV header must be label,f1,...,fd")
        dim = len(cols) - 1
        if dim < 1:
            raise DataFormatError("CSV has no feature columns")
        feats = []
        labels = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 1:
                raise DataFormatError("CSV row %d has wrong arity" % line_no)
            labels.append(int(parts[0]))
            feats.append([float(x) for x in parts[1:]])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataFormatError("CSV contains no data rows")
    if labels.min() < 0:
        raise DataFormatError("negative label in CSV")
    c = int(labels.max()) + 1
    return Dataset(
        features=np.asarray(feats, dtype=np.float64),
        labels=labels,
        split=np.zeros(labels.size, dtype=np.int8),
        c=max(c, 2),
    )


# ---------------------------------------------------------------------------
# Feature maps and the model bundle
# ---------------------------------------------------------------------------


@dataclass
class FeatureMap:
    """Affine map from raw features into the zero-sum tangent space.

    kind "identity" requires dim == N and only enforces per-node zero
    sums; kind "linear" applies x -> W x + b first. Output blocks sum
    to zero exactly by construction (blockwise mean subtraction).
    """

    kind: str
    weights: np.ndarray = None
    bias: np.ndarray = None

    def apply_batch(self, x, shape):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("expected a batch of feature rows")
        if self.kind == "identity":
            if x.shape[1] != shape.N:
                raise ValueError("identity feature map needs dim == N")
            pre = x
        elif self.kind == "linear":
            pre = x @ self.weights.T + self.bias
        else:
            raise ValueError("unknown feature map kind %r" % (self.kind,))
        blocks = pre.reshape(-1, shape.n, shape.c)
        return (blocks - blocks.mean(axis=2, keepdims=True)).reshape(
            -1, shape.N
        )


def _lift_rows(v0, shape):
    # Barycenter lift of a batch of tangent rows; mirrors manifold.lift
    # operation for operation so a single row lifts bit-identically.
    sb = np.full((v0.shape[0], shape.n, shape.c), 1.0 / shape.c)
    vb = v0.reshape(-1, shape.n, shape.c)
    z = vb - vb.max(axis=2, keepdims=True)
    w = sb * np.exp(z)
    w /= w.sum(axis=2, keepdims=True)
    return np.maximum(w, STATE_FLOOR).reshape(-1, shape.N)


@dataclass
class ModelBundle:
    """Everything needed to classify: feature map, flow, covariances."""

    shape: GraphShape
    feature_map: FeatureMap
    params: FlowParams
    prior: LowRankCov
    T: float = 1.0
    posterior: LowRankCov = None
    metadata: dict = field(default_factory=dict)

    def feature_tangent(self, x):
        return self.feature_map.apply_batch(x, self.shape)

    def forward_logits(self, x, max_chunk=None):
        """Deterministic logits for a batch, shape (m, c)."""
        v0 = self.feature_tangent(x)
        s0 = _lift_rows(v0, self.shape)
        c = self.shape.c
        if self.shape.N > DENSE_LIMIT:
            out = np.empty((v0.shape[0], c))
            for i in range(v0.shape[0]):
                vt = solve_ldaf(self.params, s0[i], self.T)
                out[i] = vt[:c] + v0[i, :c]
            return out
        if max_chunk is None:
            max_chunk = max(1, int(2.0e7 / ((self.shape.N + 1) ** 2)))
        out = np.empty((v0.shape[0], c))
        for lo in range(0, v0.shape[0], max_chunk):
            hi = min(v0.shape[0], lo + max_chunk)
            a, b = assemble_linearized_batch(self.params, s0[lo:hi])
            _, vt = phi_batched(a, b, self.T)
            out[lo:hi] = vt[:, :c] + v0[lo:hi, :c]
        return out

    def marginal_factors(self, x):
        """Covariance-independent pushforward factors, one per row."""
        v0 = self.feature_tangent(x)
        s0 = _lift_rows(v0, self.shape)
        shifts = v0[:, : self.shape.c]
        if self.shape.N <= DENSE_LIMIT:
            return marginal_factor_batch(self.params, s0, self.T, shifts)
        return [
            marginal_factor(self.params, s0[i], self.T, shifts[i])
            for i in range(v0.shape[0])
        ]

    def active_cov(self):
        return self.posterior if self.posterior is not None else self.prior


def forward_deterministic(model, x):
    """Logits and predicted class for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    v0 = model.feature_tangent(x[None, :])[0]
    s0 = lift(barycenter(model.shape), v0, model.shape)
    vt = solve_ldaf(model.params, s0, model.T)
    c = model.shape.c
    logits = vt[:c] + v0[:c]
    return logits, int(np.argmax(logits))


# ---------------------------------------------------------------------------
# Prior training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_nodes: int = 10
    T: float = 1.0
    steps: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    feature_map: str = "linear"


class TrainingDiverged(RuntimeError):
    pass


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _batch_loss_grads(weights, bias, params, xb, yb, shape, T, fmap_kind):
    """Mean cross entropy and gradients w.r.t. (W, bias, Omega).

    Forward: one batched augmented exponential. Backward: the gradient
    of a^T expm(M) e in M is the Frechet derivative L(M^T, a e^T),
    computed for the whole batch by the block-triangular trick, then
    pulled back through the linearization assembly, the barycenter
    lift, and the affine feature map.
    """
    bsz = xb.shape[0]
    n_aug = shape.N + 1
    if fmap_kind == "identity":
        pre = xb
    else:
        pre = xb @ weights.T + bias
    blocks = pre.reshape(-1, shape.n, shape.c)
    v0 = (blocks - blocks.mean(axis=2, keepdims=True)).reshape(-1, shape.N)
    s0 = _lift_rows(v0, shape)

    a_stack, b_stack = assemble_linearized_batch(params, s0)
    _, vt = phi_batched(a_stack, b_stack, T)
    logits = vt[:, : shape.c] + v0[:, : shape.c]

    # Stable cross entropy and its logits gradient.
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    losses = lse - logits[np.arange(bsz), yb]
    loss = float(losses.mean())
    g_logits = _softmax_rows(logits)
    g_logits[np.arange(bsz), yb] -= 1.0
    g_logits /= bsz

    # Gradient through the augmented exponential.
    aug_t = np.zeros((bsz, n_aug, n_aug))
    aug_t[:, : shape.N, : shape.N] = T * np.swapaxes(a_stack, 1, 2)
    aug_t[:, shape.N, : shape.N] = T * b_stack
    direction = np.zeros((bsz, n_aug, n_aug))
    direction[:, : shape.c, shape.N] = g_logits
    g_aug = frechet_expm_batched(aug_t, direction)
    g_a = T * g_aug[:, : shape.N, : shape.N]
    g_b = T * g_aug[:, : shape.N, shape.N]

    # Pull back onto Omega and s0. With K = Omega Pi0 g_A, the
    # replicator blocks contribute diag(K_ii) - (K_ii + K_ii^T) s_i per
    # node, the drift term contributes Omega Pi0 g_b.
    gb_blocks = g_b.reshape(-1, shape.n, shape.c)
    proj_gb = (gb_blocks - gb_blocks.mean(axis=2, keepdims=True)).reshape(
        -1, shape.N
    )
    ga_blocks = g_a.reshape(bsz, shape.n, shape.c, shape.N)
    proj_ga = (ga_blocks - ga_blocks.mean(axis=2, keepdims=True)).reshape(
        bsz, shape.N, shape.N
    )

    r_blocks = s0.reshape(-1, shape.n, shape.c)
    g_omega = np.einsum("bij,bkj->ik", proj_ga, _replicator_stack_dense(r_blocks, shape))
    g_omega += proj_gb.T @ s0
    g_omega = 0.5 * (g_omega + g_omega.T)

    k_mat = np.matmul(params.omega, proj_ga)
    idx = np.arange(shape.n)
    k_blocks = k_mat.reshape(bsz, shape.n, shape.c, shape.n, shape.c)[
        :, idx, :, idx, :
    ]
    k_blocks = np.moveaxis(k_blocks, 0, 1)  # back to (bsz, n, c, c)
    cidx = np.arange(shape.c)
    g_s_blocks = k_blocks[:, :, cidx, cidx].copy()
    sym = k_blocks + np.swapaxes(k_blocks, 2, 3)
    g_s_blocks -= np.einsum("bncd,bnd->bnc", sym, r_blocks)
    g_s_blocks += (params.omega @ proj_gb[..., None])[..., 0].reshape(
        bsz, shape.n, shape.c
    )

    # Lift Jacobian is the replicator of s0; then the direct logit-shift
    # path adds g_logits on the first node's block.
    su = r_blocks * g_s_blocks
    g_v0 = (su - su.sum(axis=2, keepdims=True) * r_blocks).reshape(-1, shape.N)
    g_v0[:, : shape.c] += g_logits

    gv_blocks = g_v0.reshape(-1, shape.n, shape.c)
    g_pre = (gv_blocks - gv_blocks.mean(axis=2, keepdims=True)).reshape(
        -1, shape.N
    )
    if fmap_kind == "identity":
        g_w, g_bias = None, None
    else:
        g_w = g_pre.T @ xb
        g_bias = g_pre.sum(axis=0)
    return loss, logits, g_w, g_bias, g_omega


def _replicator_stack_dense(r_blocks, shape):
    # (bsz, N, N) block-diagonal replicator matrices from state blocks.
    bsz = r_blocks.shape[0]
    blocks = -r_blocks[:, :, :, None] * r_blocks[:, :, None, :]
    cidx = np.arange(shape.c)
    blocks[:, :, cidx, cidx] += r_blocks
    out = np.zeros((bsz, shape.N, shape.N))
    for i in range(shape.n):
        sl = slice(i * shape.c, (i + 1) * shape.c)
        out[:, sl, sl] = blocks[:, i]
    return out


def train_prior(dataset, config=None):
    """Fit (feature map, Omega) on the training split by SGD.

    Only rows tagged train are ever touched; validation and test rows
    can hold arbitrary content without changing the result. Momentum
    0.9 throughout, weight decay on Omega only; Omega gradients are
    symmetrized so the coupling matrix stays exactly symmetric. The
    prior covariance is drawn from the configured seed and kept fixed.
    Returns a ModelBundle with a per-step loss history attached as
    ``train_history``.
    """
    if config is None:
        config = TrainConfig()
    x_train, y_train = dataset.rows("train")
    m_train = x_train.shape[0]
    if m_train == 0:
        raise ValueError("training split is empty")

    shape = GraphShape(n=config.n_nodes, c=dataset.c)
    ss = np.random.SeedSequence(config.seed)
    init_ss, order_ss, cov_ss = ss.spawn(3)
    rng = np.random.default_rng(init_ss)

    if config.feature_map == "identity":
        if dataset.dim != shape.N:
            raise ValueError("identity feature map needs dim == N")
        weights, bias = None, None
    elif config.feature_map == "linear":
        weights = rng.standard_normal((shape.N, dataset.dim)) / np.sqrt(
            dataset.dim
        )
        bias = np.zeros(shape.N)
    else:
        raise ValueError("unknown feature map kind %r" % (config.feature_map,))
    params = FlowParams(shape, np.zeros((shape.N, shape.N)))

    vel_w = np.zeros_like(weights) if weights is not None else None
    vel_b = np.zeros_like(bias) if bias is not None else None
    vel_o = np.zeros((shape.N, shape.N))

    order_rng = np.random.default_rng(order_ss)
    batch_size = min(config.batch_size, m_train)
    order = order_rng.permutation(m_train)
    cursor = 0
    history = []

    for step in range(config.steps):
        if cursor + batch_size > m_train:
            order = order_rng.permutation(m_train)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        loss, _, g_w, g_bias, g_omega = _batch_loss_grads(
            weights,
            bias,
            params,
            x_train[idx],
            y_train[idx],
            shape,
            config.T,
            config.feature_map,
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(
                "non-finite training loss at step %d (loss=%r)" % (step, loss)
            )
        history.append(loss)
        g_omega = g_omega + config.weight_decay * params.omega
        vel_o = config.momentum * vel_o - config.lr * g_omega
        params.update_omega(params.omega + vel_o)
        if weights is not None:
            vel_w = config.momentum * vel_w - config.lr * g_w
            vel_b = config.momentum * vel_b - config.lr * g_bias
            weights = weights + vel_w
            bias = bias + vel_b

    prior = random_prior_cov(shape, cov_ss)
    bundle = ModelBundle(
        shape=shape,
        feature_map=FeatureMap(config.feature_map, weights, bias),
        params=params,
        prior=prior,
        T=config.T,
        metadata={
            "dataset_sha": dataset.content_hash(),
            "prior_seed": str(config.seed),
            "steps": str(config.steps),
        },
    )
    bundle.train_history = history
    return bundle


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    model,
    features,
    labels,
    mode="deterministic",
    n_points=DEFAULT_N_POINTS,
    threads=None,
):
    """01 error rate of the model on the given rows.

    deterministic argmaxes the forward logits. stochastic_mean argmaxes
    the pushforward mean logits (numerically the same classifier, via
    the moments pipeline). stochastic_expected is the QMC expected 01
    risk under the bundle's active covariance (posterior if present).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no rows to evaluate")
    if mode == "deterministic":
        logits = model.forward_logits(features)
        return float(np.mean(np.argmax(logits, axis=1) != labels))
    factors = model.marginal_factors(features)
    if mode == "stochastic_mean":
        wrong = 0
        for f, y in zip(factors, labels):
            full = np.append(f.mean_hat, -f.mean_hat.sum()) + f.logits_shift
            wrong += int(np.argmax(full) != y)
        return wrong / float(labels.size)
    if mode == "stochastic_expected":
        cov = model.active_cov()
        moments = [moments_from_factor(f, cov) for f in factors]
        est = expected_risk(
            moments,
            labels,
            LossKind.ZERO_ONE,
            n_points=n_points,
            threads=threads,
        )
        return est.value
    raise ValueError("unknown evaluation mode %r" % (mode,))


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------


def _write_array(dirpath, name, arr):
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    fname = name + ".bin"
    with open(os.path.join(dirpath, fname), "wb") as fh:
        fh.write(data)
    shape = ",".join(str(s) for s in np.asarray(arr).shape)
    return "array = %s %s %s %s" % (
        name,
        fname,
        shape,
        hashlib.sha256(data).hexdigest(),
    )


def save_model(model, dirpath):
    """Persist the bundle: manifest.txt plus raw float64 LE arrays."""
    os.makedirs(dirpath, exist_ok=True)
    lines = [
        "format = %s" % _MODEL_FORMAT,
        "n = %d" % model.shape.n,
        "c = %d" % model.shape.c,
        "T = %s" % repr(float(model.T)),
        "feature_map = %s" % model.feature_map.kind,
        "has_posterior = %d" % (1 if model.posterior is not None else 0),
    ]
    for key in sorted(model.metadata):
        lines.append("meta.%s = %s" % (key, model.metadata[key]))
    tensors = [
        ("omega", model.params.omega),
        ("prior_d", model.prior.d),
        ("prior_q", model.prior.q),
    ]
    if model.feature_map.kind == "linear":
        tensors += [
            ("feature_w", model.feature_map.weights),
            ("feature_b", model.feature_map.bias),
        ]
    if model.posterior is not None:
        tensors += [
            ("post_d", model.posterior.d),
            ("post_q", model.posterior.q),
        ]
    for name, arr in tensors:
        lines.append(_write_array(dirpath, name, arr))
    with open(
        os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8", newline="\n"
    ) as fh:
        fh.write("\n".join(lines) + "\n")


def _read_array(dirpath, fname, shape_txt, sha_hex):
    path = os.path.join(dirpath, fname)
    if not os.path.exists(path):
        raise ModelFormatError("missing array file %s" % fname)
    with open(path, "rb") as fh:
        data = fh.read()
    if hashlib.sha256(data).hexdigest() != sha_hex:
        raise ModelFormatError("checksum mismatch for %s" % fname)
    shape = tuple(int(s) for s in shape_txt.split(",") if s)
    arr = np.frombuffer(data, dtype="<f8")
    if arr.size != int(np.prod(shape, initial=1)):
        raise ModelFormatError("array %s size does not match manifest" % fname)
    return arr.reshape(shape).copy()


def load_model(dirpath):
    """Inverse of save_model; verifies every per-array checksum."""
    manifest = os.path.join(dirpath, "manifest.txt")
    if not os.path.exists(manifest):
        raise ModelFormatError("manifest.txt not found in %s" % dirpath)
    fields = {}
    metadata = {}
    arrays = {}
    with open(manifest, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if " = " not in line:
                raise ModelFormatError("malformed manifest line: %r" % raw)
            key, value = line.split(" = ", 1)
            if key == "array":
                parts = value.split()
                if len(parts) != 4:
                    raise ModelFormatError("malformed array entry: %r" % value)
                name, fname, shape_txt, sha_hex = parts
                arrays[name] = _read_array(dirpath, fname, shape_txt, sha_hex)
            elif key.startswith("meta."):
                metadata[key[len("meta."):]] = value
            else:
                fields[key] = value
    if fields.get("format") != _MODEL_FORMAT:
        raise ModelFormatError("unrecognized model format")
    shape = GraphShape(n=int(fields["n"]), c=int(fields["c"]))
    for required in ("omega", "prior_d", "prior_q"):
        if required not in arrays:
            raise ModelFormatError("manifest lacks required array %s" % required)
    kind = fields["feature_map"]
    if kind == "linear":
        if "feature_w" not in arrays or "feature_b" not in arrays:
            raise ModelFormatError("linear feature map arrays missing")
        fmap = FeatureMap("linear", arrays["feature_w"], arrays["feature_b"])
    else:
        fmap = FeatureMap(kind)
    posterior = None
    if int(fields["has_posterior"]):
        if "post_d" not in arrays or "post_q" not in arrays:
            raise ModelFormatError("posterior arrays missing")
        posterior = LowRankCov(arrays["post_d"], arrays["post_q"], shape)
    return ModelBundle(
        shape=shape,
        feature_map=fmap,
        params=FlowParams(shape, arrays["omega"]),
        prior=LowRankCov(arrays["prior_d"], arrays["prior_q"], shape),
        T=float(fields["T"]),
        posterior=posterior,
        metadata=metadata,
    )
