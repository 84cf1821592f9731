"""Back-propagatable patch-local CRF with a learned freeform pairwise potential.

The pairwise potential between a pixel pair is an MLP over (feature difference,
spatial distance). Inference is multi-iteration mean-field; user scribbles can
be enforced as exact 0/1 probabilities after every iteration, with gradients
blocked at the constrained pixels.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .geodesic import ImageGrid, ScribbleSet
from .tensorcore import ConfigError, DiffTensor, ShapeError

PRETRAIN_SIGMA = 0.08
PRETRAIN_OMEGA = 0.5

HIDDEN_SIZES = (32, 16)


@dataclass
class PairwiseNet:
    """MLP mapping (feature difference, pixel distance) to a potential value.

    Layer widths are fixed at (F+1) -> 32 -> 16 -> 1 with ReLU hidden
    activations and a linear output; the output may be negative.
    """

    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor
    w3: DiffTensor
    b3: DiffTensor

    def __post_init__(self):
        h1, h2 = HIDDEN_SIZES
        if self.w1.shape[1] != h1 or self.w2.shape != (h1, h2) or self.w3.shape != (h2, 1):
            raise ConfigError(
                f"pairwise net layers must be (F+1, {h1}, {h2}, 1), got "
                f"{self.w1.shape} {self.w2.shape} {self.w3.shape}")

    @property
    def feature_dim(self):
        return self.w1.shape[0] - 1

    def parameters(self):
        return {"pairwise.w1": self.w1, "pairwise.b1": self.b1,
                "pairwise.w2": self.w2, "pairwise.b2": self.b2,
                "pairwise.w3": self.w3, "pairwise.b3": self.b3}

    def forward(self, x: DiffTensor) -> DiffTensor:
        h = tc.dense(x, self.w1, self.b1, activation="relu")
        h = tc.dense(h, self.w2, self.b2, activation="relu")
        return tc.dense(h, self.w3, self.b3)

    def forward_plain(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward on raw arrays, for inference-only evaluation."""
        h = np.maximum(x @ self.w1.values + self.b1.values, 0.0)
        h = np.maximum(h @ self.w2.values + self.b2.values, 0.0)
        return h @ self.w3.values + self.b3.values


def make_pairwise_net(feature_dim: int, rng) -> PairwiseNet:
    h1, h2 = HIDDEN_SIZES
    dims = [(feature_dim + 1, h1), (h1, h2), (h2, 1)]
    ws = [tc.tensor(rng.uniform(-math.sqrt(6.0 / i), math.sqrt(6.0 / i), size=(i, o)))
          for i, o in dims]
    bs = [tc.tensor(np.zeros(o)) for _, o in dims]
    return PairwiseNet(ws[0], bs[0], ws[1], bs[1], ws[2], bs[2])


def pairwise_potential(net: PairwiseNet, fdiff, dist: float) -> float:
    """Evaluate the potential for one pixel pair."""
    fdiff = np.atleast_1d(np.asarray(fdiff, dtype=np.float64))
    if fdiff.shape != (net.feature_dim,):
        raise ShapeError(f"feature difference {fdiff.shape}, expected ({net.feature_dim},)")
    if dist <= 0:
        raise ValueError("pixel distance must be positive")
    x = np.concatenate([fdiff, [dist]])[None, :]
    return float(net.forward(DiffTensor(x)).values[0, 0])


def contrast_target(fdiff, dist, sigma=PRETRAIN_SIGMA, omega=PRETRAIN_OMEGA):
    """Contrast-sensitive initialization target: exp(-|f|^2/(2 sigma^2 F)) * omega/d."""
    fdiff = np.atleast_2d(fdiff)
    f_dim = fdiff.shape[1]
    sq = (fdiff ** 2).sum(axis=1)
    return np.exp(-sq / (2.0 * sigma * sigma * f_dim)) * (omega / np.asarray(dist))


def generate_pretrain_set(feature_dim: int, n: int = 100_000, rng=None):
    """Sample (x, y) pairs for pairwise-net initialization.

    Feature-difference components are Normal(0, 2), the distance component is
    Uniform(0, 8); targets come from the contrast-sensitive function.
    """
    if feature_dim < 1:
        raise ConfigError("feature_dim must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    x = np.empty((n, feature_dim + 1))
    x[:, :feature_dim] = rng.normal(0.0, 2.0, size=(n, feature_dim))
    x[:, feature_dim] = rng.uniform(0.0, 8.0, size=n)
    y = contrast_target(x[:, :feature_dim], x[:, feature_dim])
    return x, y


def structured_pairwise_init(feature_dim: int, rng) -> PairwiseNet:
    """Piecewise-linear warm start reproducing the contrast-sensitive target.

    The first layer lays hinge units along each feature axis and along the
    distance axis (geometric node spacing down to ~1e-3); their combination
    approximates log of the target, which the second layer exponentiates with
    another piecewise-linear ladder. SGD then only has to polish residuals,
    which is what makes the steep omega/d spike near d = 0 reachable.
    """
    if feature_dim > 8:
        return make_pairwise_net(feature_dim, rng)
    knots_per_channel = max(2, 8 // feature_dim)
    f_knots = np.concatenate([[0.0], np.geomspace(0.02, 0.55, knots_per_channel - 1)])
    d_nodes = 8.0 * 0.5 ** np.arange(14)

    w1 = np.zeros((feature_dim + 1, 32))
    b1 = np.zeros(32)
    col = 0
    f_cols = []
    for c in range(feature_dim):
        for i, th in enumerate(f_knots):
            w1[c, col] = 1.0
            b1[col] = -th
            f_cols.append((i, col))
            col += 1
            w1[c, col] = -1.0
            b1[col] = -th
            f_cols.append((i, col))
            col += 1
    d_cols = []
    for dj in d_nodes:
        w1[feature_dim, col] = -1.0 / dj
        b1[col] = 1.0
        d_cols.append(col)
        col += 1
    while col < 32:
        w1[:, col] = rng.normal(0.0, 0.2, feature_dim + 1)
        b1[col] = rng.uniform(-1.0, 1.0)
        col += 1

    # slope increments of the per-channel quadratic exponent term
    def quad(t):
        return t * t / (2.0 * PRETRAIN_SIGMA ** 2 * feature_dim)

    ext = np.append(f_knots, f_knots[-1] * 1.6)
    slopes = (quad(ext[1:]) - quad(ext[:-1])) / (ext[1:] - ext[:-1])
    pcoef = np.diff(np.insert(slopes, 0, 0.0))

    # hinge combination interpolating log(omega/d) at the geometric nodes;
    # basis j is zero at its own node, so the system is shifted triangular
    nd = len(d_nodes)
    interp = np.zeros((nd - 1, nd - 1))
    for r in range(1, nd):
        for j in range(nd - 1):
            interp[r - 1, j] = max(0.0, 1.0 - d_nodes[r] / d_nodes[j])
    log_at_8 = math.log(PRETRAIN_OMEGA / 8.0)
    bcoef = np.linalg.solve(interp, np.log(PRETRAIN_OMEGA / d_nodes[1:]) - log_at_8)
    bcoef = np.append(bcoef, 0.0)

    y_nodes = np.array([0.02, 0.045, 0.1, 0.22, 0.5, 1.1, 2.4, 5.2, 11.0, 24.0,
                        52.0, 110.0, 230.0, 480.0, 1000.0])
    s_nodes = np.log(y_nodes)
    w2 = np.zeros((32, 16))
    b2 = np.zeros(16)
    w3 = np.zeros((16, 1))
    for u, sj in enumerate(s_nodes):
        for i, cc in f_cols:
            w2[cc, u] = -pcoef[i]
        for cc, bc in zip(d_cols, bcoef):
            w2[cc, u] = bc
        b2[u] = log_at_8 - sj
    exp_slopes = (y_nodes[1:] - y_nodes[:-1]) / (s_nodes[1:] - s_nodes[:-1])
    increments = np.diff(np.insert(exp_slopes, 0, 0.0))
    w3[:len(increments), 0] = increments
    return PairwiseNet(tc.tensor(w1), tc.tensor(b1), tc.tensor(w2), tc.tensor(b2),
                       tc.tensor(w3), tc.tensor(np.zeros(1)))


DEFAULT_PRETRAIN_SGD = tc.SgdConfig(learning_rate=5e-5, momentum=0.9, weight_decay=0.0,
                                    lr_halving_period_iters=700, minibatch=1024)
PRETRAIN_WARMUP_ITERS = 175


def pretrain_pairwise_net(samples, sgd: tc.SgdConfig = None, rng=None,
                          epochs: int = 24, holdout_fraction: float = 0.1):
    """Fit a pairwise net to the sampled target function with SGD.

    Starts from the structured warm start and polishes with minibatch SGD
    (linear lr warmup, then the config's halving schedule). Returns
    (net, report); report carries per-epoch train losses and the final MSE on
    the held-out tail split. Raises on divergence.
    """
    x, y = samples
    n = len(y)
    if n < 10:
        raise ValueError("need at least 10 samples")
    sgd = DEFAULT_PRETRAIN_SGD if sgd is None else sgd
    rng = np.random.default_rng() if rng is None else rng
    n_hold = max(1, int(n * holdout_fraction))
    x_train, y_train = x[:-n_hold], y[:-n_hold]
    x_hold, y_hold = x[-n_hold:], y[-n_hold:]

    feature_dim = x.shape[1] - 1
    net = structured_pairwise_init(feature_dim, rng)
    params = list(net.parameters().values())
    cfg = dataclasses.replace(sgd)
    opt = tc.Sgd(params, cfg)

    n_train = len(y_train)
    bs = sgd.minibatch
    iteration = 0
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n_train)
        total = 0.0
        count = 0
        for at in range(0, n_train - bs + 1, bs):
            idx = order[at:at + bs]
            pred = net.forward(DiffTensor(x_train[idx]))
            loss = tc.mse_loss(pred, y_train[idx, None])
            if not np.isfinite(loss.values):
                raise tc.NonFiniteError(f"pretraining diverged at iteration {iteration}")
            opt.zero_grad()
            tc.backward(loss)
            warmup = min(1.0, (iteration + 1) / PRETRAIN_WARMUP_ITERS)
            cfg.learning_rate = sgd.learning_rate * warmup
            opt.step(iteration)
            iteration += 1
            total += float(loss.values) * bs
            count += bs
        epoch_losses.append(total / count)

    holdout_mse = float(np.mean((net.forward_plain(x_hold)[:, 0] - y_hold) ** 2))
    report = {"epoch_losses": epoch_losses, "holdout_mse": holdout_mse,
              "iterations": iteration}
    return net, report


# ---------------------------------------------------------------------------
# mean-field inference


@dataclass
class CompatibilityMatrix:
    """Learnable L x L label compatibility, initialized to [a != b]."""

    mu: DiffTensor

    @classmethod
    def iverson(cls, label_count: int):
        m = 1.0 - np.eye(label_count)
        return cls(tc.tensor(m))


@dataclass
class CrfConfig:
    label_count: int = 2
    patch_extents: tuple = (7, 7)
    iterations: int = 5

    def __post_init__(self):
        self.patch_extents = tuple(int(p) for p in self.patch_extents)
        if self.label_count < 2:
            raise ConfigError("need at least 2 labels")
        if self.iterations < 1:
            raise ConfigError("mean-field iteration count must be >= 1")
        if any(p < 1 or p % 2 == 0 for p in self.patch_extents):
            raise ConfigError(f"patch extents must be odd, got {self.patch_extents}")


def patch_offsets(patch_extents, spacing=(1.0, 1.0)):
    """(dy, dx) offsets of the patch around its center, self excluded, with
    spacing-scaled Euclidean distances."""
    ph, pw = patch_extents
    offs, dists = [], []
    for dy in range(-(ph // 2), ph // 2 + 1):
        for dx in range(-(pw // 2), pw // 2 + 1):
            if dy == 0 and dx == 0:
                continue
            offs.append((dy, dx))
            dists.append(math.hypot(dy * spacing[0], dx * spacing[1]))
    return offs, np.array(dists)


def _layer1(xc, w1v, b1v):
    # outer-product form: the tall-skinny GEMM shape is slow in BLAS
    z1 = np.multiply.outer(xc[:, 0], w1v[0])
    for c in range(1, xc.shape[1]):
        z1 += np.multiply.outer(xc[:, c], w1v[c])
    z1 += b1v
    return z1


def mlp_on_constant(net: PairwiseNet, x: np.ndarray, chunk: int = 1024) -> DiffTensor:
    """Pairwise-net forward over a constant [N, F+1] batch, chunked so every
    intermediate stays cache-resident; the backward pass recomputes the chunk
    activations instead of storing them. Gradients flow to the net parameters
    only (the input is a constant of the graph)."""
    n = x.shape[0]
    w1v, b1v = net.w1.values, net.b1.values
    w2v, b2v = net.w2.values, net.b2.values
    w3v, b3v = net.w3.values, net.b3.values
    out_vals = np.empty((n, 1))
    for at in range(0, n, chunk):
        xc = x[at:at + chunk]
        h1 = np.maximum(_layer1(xc, w1v, b1v), 0.0)
        h2 = np.maximum(h1 @ w2v + b2v, 0.0)
        out_vals[at:at + chunk] = h2 @ w3v + b3v
    parents = (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3)
    out = DiffTensor(out_vals, parents)

    def back():
        g_all = out.grad
        dw1 = np.zeros_like(w1v)
        db1 = np.zeros_like(b1v)
        dw2 = np.zeros_like(w2v)
        db2 = np.zeros_like(b2v)
        dw3 = np.zeros_like(w3v)
        db3 = np.zeros_like(b3v)
        for at in range(0, n, chunk):
            xc = x[at:at + chunk]
            g = g_all[at:at + chunk]
            z1 = _layer1(xc, w1v, b1v)
            h1 = np.maximum(z1, 0.0)
            z2 = h1 @ w2v + b2v
            h2 = np.maximum(z2, 0.0)
            dw3 += h2.T @ g
            db3 += g.sum(axis=0)
            gz2 = (g @ w3v.T)
            gz2 *= z2 > 0.0
            dw2 += h1.T @ gz2
            db2 += gz2.sum(axis=0)
            gz1 = gz2 @ w2v.T
            gz1 *= z1 > 0.0
            for c in range(xc.shape[1]):
                dw1[c] += xc[:, c] @ gz1
            db1 += gz1.sum(axis=0)
        net.w1._acc(dw1, own=True)
        net.b1._acc(db1, own=True)
        net.w2._acc(dw2, own=True)
        net.b2._acc(db2, own=True)
        net.w3._acc(dw3, own=True)
        net.b3._acc(db3, own=True)

    out._backward = back
    return out


def _as_feature_array(features):
    if isinstance(features, ImageGrid):
        return features.values, features.spacing
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr, (1.0, 1.0)


def pairwise_values(net: PairwiseNet, features, patch_extents) -> tuple:
    """Potential maps f[o, y, x] for every patch offset o, as a graph node.

    The MLP input for offset o at pixel i is (feat[i] - feat[i + o], |o|);
    values at pixels whose neighbor falls outside the image are never used
    because the shifted Q there is zero.
    """
    feats, spacing = _as_feature_array(features)
    f_dim, H, W = feats.shape
    if f_dim != net.feature_dim:
        raise ShapeError(f"feature dim {f_dim} vs net input {net.feature_dim}")
    offs, dists = patch_offsets(patch_extents, spacing)
    n_off = len(offs)
    my = max(abs(dy) for dy, _ in offs)
    mx = max(abs(dx) for _, dx in offs)
    fpad = tc._pad_zeros(feats, my, mx)
    x = np.empty((n_off, H, W, f_dim + 1))
    for o, (dy, dx) in enumerate(offs):
        view = fpad[:, my + dy:my + dy + H, mx + dx:mx + dx + W]
        x[o, :, :, :f_dim] = np.moveaxis(feats - view, 0, -1)
        x[o, :, :, f_dim] = dists[o]
    flat = mlp_on_constant(net, x.reshape(n_off * H * W, f_dim + 1))
    return tc.reshape(flat, (n_off, H, W)), offs


def _constraint_list(constraints: ScribbleSet, label_count: int):
    pairs = [(p, 1) for p in sorted(constraints.foreground)]
    pairs += [(p, 0) for p in sorted(constraints.background)]
    for _, lab in pairs:
        if lab >= label_count:
            raise ConfigError(f"scribble label {lab} outside label set")
    return pairs


def mean_field_iterate(logits: DiffTensor, features, net: PairwiseNet,
                       mu: CompatibilityMatrix, cfg: CrfConfig,
                       constraints: ScribbleSet = None) -> DiffTensor:
    """Differentiable mean-field refinement of per-pixel label scores.

    The unary potential is the negated logit, so Q0 = softmax(logits). Each of
    the cfg.iterations steps runs message passing over the patch neighborhood,
    the compatibility transform, re-adds the unary term, and renormalizes.
    When constraints are given, scribbled pixels are overwritten to exact 0/1
    after every iteration and their gradients are blocked.
    """
    L = logits.shape[0]
    if L != cfg.label_count:
        raise ShapeError(f"logits have {L} channels, config says {cfg.label_count}")
    if constraints is not None:
        constraints.check_bounds(logits.shape[1:])
    pinned = None
    if constraints is not None and not constraints.is_empty():
        pinned = _constraint_list(constraints, L)

    f_vals, offs = pairwise_values(net, features, cfg.patch_extents)
    q = tc.softmax_channels(logits)
    for _ in range(cfg.iterations):
        msg = tc.patch_messages(f_vals, q, offs)
        phi = tc.compat_transform(mu.mu, msg)
        q = tc.softmax_channels(tc.sub(logits, phi))
        if pinned:
            q = tc.hard_label_overwrite(q, pinned)
    return q


def brute_force_meanfield_oracle(logits: np.ndarray, features, net: PairwiseNet,
                                 mu: np.ndarray, cfg: CrfConfig,
                                 constraints: ScribbleSet = None) -> np.ndarray:
    """Literal nested-loop mean-field evaluation for tiny instances (<= 64 px).

    Shares only the pairwise-net weights with the fast path; all message and
    update arithmetic is recomputed directly from the update equations.
    """
    L, H, W = logits.shape
    if H * W > 64:
        raise ValueError("oracle instance too large")
    feats, spacing = _as_feature_array(features)
    offs, dists = patch_offsets(cfg.patch_extents, spacing)

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    pinned = _constraint_list(constraints, L) if constraints and not constraints.is_empty() else []

    q = np.zeros((H, W, L))
    for y in range(H):
        for x in range(W):
            q[y, x] = softmax(logits[:, y, x])
    for _ in range(cfg.iterations):
        q_prev = q.copy()
        for y in range(H):
            for x in range(W):
                phi = np.zeros(L)
                for (dy, dx), d in zip(offs, dists):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < H and 0 <= nx < W):
                        continue
                    fdiff = feats[:, y, x] - feats[:, ny, nx]
                    f = net.forward_plain(np.concatenate([fdiff, [d]])[None, :])[0, 0]
                    for l in range(L):
                        for lp in range(L):
                            phi[l] += mu[l, lp] * f * q_prev[ny, nx, lp]
                q[y, x] = softmax(logits[:, y, x] - phi)
        for (py, px), lab in pinned:
            q[py, px, :] = 0.0
            q[py, px, lab] = 1.0
    return np.moveaxis(q, -1, 0)
