"""Unsupervised window labeler.

An autoencoder compresses each 80-value feature window down to a
12-value latent code, then k-means groups the codes into 12 clusters.
The cluster id becomes the prediction target for the policy network's
auxiliary head. Both models are fit on training windows only and frozen
before any evaluation data is labeled.
"""

import numpy as np

from . import kernels
from .checkpoint import load_container, save_container
from .nn import (
    Adam,
    DenseLayer,
    ShapeMismatch,
    collect_grads,
    collect_params,
    mse_loss,
    zero_grads,
)


class LabelerError(Exception):
    pass


class TooFewSamples(LabelerError):
    pass


class DivergedLoss(LabelerError):
    pass


class TooFewPoints(LabelerError):
    pass


class DegenerateData(LabelerError):
    pass


class AutoencoderConfig:
    """Architecture and training knobs for the window autoencoder."""

    def __init__(
        self,
        input_size=80,
        hidden_sizes=(128, 64, 32),
        latent_size=12,
        learning_rate=0.0000879678,
        batch_size=32,
        max_epochs=100,
        patience=10,
        holdout_fraction=0.1,
    ):
        self.input_size = input_size
        self.hidden_sizes = tuple(hidden_sizes)
        self.latent_size = latent_size
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.holdout_fraction = holdout_fraction

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "hidden_sizes": list(self.hidden_sizes),
            "latent_size": self.latent_size,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "holdout_fraction": self.holdout_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Autoencoder:
    """Symmetric dense autoencoder; decoder mirrors the encoder.

    Hidden layers use ReLU; the latent projection and the reconstruction
    output are linear so codes and outputs are unbounded.
    """

    def __init__(self, config, rng=None):
        self.config = config
        sizes = [config.input_size, *config.hidden_sizes, config.latent_size]
        self.encoder = []
        for i in range(len(sizes) - 1):
            act = "identity" if i == len(sizes) - 2 else "relu"
            self.encoder.append(DenseLayer(sizes[i], sizes[i + 1], act, rng))
        rev = sizes[::-1]
        self.decoder = []
        for i in range(len(rev) - 1):
            act = "identity" if i == len(rev) - 2 else "relu"
            self.decoder.append(DenseLayer(rev[i], rev[i + 1], act, rng))

    @property
    def layers(self):
        return self.encoder + self.decoder

    def encode(self, windows):
        x = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        if x.shape[1] != self.config.input_size:
            raise ShapeMismatch(
                f"expected windows of size {self.config.input_size}, got {x.shape[1]}"
            )
        for layer in self.encoder:
            x = layer.forward(x)
        return x

    def forward(self, windows):
        z = self.encode(windows)
        for layer in self.decoder:
            z = layer.forward(z)
        return z

    def backward(self, dout):
        d = dout
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def reconstruction_mse(self, windows):
        recon = self.forward(windows)
        loss, _ = mse_loss(recon, np.atleast_2d(windows))
        return loss

    def param_blocks(self):
        blocks = {}
        for i, layer in enumerate(self.encoder):
            blocks[f"enc{i}.w"] = layer.w
            blocks[f"enc{i}.b"] = layer.b
        for i, layer in enumerate(self.decoder):
            blocks[f"dec{i}.w"] = layer.w
            blocks[f"dec{i}.b"] = layer.b
        return blocks

    def load_param_blocks(self, blocks):
        for name, target in self.param_blocks().items():
            src = blocks[name]
            if src.shape != target.shape:
                raise ShapeMismatch(f"block {name}: {src.shape} != {target.shape}")
            target[:] = src


def train_autoencoder(windows, config=None, seed=0):
    """Fit the autoencoder with Adam on reconstruction MSE.

    A seeded 10% holdout drives early stopping: training stops when the
    holdout MSE has not improved for `patience` consecutive epochs, and
    the best-scoring parameters seen are restored. Returns the model and
    a per-epoch (train_mse, holdout_mse) history.
    """
    config = config or AutoencoderConfig()
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[1] != config.input_size:
        raise ShapeMismatch(
            f"expected (n, {config.input_size}) windows, got {windows.shape}"
        )
    n = windows.shape[0]
    if n < 2 * config.batch_size:
        raise TooFewSamples(
            f"need at least {2 * config.batch_size} windows, got {n}"
        )

    rng = np.random.default_rng(seed)
    model = Autoencoder(config, rng)
    params = collect_params(model.layers)
    grads = collect_grads(model.layers)
    opt = Adam(params, config.learning_rate)

    n_val = max(1, int(round(config.holdout_fraction * n)))
    perm = rng.permutation(n)
    val_x = windows[perm[:n_val]]
    train_idx = perm[n_val:]

    best_val = np.inf
    best_params = [p.copy() for p in params]
    stale = 0
    history = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(train_idx.shape[0])
        epoch_loss = 0.0
        for start in range(0, order.shape[0], config.batch_size):
            batch = windows[train_idx[order[start : start + config.batch_size]]]
            recon = model.forward(batch)
            loss, drecon = mse_loss(recon, batch)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            zero_grads(model.layers)
            model.backward(drecon)
            opt.step(grads)
            epoch_loss += loss * batch.shape[0]
        train_mse = epoch_loss / train_idx.shape[0]
        val_mse = model.reconstruction_mse(val_x)
        if not np.isfinite(val_mse):
            raise DivergedLoss(f"non-finite holdout loss at epoch {epoch}")
        history.append((train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            for dst, src in zip(best_params, params):
                dst[:] = src
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    for dst, src in zip(params, best_params):
        dst[:] = src
    return model, history


class KMeansModel:
    """Frozen centroids plus fit diagnostics."""

    def __init__(self, centroids, inertia, n_iter, seed):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.inertia = float(inertia)
        self.n_iter = int(n_iter)
        self.seed = int(seed)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _kmeans_pp_init(points, k, rng):
    """Seeded k-means++: spread the initial centroids out proportionally
    to squared distance from the already chosen ones."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining points all coincide with chosen centroids; any
            # pick duplicates, so fall back to a uniform draw
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _repair_empty(points, labels, centroids, counts):
    """Re-seed each empty cluster at the point farthest from its own
    centroid; ties go to the lowest point index."""
    dists = np.sum((points - centroids[labels]) ** 2, axis=1)
    for j in np.flatnonzero(counts == 0):
        idx = int(np.argmax(dists))
        centroids[j] = points[idx]
        dists[idx] = -1.0
    return centroids


def kmeans_fit(points, k=12, seed=0, max_iters=300, tol=1e-8):
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops when assignments repeat, the largest centroid movement drops
    below `tol`, or `max_iters` passes complete. Inertia is checked to
    be non-increasing across iterations; a violation is a bug, not a
    data problem, so it raises.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeMismatch(f"expected 2-D points, got shape {points.shape}")
    n = points.shape[0]
    if n < k:
        raise TooFewPoints(f"need at least {k} points, got {n}")
    if not np.all(np.isfinite(points)):
        raise DegenerateData("points contain non-finite values")
    if np.unique(points, axis=0).shape[0] < k:
        raise DegenerateData(f"fewer than {k} distinct points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    prev_labels = None
    prev_inertia = np.inf
    labels = None
    inertia = np.inf
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, inertia = kernels.kmeans_assign(points, centroids)
        if inertia > prev_inertia * (1 + 1e-12) + 1e-12:
            raise LabelerError(
                f"inertia increased at iteration {n_iter}: "
                f"{prev_inertia} -> {inertia}"
            )
        prev_inertia = inertia
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        new_centroids, counts = kernels.kmeans_update(points, labels, k)
        if np.any(counts == 0):
            new_centroids = _repair_empty(points, labels, new_centroids, counts)
        shift = np.max(np.abs(new_centroids - centroids))
        centroids = new_centroids
        if shift < tol:
            labels, inertia = kernels.kmeans_assign(points, centroids)
            break

    for a in range(k):
        for b in range(a + 1, k):
            if np.array_equal(centroids[a], centroids[b]):
                raise DegenerateData(f"centroids {a} and {b} collapsed together")
    return KMeansModel(centroids, inertia, n_iter, seed)


def kmeans_assign(model, points):
    """Nearest-centroid label(s) under squared Euclidean distance; ties
    break toward the lowest centroid index."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != model.dim:
        raise ShapeMismatch(
            f"point dimension {pts.shape[1]} != centroid dimension {model.dim}"
        )
    labels, _ = kernels.kmeans_assign(pts, model.centroids)
    return int(labels[0]) if single else labels


def label_dataset(ae, km, windows):
    """Encode windows and assign cluster labels; empty input stays empty."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if windows.shape[0] == 0 or windows.size == 0:
        return np.zeros(0, dtype=np.int64)
    codes = ae.encode(windows)
    return kmeans_assign(km, codes)


def silhouette_score(points, labels):
    """Mean silhouette over all points, the plain O(n^2) definition:
    (nearest-other-cluster mean distance - own-cluster mean distance)
    over the max of the two. Single-member clusters score 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = points.shape[0]
    if n < 2 or len(np.unique(labels)) < 2:
        raise DegenerateData("silhouette needs >= 2 points in >= 2 clusters")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    uniq = np.unique(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        own_count = own.sum() - 1
        if own_count == 0:
            scores[i] = 0.0
            continue
        a = dist[i][own].sum() / own_count
        b = np.inf
        for lab in uniq:
            if lab == labels[i]:
                continue
            mask = labels == lab
            b = min(b, dist[i][mask].mean())
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def save_autoencoder(path, model):
    save_container(
        path,
        {"kind": "autoencoder", "config": model.config.to_dict()},
        model.param_blocks(),
    )


def load_autoencoder(path):
    meta, blocks = load_container(path)
    if meta.get("kind") != "autoencoder":
        raise LabelerError(f"{path}: not an autoencoder checkpoint")
    model = Autoencoder(AutoencoderConfig.from_dict(meta["config"]))
    model.load_param_blocks(blocks)
    return model


def save_kmeans(path, model):
    meta = {
        "kind": "kmeans",
        "k": model.k,
        "dim": model.dim,
        "seed": model.seed,
        "inertia": model.inertia,
        "n_iter": model.n_iter,
    }
    save_container(path, meta, {"centroids": model.centroids})


def load_kmeans(path):
    meta, blocks = load_container(path)
    if meta.get("kind") != "kmeans":
        raise LabelerError(f"{path}: not a k-means model file")
    return KMeansModel(
        blocks["centroids"], meta["inertia"], meta["n_iter"], meta["seed"]
    )


def write_labels_csv(path, end_indices, labels):
    lines = ["window_end_index,label"]
    for idx, lab in zip(end_indices, labels):
        lines.append(f"{int(idx)},{int(lab)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_labels_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = [ln.strip() for ln in fh if ln.strip()]
    if not rows or rows[0] != "window_end_index,label":
        raise LabelerError(f"{path}: missing label header")
    idx = np.empty(len(rows) - 1, dtype=np.int64)
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        a, b = row.split(",")
        idx[i] = int(a)
        labels[i] = int(b)
    return idx, labels
