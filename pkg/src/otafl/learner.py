"""The federated learning task: a small non-convex MLP classifier with
L2-regularized cross-entropy loss, mini-batch local gradients clipped to
g_max, a label-skewed data partition, and the plain SGD update rule.

The model is a fully connected net with ReLU hidden layers operating on
a flat parameter vector; an empty ``hidden`` tuple degrades to linear
softmax regression, which the tests use for closed-form oracles.
"""

from dataclasses import dataclass

import numpy as np

from . import rng

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ObjectiveSpec:
    """Architecture and loss hyper-parameters; determines the dimension d."""

    input_dim: int
    hidden: tuple = (32,)
    n_classes: int = 10
    reg: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.n_classes < 2 or self.reg < 0:
            raise ValueError("invalid objective spec")

    @property
    def layer_sizes(self) -> list:
        return [self.input_dim, *self.hidden, self.n_classes]

    @property
    def dim(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class LocalDataset:
    """One device's shard: features, labels, and indices into the master set."""

    x: np.ndarray
    y: np.ndarray
    owner: int
    indices: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.x) == 0:
            raise ValueError("dataset must be non-empty with matching features and labels")

    def __len__(self) -> int:
        return len(self.y)


def init_params(spec: ObjectiveSpec, seed: int) -> np.ndarray:
    """Seeded Gaussian init scaled by 1/sqrt(fan-in); biases start at zero."""
    gen = rng.stream(seed, purpose=rng.INIT)
    sizes = spec.layer_sizes
    parts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        parts.append(gen.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _unpack(spec: ObjectiveSpec, w: np.ndarray):
    """Views of the flat parameter vector as per-layer (W, b) pairs."""
    sizes = spec.layer_sizes
    layers = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weight = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def _forward(spec: ObjectiveSpec, w: np.ndarray, x: np.ndarray):
    layers = _unpack(spec, w)
    activations = [np.atleast_2d(x)]
    for weight, bias in layers[:-1]:
        activations.append(np.maximum(activations[-1] @ weight + bias, 0.0))
    weight, bias = layers[-1]
    logits = activations[-1] @ weight + bias
    return logits, activations, layers


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ObjectiveSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean sample loss (cross-entropy + (reg/2)||w||^2) and its gradient."""
    logits, activations, layers = _forward(spec, w, x)
    n = logits.shape[0]
    log_p = _log_softmax(logits)
    loss = -log_p[np.arange(n), y].mean() + 0.5 * spec.reg * float(w @ w)

    delta = np.exp(log_p)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad = np.empty_like(w)
    offset = len(w)
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        g_b = delta.sum(axis=0)
        g_w = activations[i].T @ delta
        offset -= g_b.size
        grad[offset:offset + g_b.size] = g_b
        offset -= g_w.size
        grad[offset:offset + g_w.size] = g_w.ravel()
        if i > 0:
            delta = (delta @ weight.T) * (activations[i] > 0)
    grad += spec.reg * w
    return loss, grad


def loss_value(spec: ObjectiveSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    logits, _, _ = _forward(spec, w, x)
    log_p = _log_softmax(logits)
    return float(-log_p[np.arange(logits.shape[0]), y].mean() + 0.5 * spec.reg * (w @ w))


def accuracy(spec: ObjectiveSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    logits, _, _ = _forward(spec, w, x)
    return float(np.mean(logits.argmax(axis=1) == y))


def clip_to_norm(g: np.ndarray, g_max: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > g_max:
        return g * (g_max / norm)
    return g


def local_gradient(spec: ObjectiveSpec, w: np.ndarray, dataset: LocalDataset,
                   batch_size: int, g_max: float, generator=None) -> np.ndarray:
    """Mini-batch gradient (uniform, without replacement), clipped to g_max.

    batch_size == len(dataset) gives the deterministic full-batch gradient
    and removes mini-batch variance.
    """
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}]")
    if batch_size == n:
        x, y = dataset.x, dataset.y
    else:
        if generator is None:
            raise ValueError("mini-batch sampling needs a generator")
        idx = generator.choice(n, size=batch_size, replace=False)
        x, y = dataset.x[idx], dataset.y[idx]
    _, grad = loss_and_grad(spec, w, x, y)
    return clip_to_norm(grad, g_max)


def global_gradient(spec: ObjectiveSpec, w: np.ndarray, datasets: list, g_max: float) -> np.ndarray:
    """Uniform average of the clipped full-batch local gradients."""
    grads = [local_gradient(spec, w, ds, len(ds), g_max) for ds in datasets]
    return np.mean(grads, axis=0)


def sgd_step(w: np.ndarray, estimate: np.ndarray, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError("step size must be positive")
    return w - eta * np.asarray(estimate, dtype=float)


def objective_value(spec: ObjectiveSpec, w: np.ndarray, datasets: list, weights=None) -> float:
    """Weighted sum of local full-dataset losses; uniform weights by default."""
    if weights is None:
        weights = np.full(len(datasets), 1.0 / len(datasets))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(datasets),) or np.any(weights < -SIMPLEX_TOL) \
            or abs(weights.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("weights must lie on the probability simplex")
    return float(sum(p * loss_value(spec, w, ds.x, ds.y) for p, ds in zip(weights, datasets)))


def kappa_from_gradients(local_grads: np.ndarray) -> float:
    """Root mean squared deviation of local gradients from their average."""
    grads = np.asarray(local_grads, dtype=float)
    mean = grads.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((grads - mean) ** 2, axis=1))))


def estimate_kappa(spec: ObjectiveSpec, w_ref: np.ndarray, datasets: list, g_max: float) -> float:
    """Gradient-dissimilarity level at w_ref from clipped full-batch gradients.

    Bounded by 2*g_max by the triangle inequality, matching the worst case
    the convergence bound allows.
    """
    grads = np.stack([local_gradient(spec, w_ref, ds, len(ds), g_max) for ds in datasets])
    return kappa_from_gradients(grads)


def partition_noniid(y: np.ndarray, n_devices: int, labels_per_device: int = 2,
                     seed: int = 0):
    """Label-skewed split: each device holds exactly ``labels_per_device``
    labels and each label appears on at most two devices.

    Returns (assignments, label_map): per-device sample index arrays and the
    per-device label tuples.  All devices end up with the same shard size
    (the minimum across devices; surplus samples are dropped when the label
    multiplicities are uneven).
    """
    y = np.asarray(y)
    labels = np.unique(y)
    n_labels = labels.size
    slots = n_devices * labels_per_device
    if labels_per_device != 2:
        raise ValueError("this partition supports exactly two labels per device")
    if n_labels > slots:
        raise ValueError(
            f"{n_labels} labels cannot be covered by {n_devices} devices "
            f"holding {labels_per_device} labels each")
    if slots > 2 * n_labels:
        raise ValueError(
            f"{slots} label slots exceed the capacity of {n_labels} labels "
            "at multiplicity <= 2 per label")
    if n_labels < labels_per_device:
        raise ValueError("need at least as many labels as labels per device")

    gen = rng.stream(seed, purpose=rng.DATA)
    order = gen.permutation(n_labels)
    multiplicity = np.ones(n_labels, dtype=int)
    extra = slots - n_labels  # this many labels get a second device
    multiplicity[order[:extra]] = 2

    # Deal the two slot passes offset by n_devices: a label's two copies are
    # adjacent in the slot list, so no device sees the same label twice.
    slot_labels = np.repeat(np.arange(n_labels), multiplicity)
    label_map = [(labels[slot_labels[m]], labels[slot_labels[m + n_devices]])
                 for m in range(n_devices)]

    per_label_indices = {}
    for li, label in enumerate(labels):
        idx = np.flatnonzero(y == label)
        idx = idx[gen.permutation(idx.size)]
        per_label_indices[label] = np.array_split(idx, multiplicity[li])

    next_part = {label: 0 for label in labels}
    assignments = []
    for m in range(n_devices):
        chunks = []
        for label in label_map[m]:
            chunks.append(per_label_indices[label][next_part[label]])
            next_part[label] += 1
        assignments.append(np.sort(np.concatenate(chunks)))

    shard = min(len(a) for a in assignments)
    equalized = []
    for m, idx in enumerate(assignments):
        if len(idx) > shard:
            keep = gen.choice(len(idx), size=shard, replace=False)
            idx = np.sort(idx[keep])
        equalized.append(idx)
    return equalized, label_map


def build_local_datasets(x: np.ndarray, y: np.ndarray, assignments: list) -> list:
    return [LocalDataset(x=x[idx], y=y[idx], owner=m, indices=np.asarray(idx))
            for m, idx in enumerate(assignments)]


def make_gaussian_mixture(n_classes: int, feature_dim: int, per_class: int,
                          mean_scale: float, seed: int):
    """Synthetic classification task: one unit-covariance Gaussian per class."""
    gen = rng.stream(seed, device=1, purpose=rng.DATA)
    means = mean_scale * gen.standard_normal((n_classes, feature_dim))
    x = np.concatenate([means[c] + gen.standard_normal((per_class, feature_dim))
                        for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), per_class)
    return x, y


def split_train_test(x: np.ndarray, y: np.ndarray, test_fraction: float, seed: int):
    """Stratified global holdout; the test set is never partitioned to devices."""
    gen = rng.stream(seed, device=2, purpose=rng.DATA)
    test_idx = []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(gen.permutation(idx)[:n_test])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(y), dtype=bool)
    train_mask[test_idx] = False
    train_idx = np.flatnonzero(train_mask)
    return (x[train_idx], y[train_idx]), (x[test_idx], y[test_idx])


def load_feature_label_file(path: str):
    """Load an external dataset: .npz with arrays x and y, or CSV whose last
    column is the integer label."""
    if str(path).endswith(".npz"):
        data = np.load(path)
        return np.asarray(data["x"], dtype=float), np.asarray(data["y"], dtype=int)
    raw = np.loadtxt(path, delimiter=",")
    return raw[:, :-1].astype(float), raw[:, -1].astype(int)
