"""Classifier heads over extracted spike features.

Two heads are provided: a two-layer fully connected sigmoid network trained
with mini-batch gradient descent, and a reward-modulated plasticity head
whose weights live in [0, 1] and move by w(1-w)-scaled steps gated by running
hit/miss ratios.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

FEATURE_MAGIC = b"FMAT"
HEAD_MAGIC = b"SKHD"
HEAD_VERSION = 1
HEAD_TAG_FCN = 1
HEAD_TAG_RSTDP = 2


@dataclass(eq=False)
class FeatureMatrix:
    """Dense (images x features) matrix with a class label per row."""

    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("feature values must be 2-D")
        if self.labels.shape != (self.values.shape[0],):
            raise ValueError("one label per row required")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Two-layer fully connected head (sigmoid outputs, backprop)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FcnHead:
    weights: np.ndarray           # (n_out, n_in)
    biases: np.ndarray            # (n_out,)
    cost: str = "cross_entropy"   # or "quadratic"
    eta0: float = 0.1
    eta_decay: float = 1.007
    lam: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.cost not in ("cross_entropy", "quadratic"):
            raise ValueError(f"unknown cost {self.cost!r}")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def eta(self, epoch: int) -> float:
        return self.eta0 / self.eta_decay**epoch

    def copy(self) -> "FcnHead":
        return FcnHead(self.weights.copy(), self.biases.copy(), self.cost,
                       self.eta0, self.eta_decay, self.lam)


def init_fcn_head(n_in: int, n_out: int, rng: np.random.Generator,
                  **kwargs) -> FcnHead:
    """Weights ~ N(0, 1/sqrt(n_in)), biases ~ N(0, 1)."""
    w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
    b = rng.normal(0.0, 1.0, size=n_out)
    return FcnHead(w, b, **kwargs)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def fcn_forward(head: FcnHead, x: np.ndarray) -> np.ndarray:
    """Sigmoid class scores for one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.n_in:
        raise ValueError(f"feature length {x.shape[-1]} != n_in {head.n_in}")
    return expit(x @ head.weights.T + head.biases)


def fcn_predict(head: FcnHead, x: np.ndarray) -> np.ndarray:
    return np.argmax(fcn_forward(head, x), axis=-1)


def fcn_cost(head: FcnHead, x: np.ndarray, y: np.ndarray, n_total: int) -> float:
    """Mean cost over a batch plus the lam/(2n) L2 penalty."""
    a = fcn_forward(head, x)
    m = x.shape[0]
    if head.cost == "quadratic":
        data = 0.5 * np.sum((a - y) ** 2) / m
    else:
        eps = 1e-312  # guards log(0); saturation this deep never occurs in training
        data = -np.sum(y * np.log(a + eps) + (1 - y) * np.log(1 - a + eps)) / m
    reg = 0.5 * head.lam / n_total * np.sum(head.weights**2)
    return float(data + reg)


def fcn_gradients(head: FcnHead, x: np.ndarray, y: np.ndarray,
                  n_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of ``fcn_cost`` w.r.t. weights and biases.

    For the quadratic cost the output error is (a - y) * sigma'(z); the
    cross-entropy cost cancels the sigma' factor and leaves (a - y).
    """
    z = x @ head.weights.T + head.biases
    a = expit(z)
    m = x.shape[0]
    if head.cost == "quadratic":
        delta = (a - y) * a * (1.0 - a)
    else:
        delta = a - y
    grad_w = delta.T @ x / m + head.lam / n_total * head.weights
    grad_b = delta.mean(axis=0)
    return grad_w, grad_b


def fcn_train_epoch(head: FcnHead, data: FeatureMatrix, batch: int, epoch: int,
                    rng: np.random.Generator, n_total: int | None = None) -> float:
    """One epoch of mini-batch gradient descent; returns post-epoch accuracy.

    The learning rate follows eta0 / decay^epoch and the weight update
    includes the L2 term scaled by lam/n over the full training-set size.
    """
    if data.n_rows == 0:
        raise ValueError("empty training data")
    n = n_total if n_total is not None else data.n_rows
    y = one_hot(data.labels, head.n_out)
    order = rng.permutation(data.n_rows)
    eta = head.eta(epoch)
    for start in range(0, data.n_rows, batch):
        idx = order[start:start + batch]
        gw, gb = fcn_gradients(head, data.values[idx], y[idx], n)
        head.weights -= eta * gw
        head.biases -= eta * gb
    pred = fcn_predict(head, data.values)
    return float(np.mean(pred == data.labels))


def fcn_accuracy(head: FcnHead, data: FeatureMatrix) -> float:
    return float(np.mean(fcn_predict(head, data.values) == data.labels))


# ---------------------------------------------------------------------------
# Reward-modulated plasticity head
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RstdpHead:
    weights: np.ndarray           # (n_out, n_in) in [0, 1]
    a_r_plus: float = 0.004
    a_r_minus: float = 0.003
    a_p_plus: float = 0.0005
    a_p_minus: float = 0.004
    neurons_per_class: int = 1
    p_drop: float = 0.0
    ratio_mode: str = "batch"     # or "per_image"
    window: int = 100             # N
    miss_ratio: float = 0.5       # running N_miss / N
    _batch_seen: int = 0
    _batch_misses: int = 0
    _history: deque = field(default_factory=deque)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.min(initial=0.0) < 0 or self.weights.max(initial=0.0) > 1:
            raise ValueError("R-STDP weights must lie in [0, 1]")
        if self.ratio_mode not in ("batch", "per_image"):
            raise ValueError(f"unknown ratio mode {self.ratio_mode!r}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must be in [0, 1)")
        self._history = deque(self._history, maxlen=self.window)

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def hit_ratio(self) -> float:
        return 1.0 - self.miss_ratio

    def neuron_class(self, neuron: int) -> int:
        return neuron // self.neurons_per_class


def init_rstdp_head(n_in: int, n_out: int, rng: np.random.Generator,
                    mean: float = 0.8, std: float = 0.01, **kwargs) -> RstdpHead:
    w = np.clip(rng.normal(mean, std, size=(n_out, n_in)), 1e-9, 1 - 1e-9)
    return RstdpHead(w, **kwargs)


def rstdp_potentials(head: RstdpHead, spike_counts: np.ndarray) -> np.ndarray:
    """Final membrane potential per output neuron.

    ``spike_counts`` is the per-input total spike count over the image's
    timeline, so V = W @ counts equals the bin-by-bin weighted sum.
    """
    return head.weights @ np.asarray(spike_counts, dtype=np.float64)


def rstdp_decide(head: RstdpHead, potentials: np.ndarray) -> tuple[int, int]:
    """(winning neuron, predicted class); ties go to the lowest index."""
    winner = int(np.argmax(potentials))
    return winner, head.neuron_class(winner)


def rstdp_update(head: RstdpHead, winner: int, label: int,
                 presyn_spiked: np.ndarray,
                 dropout_mask: np.ndarray | None = None) -> None:
    """Reward/punish the winning neuron's incoming weights.

    Correct prediction: +miss_ratio*a_r_plus on inputs that spiked,
    -miss_ratio*a_r_minus on silent ones.  Wrong prediction:
    -hit_ratio*a_p_plus on spiking inputs, +hit_ratio*a_p_minus on silent
    ones.  All steps carry the w(1-w) factor; neurons in the dropout mask
    skip their update.  Only the winner's row is touched.
    """
    if dropout_mask is not None and dropout_mask[winner]:
        return
    spiked = np.asarray(presyn_spiked, dtype=bool)
    w = head.weights[winner]
    if head.neuron_class(winner) == label:
        step = head.miss_ratio * np.where(spiked, head.a_r_plus, -head.a_r_minus)
    else:
        step = head.hit_ratio * np.where(spiked, -head.a_p_plus, head.a_p_minus)
    w += step * w * (1.0 - w)


def update_hit_miss(head: RstdpHead, outcome: str) -> None:
    """Fold one image's outcome ('hit' | 'miss') into the running ratios.

    Batch mode recomputes the ratios once per full window of N images, so a
    freshly configured ratio stays in force for the whole first batch.
    Per-image mode keeps a sliding window of the most recent (up to N)
    outcomes and recomputes after every image, starting from the very first
    one; the configured ratio only seeds the pre-first-image value.
    """
    if outcome not in ("hit", "miss"):
        raise ValueError(f"outcome must be 'hit' or 'miss', got {outcome!r}")
    miss = outcome == "miss"
    if head.ratio_mode == "batch":
        head._batch_seen += 1
        head._batch_misses += int(miss)
        if head._batch_seen == head.window:
            head.miss_ratio = head._batch_misses / head.window
            head._batch_seen = 0
            head._batch_misses = 0
    else:
        head._history.append(int(miss))
        head.miss_ratio = sum(head._history) / len(head._history)


def draw_dropout_mask(n_out: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Mask exactly round(p_drop * n_out) distinct neurons; redrawn per image."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("p_drop must be in [0, 1)")
    k = int(round(p_drop * n_out))
    mask = np.zeros(n_out, dtype=bool)
    if k:
        mask[rng.choice(n_out, size=k, replace=False)] = True
    return mask


def shift_scale_init(weights: np.ndarray) -> np.ndarray:
    """Affine-map a real matrix into [0, 1]: subtract the min, divide by the
    new max.  Constant matrices are degenerate."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi == lo:
        raise ValueError("constant matrix cannot be shift-scaled")
    return (w - lo) / (hi - lo)


def rstdp_train_pass(head: RstdpHead, data: FeatureMatrix,
                     rng: np.random.Generator, shuffle: bool = True,
                     dropout_rng: np.random.Generator | None = None) -> float:
    """One pass of R-STDP over a feature set; returns the pass accuracy.

    An image with all-zero potentials counts as a miss and triggers no
    weight update.  Dropout masks draw from ``dropout_rng`` when given, so
    the dropout stream can be replayed independently of the shuffle.
    """
    order = rng.permutation(data.n_rows) if shuffle else np.arange(data.n_rows)
    drop_rng = dropout_rng if dropout_rng is not None else rng
    hits = 0
    for i in order:
        counts = data.values[i]
        label = int(data.labels[i])
        v = rstdp_potentials(head, counts)
        if not v.any():
            update_hit_miss(head, "miss")
            continue
        winner, pred = rstdp_decide(head, v)
        mask = draw_dropout_mask(head.n_out, head.p_drop, drop_rng) if head.p_drop else None
        rstdp_update(head, winner, label, counts > 0, mask)
        if pred == label:
            hits += 1
            update_hit_miss(head, "hit")
        else:
            update_hit_miss(head, "miss")
    return hits / max(1, data.n_rows)


def rstdp_accuracy(head: RstdpHead, data: FeatureMatrix) -> float:
    v = data.values @ head.weights.T
    winners = np.argmax(v, axis=1)
    pred = winners // head.neurons_per_class
    return float(np.mean(pred == data.labels))


# ---------------------------------------------------------------------------
# Feature matrix export / import
# ---------------------------------------------------------------------------

def export_features(data: FeatureMatrix, path, fmt: str = "binary_matrix") -> None:
    """Write a feature matrix to disk.

    ``delimited_text``: one comma-separated row per image, label last.
    ``binary_matrix``: magic FMAT, u32 dims, f64 little-endian values
    (row-major), then one u8 label per row.
    """
    if fmt == "delimited_text":
        with open(path, "w") as f:
            for row, label in zip(data.values, data.labels):
                cells = ",".join(f"{v:.17g}" for v in row)
                f.write(f"{cells},{int(label)}\n" if cells else f"{int(label)}\n")
    elif fmt == "binary_matrix":
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(struct.pack("<II", data.n_rows, data.n_cols))
            f.write(data.values.astype("<f8").tobytes(order="C"))
            f.write(data.labels.astype(np.uint8).tobytes())
    else:
        raise ValueError(f"unknown export format {fmt!r}")


def import_features(path) -> FeatureMatrix:
    buf = open(path, "rb").read()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError("bad feature-matrix magic")
    rows, cols = struct.unpack_from("<II", buf, 4)
    need = 12 + 8 * rows * cols + rows
    if len(buf) < need:
        raise ValueError("truncated feature-matrix payload")
    values = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=12)
    labels = np.frombuffer(buf, dtype=np.uint8, count=rows, offset=12 + 8 * rows * cols)
    return FeatureMatrix(values.reshape(rows, cols).copy(), labels.astype(np.int64))


# ---------------------------------------------------------------------------
# Head checkpoints (same container style as kernel checkpoints)
# ---------------------------------------------------------------------------

_COSTS = ["cross_entropy", "quadratic"]
_MODES = ["batch", "per_image"]


def save_head(path, head) -> None:
    with open(path, "wb") as f:
        f.write(HEAD_MAGIC)
        if isinstance(head, FcnHead):
            f.write(struct.pack("<III", HEAD_VERSION, HEAD_TAG_FCN, _COSTS.index(head.cost)))
            f.write(struct.pack("<II", head.n_out, head.n_in))
            f.write(struct.pack("<ddd", head.eta0, head.eta_decay, head.lam))
            f.write(head.weights.astype("<f8").tobytes(order="C"))
            f.write(head.biases.astype("<f8").tobytes(order="C"))
        elif isinstance(head, RstdpHead):
            f.write(struct.pack("<III", HEAD_VERSION, HEAD_TAG_RSTDP, _MODES.index(head.ratio_mode)))
            f.write(struct.pack("<II", head.n_out, head.weights.shape[1]))
            f.write(struct.pack("<dddd", head.a_r_plus, head.a_r_minus,
                                head.a_p_plus, head.a_p_minus))
            f.write(struct.pack("<IId", head.neurons_per_class, head.window, head.p_drop))
            f.write(struct.pack("<d", head.miss_ratio))
            f.write(head.weights.astype("<f8").tobytes(order="C"))
        else:
            raise TypeError(f"cannot checkpoint {type(head).__name__}")


def load_head(path):
    buf = open(path, "rb").read()
    if buf[:4] != HEAD_MAGIC:
        raise ValueError("bad head magic")
    version, tag, aux = struct.unpack_from("<III", buf, 4)
    if version != HEAD_VERSION:
        raise ValueError(f"unsupported head version {version}")
    if tag == HEAD_TAG_FCN:
        n_out, n_in = struct.unpack_from("<II", buf, 16)
        eta0, eta_decay, lam = struct.unpack_from("<ddd", buf, 24)
        off = 48
        w = np.frombuffer(buf, dtype="<f8", count=n_out * n_in, offset=off).reshape(n_out, n_in)
        b = np.frombuffer(buf, dtype="<f8", count=n_out, offset=off + 8 * n_out * n_in)
        return FcnHead(w.copy(), b.copy(), _COSTS[aux], eta0, eta_decay, lam)
    if tag == HEAD_TAG_RSTDP:
        n_out, n_in = struct.unpack_from("<II", buf, 16)
        rates = struct.unpack_from("<dddd", buf, 24)
        npc, window, p_drop = struct.unpack_from("<IId", buf, 56)
        miss_ratio, = struct.unpack_from("<d", buf, 72)
        w = np.frombuffer(buf, dtype="<f8", count=n_out * n_in, offset=80).reshape(n_out, n_in)
        return RstdpHead(w.copy(), *rates, neurons_per_class=npc, p_drop=p_drop,
                         ratio_mode=_MODES[aux], window=window, miss_ratio=miss_ratio)
    raise ValueError(f"unknown head tag {tag}")
