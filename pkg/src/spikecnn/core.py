"""Spiking convolution layers.

Potentials accumulate across time bins within one image; neurons fire once
when their potential strictly exceeds the layer threshold.  During training,
lateral inhibition and a spatial winner-take-all competition keep the maps
learning distinct features, weight updates follow the multiplicative rule
w +/- a*w*(1-w) (which keeps every weight inside [0, 1]), and a homeostasis
gate caps how often any one map may update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

KERNEL_MAGIC = b"SKRN"
KERNEL_VERSION = 1

RATE_CAP = 0.15  # doubling of a_plus stops once it would exceed this


@dataclass
class ConvKernel:
    """Trainable convolution weights, each in [0, 1]."""

    weights: np.ndarray  # (maps_out, maps_in, k, k) float64
    a_plus: float = 0.004
    a_minus: float = 0.003

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError("kernel weights must be 4-D (maps_out, maps_in, k, k)")
        if self.weights.min(initial=0.0) < 0.0 or self.weights.max(initial=0.0) > 1.0:
            raise ValueError("kernel weights must lie in [0, 1]")
        if self.a_plus <= 0 or self.a_minus <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def maps_out(self) -> int:
        return self.weights.shape[0]

    @property
    def maps_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.a_plus, self.a_minus)


def init_kernel(maps_out: int, maps_in: int, k: int, rng: np.random.Generator,
                mean: float = 0.8, std: float = 0.05,
                a_plus: float = 0.004, a_minus: float = 0.003) -> ConvKernel:
    """Fresh kernel with weights ~ N(mean, std^2) clamped into (0, 1)."""
    w = rng.normal(mean, std, size=(maps_out, maps_in, k, k))
    eps = 1e-9
    return ConvKernel(np.clip(w, eps, 1.0 - eps), a_plus, a_minus)


@dataclass
class InhibitionConfig:
    threshold: float = 15.0
    competition_radius: int = 5
    lateral_inhibition: bool = True
    competition: bool = True  # training only
    pool_lateral_inhibition: bool = False

    def __post_init__(self):
        if self.competition_radius < 0:
            raise ValueError("competition radius must be >= 0")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


class LayerState:
    """Per-image bookkeeping for one convolution layer.

    ``homeo_counts`` and ``images_seen`` persist across images (the
    homeostasis window is a tumbling 5-image window); everything else resets
    at each image boundary.
    """

    def __init__(self, maps_out: int, maps_in: int, out_h: int, out_w: int,
                 in_h: int, in_w: int, homeo_window: int = 5, homeo_limit: int = 2):
        self.out_shape = (maps_out, out_h, out_w)
        self.in_shape = (maps_in, in_h, in_w)
        self.homeo_window = homeo_window
        self.homeo_limit = homeo_limit
        self.images_seen = 0
        self.homeo_counts = np.zeros(maps_out, dtype=np.int64)
        self.reset_image()

    def reset_image(self) -> None:
        maps_out, out_h, out_w = self.out_shape
        self.fired = np.zeros(self.out_shape, dtype=bool)
        self.fired_potential = np.zeros(self.out_shape, dtype=np.float64)
        self.fired_bin = np.full(self.out_shape, -1, dtype=np.int64)
        self.location_locked = np.zeros((out_h, out_w), dtype=bool)
        self.map_updated = np.zeros(maps_out, dtype=bool)
        self.winner_positions: list[tuple[int, int]] = []
        self.input_cum = np.zeros(self.in_shape, dtype=bool)

    def begin_image(self) -> None:
        """Reset transient state; roll the homeostasis window when due."""
        if self.images_seen % self.homeo_window == 0:
            self.homeo_counts[:] = 0
        self.reset_image()


def conv_accumulate(spikes_bin: np.ndarray, weights: np.ndarray,
                    potentials: np.ndarray) -> np.ndarray:
    """Add one bin's valid-mode correlation response into the potentials.

    ``spikes_bin`` is (maps_in, H, W); ``potentials`` is
    (maps_out, H-k+1, W-k+1) and is updated in place.
    """
    maps_out, maps_in, k, _ = weights.shape
    c, h, w = spikes_bin.shape
    if c != maps_in:
        raise ValueError(f"spike channels {c} != kernel maps_in {maps_in}")
    expect = (maps_out, h - k + 1, w - k + 1)
    if potentials.shape != expect:
        raise ValueError(f"potentials shape {potentials.shape} != {expect}")
    if not spikes_bin.any():
        return potentials
    windows = np.lib.stride_tricks.sliding_window_view(
        spikes_bin.astype(np.float64), (k, k), axis=(1, 2))
    potentials += np.tensordot(weights, windows, axes=([1, 2, 3], [0, 3, 4]))
    return potentials


def fire_and_inhibit(potentials: np.ndarray, state: LayerState,
                     cfg: InhibitionConfig, time_bin: int) -> np.ndarray:
    """Fire neurons above threshold, applying lateral inhibition.

    A neuron fires at most once per image.  With lateral inhibition on, only
    the highest-potential map may fire at each location, which then locks the
    location for the rest of the image (ties go to the lower map index).
    Returns the boolean (maps, H, W) plane of spikes emitted this bin.
    """
    eligible = (potentials > cfg.threshold) & ~state.fired
    if cfg.lateral_inhibition:
        eligible &= ~state.location_locked[None, :, :]
    if not eligible.any():
        return np.zeros_like(eligible)

    if cfg.lateral_inhibition:
        masked = np.where(eligible, potentials, -np.inf)
        winner_map = masked.argmax(axis=0)  # first max wins -> lower map index
        any_here = eligible.any(axis=0)
        fired_now = np.zeros_like(eligible)
        uu, vv = np.nonzero(any_here)
        fired_now[winner_map[uu, vv], uu, vv] = True
        state.location_locked |= any_here
    else:
        fired_now = eligible

    state.fired |= fired_now
    state.fired_potential[fired_now] = potentials[fired_now]
    state.fired_bin[fired_now] = time_bin
    return fired_now


def stdp_competition(fired_now: np.ndarray, potentials: np.ndarray,
                     state: LayerState, radius: int) -> list[tuple[int, int, int]]:
    """Pick this bin's weight-update winners (training only).

    Each map's candidate is its highest-potential neuron among those that
    fired this bin.  Candidates are taken greedily by descending potential;
    a winner excludes every other candidate that fits with it inside one
    (2*radius+1)^2 window, across all maps and for the rest of the image,
    and a map that wins is done updating for this image.
    """
    winners: list[tuple[int, int, int]] = []
    maps_out = fired_now.shape[0]
    cands = []
    for m in range(maps_out):
        if state.map_updated[m]:
            continue
        mask = fired_now[m]
        if not mask.any():
            continue
        flat = np.where(mask, potentials[m], -np.inf).ravel()
        idx = int(flat.argmax())
        u, v = divmod(idx, fired_now.shape[2])
        cands.append((-potentials[m, u, v], m, u, v))
    cands.sort()
    span = 2 * radius
    for _, m, u, v in cands:
        if state.map_updated[m]:
            continue
        clash = any(abs(u - pu) <= span and abs(v - pv) <= span
                    for pu, pv in state.winner_positions)
        if clash:
            continue
        winners.append((m, u, v))
        state.winner_positions.append((u, v))
        state.map_updated[m] = True
    return winners


def stdp_update(kernel: ConvKernel, map_index: int,
                presyn_fired_before: np.ndarray) -> None:
    """Multiplicative weight update for one map's kernel.

    Weights whose presynaptic neuron spiked at or before the winner's bin are
    potentiated, all others depressed; both updates vanish at w=0 and w=1, so
    weights never leave [0, 1].
    """
    w = kernel.weights[map_index]
    step = np.where(presyn_fired_before, kernel.a_plus, -kernel.a_minus)
    w += step * w * (1.0 - w)


def depress_map(kernel: ConvKernel, map_index: int) -> None:
    """Homeostatic penalty: depress every weight of one map."""
    w = kernel.weights[map_index]
    w -= kernel.a_minus * w * (1.0 - w)


def homeostasis_gate(state: LayerState, map_index: int) -> bool:
    """Allow at most ``homeo_limit`` updates per map per tumbling window.

    Returns True when the update may proceed; False means the caller should
    apply the whole-map depressive penalty instead.
    """
    if state.homeo_counts[map_index] < state.homeo_limit:
        state.homeo_counts[map_index] += 1
        return True
    return False


def double_learning_rates(kernel: ConvKernel, images_seen: int,
                          every: int = 1000, cap: float = RATE_CAP) -> ConvKernel:
    """Double both learning rates at each ``every``-image mark, capped."""
    if images_seen > 0 and images_seen % every == 0:
        if kernel.a_plus * 2.0 <= cap:
            kernel.a_plus *= 2.0
            kernel.a_minus *= 2.0
    return kernel


def infer_image(dense_spikes: np.ndarray, kernel: ConvKernel,
                cfg: InhibitionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run one image through a frozen layer (no competition, no learning).

    Returns (out_spikes (T, M, H', W') bool, fired_potentials (M, H', W')).
    """
    t_bins, c, h, w = dense_spikes.shape
    out_h, out_w = h - kernel.k + 1, w - kernel.k + 1
    state = LayerState(kernel.maps_out, c, out_h, out_w, h, w)
    potentials = np.zeros((kernel.maps_out, out_h, out_w))
    out = np.zeros((t_bins, kernel.maps_out, out_h, out_w), dtype=bool)
    for t in range(t_bins):
        conv_accumulate(dense_spikes[t], kernel.weights, potentials)
        out[t] = fire_and_inhibit(potentials, state, cfg, t)
    return out, state.fired_potential


def max_pool(spikes: np.ndarray, spike_potentials: np.ndarray,
             pool_lateral_inhibition: bool = False) -> np.ndarray:
    """2x2 non-overlapping max pooling over a per-image spike record.

    Odd map dimensions lose their last row/column.  Per map and block, at
    most one spike passes: the one whose emitting neuron had the highest
    membrane potential (ties resolve in row-major block order).  The passed
    spike keeps its original time bin.  With ``pool_lateral_inhibition`` on,
    additionally only the dominant map (earliest spike, then highest
    potential, then lowest map index) survives at each pooled location.
    """
    t_bins, maps, h, w = spikes.shape
    h2, w2 = h // 2, w // 2
    spikes = spikes[:, :, :h2 * 2, :w2 * 2]
    pot = spike_potentials[:, :h2 * 2, :w2 * 2]
    fired = spikes.any(axis=0)
    first_bin = np.where(fired, spikes.argmax(axis=0), t_bins)

    blocks_pot = np.where(fired, pot, -np.inf).reshape(maps, h2, 2, w2, 2)
    blocks_pot = blocks_pot.transpose(0, 1, 3, 2, 4).reshape(maps, h2, w2, 4)
    blocks_fired = fired.reshape(maps, h2, 2, w2, 2)
    blocks_fired = blocks_fired.transpose(0, 1, 3, 2, 4).reshape(maps, h2, w2, 4)
    blocks_bin = first_bin.reshape(maps, h2, 2, w2, 2)
    blocks_bin = blocks_bin.transpose(0, 1, 3, 2, 4).reshape(maps, h2, w2, 4)

    has_spike = blocks_fired.any(axis=-1)
    pick = blocks_pot.argmax(axis=-1)
    m_idx, u_idx, v_idx = np.nonzero(has_spike)
    sel = pick[m_idx, u_idx, v_idx]
    sel_bin = blocks_bin[m_idx, u_idx, v_idx, sel]
    sel_pot = blocks_pot[m_idx, u_idx, v_idx, sel]

    out = np.zeros((t_bins, maps, h2, w2), dtype=bool)
    out[sel_bin, m_idx, u_idx, v_idx] = True

    if pool_lateral_inhibition and m_idx.size:
        keep = np.zeros((t_bins, maps, h2, w2), dtype=bool)
        # Dominant map per pooled location: earliest bin, then highest
        # potential, then lowest map index.
        order = np.lexsort((m_idx, -sel_pot, sel_bin))
        taken = np.zeros((h2, w2), dtype=bool)
        for i in order:
            u, v = u_idx[i], v_idx[i]
            if not taken[u, v]:
                taken[u, v] = True
                keep[sel_bin[i], m_idx[i], u, v] = True
        out = keep
    return out


def global_max_potential(dense_spikes: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Per-bin fresh response, per-map spatial max, summed across bins.

    Yields one real value per output map; the layer's potentials are reset
    between bins rather than accumulated.
    """
    t_bins, c, h, w = dense_spikes.shape
    out_h, out_w = h - kernel.k + 1, w - kernel.k + 1
    total = np.zeros(kernel.maps_out)
    potentials = np.zeros((kernel.maps_out, out_h, out_w))
    for t in range(t_bins):
        potentials[:] = 0.0
        conv_accumulate(dense_spikes[t], kernel.weights, potentials)
        total += potentials.max(axis=(1, 2))
    return total


def count_spikes(spikes: np.ndarray) -> np.ndarray:
    """Per-neuron spike count across bins, flattened map-major."""
    return spikes.sum(axis=0, dtype=np.float64).ravel()


def save_kernel(path, kernel: ConvKernel) -> None:
    """Kernel checkpoint: magic, version, shape, rates, then f64 weights."""
    with open(path, "wb") as f:
        f.write(KERNEL_MAGIC)
        f.write(struct.pack("<I", KERNEL_VERSION))
        f.write(struct.pack("<IIII", *kernel.weights.shape))
        f.write(struct.pack("<dd", kernel.a_plus, kernel.a_minus))
        f.write(kernel.weights.astype("<f8").tobytes(order="C"))


def load_kernel(path) -> ConvKernel:
    buf = open(path, "rb").read()
    if buf[:4] != KERNEL_MAGIC:
        raise ValueError("bad kernel magic")
    version, = struct.unpack_from("<I", buf, 4)
    if version != KERNEL_VERSION:
        raise ValueError(f"unsupported kernel version {version}")
    shape = struct.unpack_from("<IIII", buf, 8)
    a_plus, a_minus = struct.unpack_from("<dd", buf, 24)
    n = int(np.prod(shape))
    if len(buf) < 40 + 8 * n:
        raise ValueError("truncated kernel payload")
    weights = np.frombuffer(buf, dtype="<f8", count=n, offset=40).reshape(shape)
    return ConvKernel(weights.copy(), a_plus, a_minus)
