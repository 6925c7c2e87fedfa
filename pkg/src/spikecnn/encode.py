"""Retina-style spike encoding.

Grayscale images are converted to ON/OFF contrast maps with a pair of
difference-of-Gaussian filters, then latency-coded: the strongest responses
spike first.  Event-camera recordings (AER) are ingested into the same
spike-tensor form so the rest of the pipeline is agnostic to the source.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

DOG_RADIUS = 3  # 7x7 kernel support
DEFAULT_DOG_THRESHOLD = 50.0
DEFAULT_BINS = 10
DEFAULT_SILENT_BINS = 2

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CACHE_MAGIC = b"SPKT"
CACHE_VERSION = 1

ON, OFF = 0, 1


@dataclass(frozen=True)
class DoGKernel:
    """7x7 difference-of-Gaussians filter."""

    values: np.ndarray
    sigma_center: float
    sigma_surround: float
    polarity: str  # "on" | "off"


@dataclass(frozen=True)
class ContrastMap:
    values: np.ndarray
    polarity: str


@dataclass(eq=False)
class SpikeTensor:
    """Binary spike events on a (bin, channel, row, col) lattice.

    Events are stored sparsely as a (n, 4) uint8 array of (t, c, u, v)
    quadruples in canonical (t, c, u, v) order, at most one event per
    coordinate.  ``shape`` is (bins, channels, rows, cols) and includes any
    trailing silent bins, which simply hold no events.
    """

    shape: tuple[int, int, int, int]
    events: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.uint8).reshape(-1, 4)
        if ev.shape[0]:
            order = np.lexsort((ev[:, 3], ev[:, 2], ev[:, 1], ev[:, 0]))
            ev = ev[order]
            for axis in range(4):
                if ev[:, axis].max(initial=0) >= self.shape[axis]:
                    raise ValueError(f"event coordinate out of range on axis {axis}")
            if ev.shape[0] > 1 and (ev[1:] == ev[:-1]).all(axis=1).any():
                raise ValueError("duplicate spike event")
        self.events = ev

    @property
    def bins(self) -> int:
        return self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def n_events(self) -> int:
        return self.events.shape[0]

    def dense(self) -> np.ndarray:
        """Materialize as a boolean (T, C, H, W) array."""
        out = np.zeros(self.shape, dtype=bool)
        if self.events.shape[0]:
            t, c, u, v = self.events.T
            out[t, c, u, v] = True
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SpikeTensor":
        ev = np.argwhere(dense).astype(np.uint8)
        return cls(tuple(dense.shape), ev)


def make_dog_kernel(sigma_center: float, sigma_surround: float) -> DoGKernel:
    """Build the 7x7 two-Gaussian difference filter.

    Center sigma smaller than surround gives the ON (bright-center) filter;
    swapping the sigmas negates the kernel elementwise and gives OFF.
    """
    if sigma_center <= 0 or sigma_surround <= 0:
        raise ValueError("DoG sigmas must be positive")
    r = DOG_RADIUS
    i, j = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    d2 = i * i + j * j

    def gauss(sigma):
        return np.exp(-d2 / (2.0 * sigma**2)) / (2.0 * np.pi * sigma**2)

    values = gauss(sigma_center) - gauss(sigma_surround)
    polarity = "on" if sigma_center < sigma_surround else "off"
    return DoGKernel(values, float(sigma_center), float(sigma_surround), polarity)


def dog_filter(image: np.ndarray, kernel: DoGKernel) -> ContrastMap:
    """Same-mode filtering of an image; borders are zero padded."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError("image must be a 2-D matrix")
    values = correlate2d(image, kernel.values, mode="same", boundary="fill", fillvalue=0.0)
    return ContrastMap(values, kernel.polarity)


def latency_encode(on: ContrastMap, off: ContrastMap, threshold: float,
                   n_bins: int = DEFAULT_BINS,
                   silent_bins: int = DEFAULT_SILENT_BINS) -> SpikeTensor:
    """Latency-code a pair of contrast maps into a spike tensor.

    A pixel spikes once iff its response exceeds ``threshold`` strictly.  The
    arrival time of each spike is 1/response; spikes are sorted by arrival
    (ties broken by ON before OFF, then row-major pixel order) and split into
    ``n_bins`` nearly equal-count bins, the first (count mod n_bins) bins
    taking one extra.  ``silent_bins`` empty bins are appended.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if on.values.shape != off.values.shape:
        raise ValueError("ON/OFF map shapes differ")
    h, w = on.values.shape
    rows = []
    keys = []
    for channel, cmap in ((ON, on), (OFF, off)):
        resp = cmap.values
        mask = resp > threshold
        if not mask.any():
            continue
        uu, vv = np.nonzero(mask)
        # ascending arrival time 1/response == descending response; sorting
        # on -response keeps the order well defined for any threshold sign
        rows.append(np.column_stack([np.full(uu.shape, channel), uu, vv]))
        keys.append(-resp[mask])
    shape = (n_bins + silent_bins, 2, h, w)
    if not rows:
        return SpikeTensor(shape, np.empty((0, 4), dtype=np.uint8))
    coords = np.concatenate(rows).astype(np.int64)
    key = np.concatenate(keys)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], key))
    coords = coords[order]
    n = coords.shape[0]
    base, extra = divmod(n, n_bins)
    counts = np.full(n_bins, base, dtype=np.int64)
    counts[:extra] += 1
    bins = np.repeat(np.arange(n_bins), counts)
    events = np.column_stack([bins, coords[:, 0], coords[:, 1], coords[:, 2]])
    return SpikeTensor(shape, events.astype(np.uint8))


def encode_image(image: np.ndarray, threshold: float = DEFAULT_DOG_THRESHOLD,
                 n_bins: int = DEFAULT_BINS, silent_bins: int = DEFAULT_SILENT_BINS,
                 sigma_center: float = 1.0, sigma_surround: float = 2.0) -> SpikeTensor:
    """Full image-to-spikes path: DoG pair -> latency code."""
    on_k = make_dog_kernel(sigma_center, sigma_surround)
    off_k = make_dog_kernel(sigma_surround, sigma_center)
    return latency_encode(dog_filter(image, on_k), dog_filter(image, off_k),
                          threshold, n_bins, silent_bins)


def _read_u32be(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise ValueError(f"truncated IDX file while reading {what}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx_images(images_path, labels_path, crop: bool = True):
    """Load an IDX image/label pair.

    28x28 images are cropped to 27x27 by dropping the outermost (last) row
    and column band.  Returns (images float64 (n, H, W), labels int64 (n,)).
    """
    img_buf = open(images_path, "rb").read()
    lab_buf = open(labels_path, "rb").read()

    magic = _read_u32be(img_buf, 0, "image magic")
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"bad image magic 0x{magic:08x}")
    n = _read_u32be(img_buf, 4, "image count")
    h = _read_u32be(img_buf, 8, "rows")
    w = _read_u32be(img_buf, 12, "cols")
    if len(img_buf) < 16 + n * h * w:
        raise ValueError("truncated IDX image payload")
    images = np.frombuffer(img_buf, dtype=np.uint8, count=n * h * w, offset=16)
    images = images.reshape(n, h, w).astype(np.float64)

    magic = _read_u32be(lab_buf, 0, "label magic")
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"bad label magic 0x{magic:08x}")
    n_lab = _read_u32be(lab_buf, 4, "label count")
    if len(lab_buf) < 8 + n_lab:
        raise ValueError("truncated IDX label payload")
    if n_lab != n:
        raise ValueError(f"image/label count mismatch ({n} vs {n_lab})")
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)

    if crop and h == 28 and w == 28:
        images = images[:, :27, :27]
    return images, labels


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def load_idx_labels(path) -> np.ndarray:
    buf = open(path, "rb").read()
    magic = _read_u32be(buf, 0, "label magic")
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"bad label magic 0x{magic:08x}")
    n = _read_u32be(buf, 4, "label count")
    if len(buf) < 8 + n:
        raise ValueError("truncated IDX label payload")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_aer_recording(path, n_bins: int, silent_bins: int = DEFAULT_SILENT_BINS,
                       geometry: tuple[int, int] = (34, 34),
                       crop: tuple[int, int] | None = (27, 27),
                       saccade_offsets=None) -> SpikeTensor:
    """Read a 5-byte-per-event AER recording into a spike tensor.

    Event layout (big-endian): x (8 bits), y (8 bits), polarity (1 bit),
    timestamp (23 bits, microseconds).  Events are sorted by timestamp and
    split into ``n_bins`` equal-count bins; duplicate (bin, polarity, x, y)
    events collapse to one spike.  When ``crop`` is set, the sensor frame is
    center-cropped and events outside the window are dropped.

    ``saccade_offsets`` optionally corrects for camera motion: rows of
    (t_start_us, dy, dx), each applied to events at or after its start time.
    """
    buf = np.fromfile(path, dtype=np.uint8)
    if buf.size % 5:
        raise ValueError(f"AER file length {buf.size} is not a multiple of 5")
    gh, gw = geometry
    ev = buf.reshape(-1, 5).astype(np.int64)
    x = ev[:, 0]
    y = ev[:, 1]
    pol = ev[:, 2] >> 7
    ts = ((ev[:, 2] & 0x7F) << 16) | (ev[:, 3] << 8) | ev[:, 4]
    if ev.shape[0]:
        if x.max() >= gw or y.max() >= gh:
            raise ValueError("AER event coordinates outside declared geometry")

    if saccade_offsets:
        # Piecewise-constant shift: each event takes the offset of the last
        # phase whose start time is <= its timestamp.
        offsets = sorted((int(t0), int(dy), int(dx)) for t0, dy, dx in saccade_offsets)
        starts = np.array([o[0] for o in offsets])
        phase = np.searchsorted(starts, ts, side="right")
        dy = np.array([0] + [o[1] for o in offsets])[phase]
        dx = np.array([0] + [o[2] for o in offsets])[phase]
        y = y + dy
        x = x + dx

    shape_hw = crop if crop is not None else (gh, gw)
    shape = (n_bins + silent_bins, 2, shape_hw[0], shape_hw[1])
    if crop is not None:
        ch, cw = crop
        r0, c0 = (gh - ch) // 2, (gw - cw) // 2
        keep = (y >= r0) & (y < r0 + ch) & (x >= c0) & (x < c0 + cw)
        x, y, pol, ts = x[keep] - c0, y[keep] - r0, pol[keep], ts[keep]

    order = np.argsort(ts, kind="stable")
    x, y, pol = x[order], y[order], pol[order]
    n = x.shape[0]
    if n == 0:
        return SpikeTensor(shape, np.empty((0, 4), dtype=np.uint8))
    base, extra = divmod(n, n_bins)
    counts = np.full(n_bins, base, dtype=np.int64)
    counts[:extra] += 1
    bins = np.repeat(np.arange(n_bins), counts)

    # Polarity bit 1 is the brightness-increase (ON) channel.
    chan = np.where(pol == 1, ON, OFF)
    quads = np.column_stack([bins, chan, y, x])
    quads = np.unique(quads, axis=0)
    return SpikeTensor(shape, quads.astype(np.uint8))


def _write_varint(f, value: int) -> None:
    while value >= 0x80:
        f.write(bytes([(value & 0x7F) | 0x80]))
        value >>= 7
    f.write(bytes([value]))


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise ValueError("truncated varint in cache file")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def write_cache(path, tensors) -> None:
    """Write an encoded dataset cache (magic SPKT, little-endian header)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("cannot write an empty cache")
    shape = tensors[0].shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIIII", CACHE_VERSION, *shape, len(tensors)))
        for tensor in tensors:
            if tensor.shape != shape:
                raise ValueError("all cached tensors must share one shape")
            _write_varint(f, tensor.n_events)
            f.write(tensor.events.tobytes())


def read_cache(path) -> list[SpikeTensor]:
    buf = open(path, "rb").read()
    if buf[:4] != CACHE_MAGIC:
        raise ValueError("bad cache magic")
    version, t, c, h, w, count = struct.unpack_from("<IIIIII", buf, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    shape = (t, c, h, w)
    pos = 4 + 24
    out = []
    for _ in range(count):
        n, pos = _read_varint(buf, pos)
        end = pos + 4 * n
        if end > len(buf):
            raise ValueError("truncated cache payload")
        ev = np.frombuffer(buf, dtype=np.uint8, count=4 * n, offset=pos).reshape(n, 4)
        out.append(SpikeTensor(shape, ev.copy()))
        pos = end
    return out


def encode_dataset(images: np.ndarray, threshold: float = DEFAULT_DOG_THRESHOLD,
                   n_bins: int = DEFAULT_BINS, silent_bins: int = DEFAULT_SILENT_BINS,
                   sigma_center: float = 1.0, sigma_surround: float = 2.0) -> list[SpikeTensor]:
    """Encode a stack of images; pure per image, order preserved."""
    on_k = make_dog_kernel(sigma_center, sigma_surround)
    off_k = make_dog_kernel(sigma_surround, sigma_center)
    out = []
    for img in images:
        on = dog_filter(img, on_k)
        off = dog_filter(img, off_k)
        out.append(latency_encode(on, off, threshold, n_bins, silent_bins))
    return out
