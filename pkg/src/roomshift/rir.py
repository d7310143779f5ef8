"""Parametric synthetic room impulse responses.

Two generators stand in for a measured-RIR corpus: a shoebox image-source
renderer (geometric echoes + coloration) and a cheap Schroeder-style
noise-decay model. Absorption is frequency-independent (scalar per
surface) so the acoustic bookkeeping stays checkable against Sabine's
formula; no air absorption, no directivity.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip, peak_normalize, write_wav
from .fileio import atomic_write_json, read_json

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0  # m/s
IR_PEAK = 0.99

# surface order for absorption vectors: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz
SURFACE_NAMES = ("x0", "x1", "y0", "y1", "z0", "z1")

SIZE_CLASSES = {
    # (side range, height range) in meters
    "small": ((3.0, 6.0), (2.5, 4.0)),
    "medium": ((6.0, 15.0), (3.0, 6.0)),
    "large": ((15.0, 40.0), (5.0, 15.0)),
}


@dataclass
class RoomSpec:
    dims: tuple  # (Lx, Ly, Lz) meters
    absorption: tuple  # 6 values in (0, 1], SURFACE_NAMES order
    source: tuple  # (x, y, z) meters
    receiver: tuple  # (x, y, z) meters
    max_order: int = 20
    fs: int = 16000
    length: int = 24000

    def __post_init__(self):
        self.dims = tuple(float(v) for v in self.dims)
        self.absorption = tuple(float(v) for v in self.absorption)
        self.source = tuple(float(v) for v in self.source)
        self.receiver = tuple(float(v) for v in self.receiver)
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError(f"bad room dims {self.dims}")
        if len(self.absorption) != 6 or any(not 0.0 < a <= 1.0 for a in self.absorption):
            raise ValueError(f"absorption must be 6 values in (0, 1], got {self.absorption}")
        for name, p in (("source", self.source), ("receiver", self.receiver)):
            if len(p) != 3 or any(not 0.0 < c < d for c, d in zip(p, self.dims)):
                raise ValueError(f"{name} {p} not strictly inside room {self.dims}")
        if self.source == self.receiver:
            raise ValueError("source and receiver coincide")
        if not 0 <= self.max_order <= 40:
            raise ValueError(f"max_order {self.max_order} out of range [0, 40]")
        if self.fs <= 0 or self.length <= 0:
            raise ValueError("fs and length must be positive")


@dataclass
class RoomIr:
    clip: AudioClip
    spec: RoomSpec | None
    rt60_nominal: float
    truncated_taps: int = 0


def surface_areas(dims):
    lx, ly, lz = dims
    return (ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly)


def sabine_rt60(room):
    """RT60 = 0.161 * V / sum(S_i * alpha_i)."""
    volume = room.dims[0] * room.dims[1] * room.dims[2]
    absorbing_area = sum(s * a for s, a in zip(surface_areas(room.dims), room.absorption))
    return 0.161 * volume / absorbing_area


def _axis_images(extent, src_coord, beta_lo, beta_hi, max_order):
    """Per-axis image positions with reflection coefficients and orders.

    Image positions along one axis are (1-2p)*s + 2n*L for p in {0,1};
    the path reflects |n-p| times off the lower wall and |n| times off
    the upper wall.
    """
    n_max = max_order // 2 + 1
    n = np.arange(-n_max, n_max + 1)
    positions, coeffs, orders = [], [], []
    for p in (0, 1):
        positions.append((1 - 2 * p) * src_coord + 2.0 * n * extent)
        lo_hits = np.abs(n - p)
        hi_hits = np.abs(n)
        coeffs.append(beta_lo**lo_hits * beta_hi**hi_hits)
        orders.append(lo_hits + hi_hits)
    return (np.concatenate(positions), np.concatenate(coeffs), np.concatenate(orders))


def image_source_rir(room):
    """Render the shoebox image-source impulse response for a RoomSpec.

    Each surviving image contributes amplitude prod(sqrt(1-alpha)) / distance
    at the nearest-sample delay round(distance * fs / c). Taps that land
    beyond `length` are dropped, counted, and reported on the result.
    """
    beta = np.sqrt(1.0 - np.asarray(room.absorption))
    px, cx, ox = _axis_images(room.dims[0], room.source[0], beta[0], beta[1], room.max_order)
    py, cy, oy = _axis_images(room.dims[1], room.source[1], beta[2], beta[3], room.max_order)
    pz, cz, oz = _axis_images(room.dims[2], room.source[2], beta[4], beta[5], room.max_order)

    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    keep = order <= room.max_order
    rx = px[:, None, None] - room.receiver[0]
    ry = py[None, :, None] - room.receiver[1]
    rz = pz[None, None, :] - room.receiver[2]
    dist = np.sqrt((rx * rx + ry * ry + rz * rz)[keep])
    amp = (cx[:, None, None] * cy[None, :, None] * cz[None, None, :])[keep] / np.maximum(dist, 1e-9)
    taps = np.rint(dist * room.fs / SPEED_OF_SOUND).astype(np.int64)

    h = np.zeros(room.length)
    in_range = taps < room.length
    np.add.at(h, taps[in_range], amp[in_range])
    truncated = int(np.count_nonzero(~in_range))
    if truncated:
        logger.warning("image_source_rir: %d taps beyond %d samples truncated", truncated, room.length)

    clip = peak_normalize(AudioClip(h, room.fs), IR_PEAK)
    return RoomIr(clip, room, sabine_rt60(room), truncated)


def noise_decay_rir(rt60, fs, length, rng):
    """Gaussian noise under an exp(-ln(1000) * t / rt60) envelope (60 dB at rt60)."""
    if rt60 <= 0:
        raise ValueError(f"rt60 must be positive, got {rt60}")
    t = np.arange(length) / fs
    envelope = np.exp(-math.log(1000.0) * t / rt60)
    h = rng.standard_normal(length) * envelope
    clip = peak_normalize(AudioClip(h, fs), IR_PEAK)
    return RoomIr(clip, None, float(rt60))


def sample_room(rng, size_class, max_order=20, fs=16000, length=24000):
    """Draw a random RoomSpec for one of the small/medium/large classes."""
    try:
        side_range, height_range = SIZE_CLASSES[size_class]
    except KeyError:
        raise ValueError(f"unknown size class {size_class!r}; expected one of {sorted(SIZE_CLASSES)}")
    dims = (
        float(rng.uniform(*side_range)),
        float(rng.uniform(*side_range)),
        float(rng.uniform(*height_range)),
    )
    absorption = tuple(float(v) for v in rng.uniform(0.05, 0.6, size=6))

    def draw_point():
        return tuple(float(rng.uniform(0.5, d - 0.5)) for d in dims)

    source = draw_point()
    receiver = draw_point()
    while math.dist(source, receiver) < 0.3:
        receiver = draw_point()
    return RoomSpec(dims, absorption, source, receiver, max_order=max_order, fs=fs, length=length)


def measure_rt60(clip, fit_range_db=(-5.0, -25.0)):
    """Schroeder backward-integration RT60 estimate.

    Integrates energy from the tail, fits a line to the decay curve over
    `fit_range_db`, and extrapolates to -60 dB.
    """
    h = np.asarray(clip.samples, dtype=np.float64)
    energy = h * h
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("cannot measure RT60 of a silent clip")
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-30))
    hi_db, lo_db = fit_range_db
    start = int(np.argmax(edc_db <= hi_db))
    stop = int(np.argmax(edc_db <= lo_db))
    if edc_db[start] > hi_db or edc_db[stop] > lo_db or stop <= start + 2:
        raise ValueError(f"decay never spans [{hi_db}, {lo_db}] dB; clip too short for a fit")
    t = np.arange(start, stop) / clip.sample_rate
    slope, _ = np.polyfit(t, edc_db[start:stop], 1)
    if slope >= 0:
        raise ValueError("energy decay curve is non-decreasing; no RT60")
    return -60.0 / slope


def save_rir(ir, wav_path, meta_path=None, seed=None):
    """Persist a RoomIr as float32 WAV plus a JSON sidecar."""
    write_wav(ir.clip, wav_path)
    meta = {
        "rt60_nominal": ir.rt60_nominal,
        "truncated_taps": ir.truncated_taps,
        "fs": ir.clip.sample_rate,
        "length": int(len(ir.clip.samples)),
    }
    if ir.spec is not None:
        meta.update(
            {
                "dims": list(ir.spec.dims),
                "absorption": list(ir.spec.absorption),
                "source": list(ir.spec.source),
                "receiver": list(ir.spec.receiver),
                "max_order": ir.spec.max_order,
            }
        )
    if seed is not None:
        meta["seed"] = seed
    atomic_write_json(meta_path or _sidecar_path(wav_path), meta)


def load_rir(wav_path, meta_path=None):
    from .audio_io import read_wav

    clip = read_wav(wav_path)
    meta = read_json(meta_path or _sidecar_path(wav_path))
    spec = None
    if "dims" in meta:
        spec = RoomSpec(
            tuple(meta["dims"]),
            tuple(meta["absorption"]),
            tuple(meta["source"]),
            tuple(meta["receiver"]),
            max_order=meta.get("max_order", 20),
            fs=meta["fs"],
            length=meta["length"],
        )
    return RoomIr(clip, spec, float(meta["rt60_nominal"]), int(meta.get("truncated_taps", 0)))


def _sidecar_path(wav_path):
    import os

    stem, _ = os.path.splitext(os.fspath(wav_path))
    return stem + ".json"
