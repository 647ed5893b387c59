"""Geometric single-bounce channel simulator.

Produces per-beam uplink channel transfer functions for a UE moving on a
closed lap around a base station equipped with a dual-polarised planar
array whose 64 ports are a 2D DFT grid of beams (32 per polarisation).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
NUM_UE_LAYERS = 4
PRBS_PER_BLOCK = 6  # PRBs feeding one final PRSG (pairs, then triples)


@dataclass
class Scatterer:
    """Point reflector.

    ``normal`` and ``lobe_exponent`` give an optional specular lobe: the
    path gain is scaled by ``max(0, normal . bisector) ** lobe_exponent``
    where ``bisector`` is the unit sum of the directions toward the UE and
    toward the BS. With ``normal=None`` the reflector is isotropic.
    """

    position: tuple[float, float, float]
    reflection_gain: complex = 0.5
    normal: tuple[float, float, float] | None = None
    lobe_exponent: float = 0.0
    radius: float = 0.1

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        self.reflection_gain = complex(self.reflection_gain)
        if abs(self.reflection_gain) > 1.0 + 1e-12:
            raise ValueError(f"reflection gain magnitude {abs(self.reflection_gain)} exceeds 1")
        if self.normal is not None:
            n = np.asarray(self.normal, dtype=float)
            self.normal = tuple(n / np.linalg.norm(n))

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "reflection_gain": [self.reflection_gain.real, self.reflection_gain.imag],
            "normal": None if self.normal is None else list(self.normal),
            "lobe_exponent": self.lobe_exponent,
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scatterer":
        g = d.get("reflection_gain", 0.5)
        if isinstance(g, (list, tuple)):
            g = complex(g[0], g[1])
        return cls(
            position=tuple(d["position"]),
            reflection_gain=g,
            normal=None if d.get("normal") is None else tuple(d["normal"]),
            lobe_exponent=float(d.get("lobe_exponent", 0.0)),
            radius=float(d.get("radius", 0.1)),
        )


@dataclass
class SceneConfig:
    carrier_frequency: float = 3.85e9
    bandwidth: float = 100e6
    num_prb: int = 273
    bs_position: tuple[float, float] = (0.0, 0.0)
    bs_height: float = 20.0
    array_rows: int = 4
    array_cols: int = 8
    element_spacing: float = 0.5  # wavelengths at the carrier
    array_azimuth: float = 0.0  # boresight azimuth, radians, global frame
    array_downtilt: float = 0.0  # radians, positive tilts boresight down
    scatterers: list[Scatterer] = field(default_factory=list)
    los_blocked: bool = False
    los_gain: complex = 1.0
    noise_variance: float = 1e-4
    ue_antenna_spacing: float = 0.5  # wavelengths, 2x2 UE array
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_prb <= 0:
            raise ValueError("num_prb must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        self.scatterers = [s if isinstance(s, Scatterer) else Scatterer.from_dict(s)
                           for s in self.scatterers]
        self.bs_position = tuple(float(v) for v in self.bs_position[:2])

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def bs_location(self) -> np.ndarray:
        return np.array([self.bs_position[0], self.bs_position[1], self.bs_height])

    def prb_frequencies(self) -> np.ndarray:
        """Absolute centre frequency of every PRB, spread evenly over the band."""
        spacing = self.bandwidth / self.num_prb
        k = np.arange(self.num_prb)
        return self.carrier_frequency + (k - (self.num_prb - 1) / 2) * spacing

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["scatterers"] = [s.to_dict() for s in self.scatterers]
        d["los_gain"] = [complex(self.los_gain).real, complex(self.los_gain).imag]
        d["bs_position"] = list(self.bs_position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if isinstance(d.get("los_gain"), (list, tuple)):
            d["los_gain"] = complex(*d["los_gain"])
        return cls(**d)


@dataclass
class TrajectoryConfig:
    waypoints: list[tuple[float, float, float]] = field(default_factory=lambda: [
        (0.0, 0.0, 1.5), (25.2, 0.0, 1.5), (25.2, 12.6, 1.5), (0.0, 12.6, 1.5)])
    speed: float = 4.2
    snapshot_interval: float = 0.020
    num_laps: int = 5
    lap_jitter_std: float = 0.05
    jitter_harmonics: int = 6
    # std (m) of a smooth per-lap along-track offset; models speed variation
    # between laps while every lap still starts and ends at the first waypoint
    along_track_jitter_std: float = 0.0
    along_track_harmonics: int = 3

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.snapshot_interval <= 0:
            raise ValueError("snapshot_interval must be positive")
        if self.num_laps < 1:
            raise ValueError("num_laps must be at least 1")
        if self.lap_jitter_std < 0 or self.along_track_jitter_std < 0:
            raise ValueError("jitter std must be nonnegative")
        self.waypoints = [tuple(float(v) for v in w) for w in self.waypoints]
        pts = self.waypoints
        if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if len(pts) < 2:
            raise ValueError("a lap needs at least two distinct waypoints")
        self.waypoints = pts

    @property
    def step_length(self) -> float:
        return self.speed * self.snapshot_interval

    def perimeter(self) -> float:
        pts = np.asarray(self.waypoints + [self.waypoints[0]])
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def snapshots_per_lap(self) -> int:
        ratio = self.perimeter() / self.step_length
        return int(math.floor(ratio + 1e-9))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["waypoints"] = [list(w) for w in self.waypoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryConfig":
        return cls(**d)


@dataclass
class BeamResponseTable:
    """DFT grid of beams on a planar array, replicated on both polarisations.

    Beams ``0 .. E-1`` are the vertical port, ``E .. 2E-1`` the horizontal
    one, where ``E = rows * cols``. Within a polarisation the index is
    ``row_beam * cols + col_beam``.
    """

    rows: int
    cols: int
    carrier_frequency: float
    element_spacing: float = 0.5
    orthonormal: bool = False

    def __post_init__(self):
        ny, nz = np.meshgrid(np.arange(self.cols), np.arange(self.rows))
        self.element_y = ny.ravel().astype(float)
        self.element_z = nz.ravel().astype(float)
        uy = (2 * np.arange(self.cols) - self.cols + 1) / self.cols
        uz = (2 * np.arange(self.rows) - self.rows + 1) / self.rows
        gy, gz = np.meshgrid(uy, uz)
        self.grid_uy = gy.ravel()
        self.grid_uz = gz.ravel()
        # weights[n, b]: element n, beam b
        phase = np.pi * (np.outer(self.element_y, self.grid_uy) + np.outer(self.element_z, self.grid_uz))
        self.weights = np.exp(1j * phase * (2 * self.element_spacing))
        if self.orthonormal:
            self.weights /= math.sqrt(self.num_elements)

    @property
    def num_elements(self) -> int:
        return self.rows * self.cols

    @property
    def num_beams(self) -> int:
        return 2 * self.num_elements

    def grid_angles(self, beam: int) -> tuple[float, float]:
        """(azimuth, elevation) in the array frame at which ``beam`` peaks."""
        b = beam % self.num_elements
        uy, uz = self.grid_uy[b], self.grid_uz[b]
        if uy * uy + uz * uz > 1.0:
            raise ValueError(f"beam {beam} points outside the visible region (u={uy:.3f}, {uz:.3f})")
        theta = math.asin(uz)
        phi = math.asin(self.grid_uy[b] / math.cos(theta))
        return phi, theta

    def element_response(self, azimuth, elevation, freqs) -> np.ndarray:
        """Element-domain response ``[P, F, E]`` for arrivals at the given local angles."""
        az = np.atleast_1d(np.asarray(azimuth, dtype=float))
        el = np.atleast_1d(np.asarray(elevation, dtype=float))
        f = np.atleast_1d(np.asarray(freqs, dtype=float))
        uy = np.cos(el) * np.sin(az)
        uz = np.sin(el)
        scale = 2 * np.pi * self.element_spacing * f / self.carrier_frequency
        geo = np.outer(uy, self.element_y) + np.outer(uz, self.element_z)  # [P, E]
        return np.exp(1j * scale[None, :, None] * geo[:, None, :])

    def response(self, azimuth, elevation, freqs) -> np.ndarray:
        """Beam responses ``[P, 2E, F]``: vertical beams first, then horizontal."""
        a = self.element_response(azimuth, elevation, freqs)
        beam = a @ self.weights.conj()  # [P, F, E]
        beam = np.moveaxis(beam, 1, 2)
        return np.concatenate([beam, beam], axis=1)


def build_beam_responses(cfg: SceneConfig, orthonormal: bool = False) -> BeamResponseTable:
    if cfg.array_rows * cfg.array_cols != 32:
        raise ValueError(
            f"array {cfg.array_rows}x{cfg.array_cols} has {cfg.array_rows * cfg.array_cols} "
            "elements per polarisation, expected 32")
    return BeamResponseTable(cfg.array_rows, cfg.array_cols, cfg.carrier_frequency,
                             cfg.element_spacing, orthonormal)


@dataclass
class MultipathSet:
    delays: np.ndarray  # [P] seconds
    gains: np.ndarray  # [P, M_UE] complex
    azimuth: np.ndarray  # [P] radians, array frame
    elevation: np.ndarray  # [P] radians, array frame

    def __post_init__(self):
        if len(self.delays) < 1:
            raise ValueError("a multipath set needs at least one path")
        if np.any(self.delays < 0):
            raise ValueError("path delays must be nonnegative")

    @property
    def num_paths(self) -> int:
        return len(self.delays)

    def union(self, other: "MultipathSet") -> "MultipathSet":
        return MultipathSet(
            np.concatenate([self.delays, other.delays]),
            np.concatenate([self.gains, other.gains]),
            np.concatenate([self.azimuth, other.azimuth]),
            np.concatenate([self.elevation, other.elevation]),
        )


def array_frame_angles(cfg: SceneConfig, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert global unit vectors (BS toward source, ``[..., 3]``) to array azimuth/elevation."""
    d = np.asarray(direction, dtype=float)
    ca, sa = math.cos(cfg.array_azimuth), math.sin(cfg.array_azimuth)
    x = ca * d[..., 0] + sa * d[..., 1]
    y = -sa * d[..., 0] + ca * d[..., 1]
    z = d[..., 2]
    ct, st = math.cos(cfg.array_downtilt), math.sin(cfg.array_downtilt)
    xt = ct * x - st * z
    zt = st * x + ct * z
    return np.arctan2(y, xt), np.arcsin(np.clip(zt, -1.0, 1.0))


def ue_antenna_offsets(cfg: SceneConfig) -> np.ndarray:
    """Fixed 2x2 horizontal UE array, ``[4, 3]`` metres relative to the UE centre."""
    s = cfg.ue_antenna_spacing * cfg.wavelength
    g = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]) * s
    return np.column_stack([g, np.zeros(NUM_UE_LAYERS)])


def synthesize_paths(cfg: SceneConfig, ue_position, t: float = 0.0, rng=None) -> MultipathSet:
    """Direct path plus one single-bounce path per scatterer.

    ``t`` and ``rng`` are accepted for interface symmetry; the geometry is
    static, so paths depend on the UE position only.
    """
    ue = np.asarray(ue_position, dtype=float)
    bs = cfg.bs_location
    if np.linalg.norm(ue - bs) < 1e-9:
        raise ValueError("UE position coincides with the BS; arrival angle undefined")
    k0 = 2 * np.pi / cfg.wavelength
    offsets = ue_antenna_offsets(cfg)

    delays, gains, dirs = [], [], []

    def add(length, amplitude, arrival_dir, departure_dir):
        delays.append(length / SPEED_OF_LIGHT)
        ue_phase = np.exp(1j * k0 * offsets @ departure_dir)
        gains.append(amplitude * ue_phase)
        dirs.append(arrival_dir)

    if not cfg.los_blocked:
        v = ue - bs
        d = float(np.linalg.norm(v))
        add(d, complex(cfg.los_gain) / d, v / d, -v / d)

    for s in cfg.scatterers:
        sp = np.asarray(s.position)
        to_ue = ue - sp
        d1 = float(np.linalg.norm(to_ue))
        if d1 <= s.radius:
            raise ValueError(f"UE position {ue.tolist()} lies inside scatterer at {list(s.position)}")
        to_bs = bs - sp
        d2 = float(np.linalg.norm(to_bs))
        if d2 < 1e-9:
            raise ValueError("scatterer coincides with the BS")
        amp = s.reflection_gain / (d1 + d2)
        if s.normal is not None:
            bis = to_ue / d1 + to_bs / d2
            nb = np.linalg.norm(bis)
            c = float(np.dot(s.normal, bis / nb)) if nb > 0 else 0.0
            amp *= max(c, 0.0) ** s.lobe_exponent
        add(d1 + d2, amp, -to_bs / d2, -to_ue / d1)

    if not delays:
        raise ValueError("scene produces no propagation paths")
    az, el = array_frame_angles(cfg, np.array(dirs))
    return MultipathSet(np.array(delays), np.array(gains), az, el)


def evaluate_ctf(paths: MultipathSet, beams: BeamResponseTable, freqs) -> np.ndarray:
    """Per-beam CTF ``[M_UE, 2E, F]``: sum over paths of beam gain x path gain x delay phase."""
    f = np.asarray(freqs, dtype=float)
    beta = beams.response(paths.azimuth, paths.elevation, f)  # [P, B, F]
    phase = np.exp(-2j * np.pi * np.outer(paths.delays, f))  # [P, F]
    weighted = beta * phase[:, None, :]
    p, b, nf = weighted.shape
    out = paths.gains.T @ weighted.reshape(p, b * nf)
    return out.reshape(paths.gains.shape[1], b, nf)


@dataclass
class UplinkSnapshot:
    index: int
    timestamp: float
    lap: int
    ue_position: np.ndarray
    ctf: np.ndarray  # [4, 64, num_prb] complex, zeros where missing
    validity_mask: np.ndarray  # same shape, bool


def prb_block_index(num_prb: int) -> np.ndarray:
    """Final-PRSG index each PRB feeds (pairs then triples; the tail folds into the last)."""
    n_pairs = (num_prb + 1) // 2
    n_out = max(n_pairs // 3, 1)
    return np.minimum(np.arange(num_prb) // PRBS_PER_BLOCK, n_out - 1)


def _lateral_offsets(traj: TrajectoryConfig, lap: int, arclength: np.ndarray, seed: int) -> np.ndarray:
    if traj.lap_jitter_std == 0:
        return np.zeros_like(arclength)
    rng = np.random.default_rng([seed, 2, lap])
    k = traj.jitter_harmonics
    phases = rng.uniform(0, 2 * np.pi, size=k)
    amp = traj.lap_jitter_std * math.sqrt(2.0 / k)
    per = traj.perimeter()
    harm = np.arange(1, k + 1)
    return amp * np.sin(2 * np.pi * np.outer(arclength, harm) / per + phases).sum(axis=1)


def _along_track_offsets(traj: TrajectoryConfig, lap: int, arclength: np.ndarray, seed: int) -> np.ndarray:
    """Smooth offset vanishing at both lap ends; slope kept above -0.9 so travel stays forward."""
    if traj.along_track_jitter_std == 0:
        return np.zeros_like(arclength)
    rng = np.random.default_rng([seed, 4, lap])
    k = traj.along_track_harmonics
    per = traj.perimeter()
    harm = np.arange(1, k + 1)
    amps = traj.along_track_jitter_std * math.sqrt(2.0 / k) * rng.standard_normal(k)
    slope_bound = float(np.sum(np.abs(amps) * np.pi * harm / per))
    if slope_bound > 0.9:
        amps *= 0.9 / slope_bound
    return np.sin(np.pi * np.outer(arclength, harm) / per) @ amps


def trajectory_positions(traj: TrajectoryConfig, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """UE positions ``[T, 3]`` and lap index ``[T]`` for the whole run."""
    pts = np.asarray(traj.waypoints + [traj.waypoints[0]], dtype=float)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if seg_len.sum() <= 0:
        raise ValueError("trajectory has zero length")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    per = cum[-1]
    n = traj.snapshots_per_lap()
    if n < 1:
        raise ValueError("lap shorter than one snapshot step")
    s0 = np.arange(n) * traj.step_length
    positions, laps = [], []
    for lap in range(traj.num_laps):
        s = np.mod(s0 + _along_track_offsets(traj, lap, s0, seed), per)
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        frac = (s - cum[idx]) / seg_len[idx]
        base = pts[idx] + frac[:, None] * seg[idx]
        tangent = seg[idx] / seg_len[idx, None]
        lateral = np.column_stack([-tangent[:, 1], tangent[:, 0], np.zeros(n)])
        off = _lateral_offsets(traj, lap, s, seed)
        positions.append(base + off[:, None] * lateral)
        laps.append(np.full(n, lap))
    return np.concatenate(positions), np.concatenate(laps)


class SnapshotGenerator:
    """Deterministic, index-addressable source of raw uplink snapshots.

    Every snapshot draws from its own RNG substream keyed by (seed, index),
    so output does not depend on evaluation order or thread count.
    """

    def __init__(self, scene: SceneConfig, traj: TrajectoryConfig,
                 missing_block_fraction: float = 0.1, stall_probability: float = 0.0):
        if not 0.0 <= missing_block_fraction <= 1.0:
            raise ValueError("missing_block_fraction must lie in [0, 1]")
        self.scene = scene
        self.traj = traj
        self.missing_block_fraction = missing_block_fraction
        self.stall_probability = stall_probability
        self.beams = build_beam_responses(scene)
        self.freqs = scene.prb_frequencies()
        self.positions, self.laps = trajectory_positions(traj, scene.rng_seed)
        self.block_of_prb = prb_block_index(scene.num_prb)
        self.num_blocks = int(self.block_of_prb.max()) + 1

    def __len__(self) -> int:
        return len(self.positions)

    def _stalled(self, k: int) -> bool:
        if k == 0 or self.stall_probability <= 0:
            return False
        return np.random.default_rng([self.scene.rng_seed, 3, k]).random() < self.stall_probability

    def _fresh(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        sc = self.scene
        rng = np.random.default_rng([sc.rng_seed, 1, k])
        paths = synthesize_paths(sc, self.positions[k], k * self.traj.snapshot_interval)
        h = evaluate_ctf(paths, self.beams, self.freqs)
        if sc.noise_variance > 0:
            scale = math.sqrt(sc.noise_variance / 2)
            h = h + scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
        missing = rng.random((NUM_UE_LAYERS, self.num_blocks)) < self.missing_block_fraction
        mask_lp = ~missing[:, self.block_of_prb]  # [layers, prb]
        mask = np.broadcast_to(mask_lp[:, None, :], h.shape).copy()
        h[~mask] = 0
        return h, mask

    def raw(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        src = k
        while self._stalled(src):
            src -= 1
        return self._fresh(src)

    def snapshot(self, k: int) -> UplinkSnapshot:
        h, mask = self.raw(k)
        return UplinkSnapshot(k, k * self.traj.snapshot_interval, int(self.laps[k]),
                              self.positions[k].copy(), h, mask)


def generate_trajectory_dataset(scene: SceneConfig, traj: TrajectoryConfig,
                                missing_block_fraction: float = 0.1, stall_probability: float = 0.0,
                                threads: int = 1) -> Iterator[UplinkSnapshot]:
    """Yield raw uplink snapshots in timestamp order."""
    gen = SnapshotGenerator(scene, traj, missing_block_fraction, stall_probability)
    if threads <= 1:
        for k in range(len(gen)):
            yield gen.snapshot(k)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded window keeps memory flat; map preserves order
        chunk = 8 * threads
        for start in range(0, len(gen), chunk):
            yield from pool.map(gen.snapshot, range(start, min(start + chunk, len(gen))))
