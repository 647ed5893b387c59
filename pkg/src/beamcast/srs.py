"""Uplink SRS processing: PRB grouping, validation, normalisation, CIR features."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

NUM_PRSG = 46
Q15_SCALE = 32768
Q15_MAX = 32767 / 32768
SRSQ15_MAGIC = b"SRSQ15"


class Verdict(enum.IntEnum):
    VALID = 0
    INSUFFICIENT_CSI = 1
    STALLED = 2


@dataclass
class PrsgCtf:
    values: np.ndarray  # [4, 64, 46] complex
    validity_mask: np.ndarray  # [4, 64, 46] bool
    timestamp: float = 0.0

    def __post_init__(self):
        if self.values.shape != self.validity_mask.shape:
            raise ValueError("values and mask shapes differ")

    def aggregate(self) -> tuple[np.ndarray, np.ndarray]:
        """Collapse UE layers: RMS magnitude per (beam, PRSG) and the all-layers-valid mask."""
        mask = self.validity_mask.all(axis=0)
        rms = np.sqrt(np.mean(np.abs(self.values) ** 2, axis=0))
        return np.where(mask, rms, 0.0), mask


@dataclass
class CirBeamMatrix:
    amplitudes: np.ndarray  # [64, 46] real, >= 0
    timestamp: float = 0.0
    valid: bool = True


# --- Q15 -------------------------------------------------------------------

def _q15_component(x):
    x = np.clip(np.asarray(x, dtype=float), -1.0, Q15_MAX)
    scaled = x * Q15_SCALE
    # round half away from zero
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q, -32768, 32767).astype(np.int16)


def q15_encode(c) -> np.ndarray:
    """Complex value(s) to int16 ``(..., 2)`` real/imag pairs, saturating at the Q15 range."""
    c = np.asarray(c)
    return np.stack([_q15_component(c.real), _q15_component(c.imag)], axis=-1)


def q15_decode(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.int16)
    return (s[..., 0].astype(float) + 1j * s[..., 1].astype(float)) / Q15_SCALE


# --- PRB reduction -----------------------------------------------------------

def _exact_mean(v):
    # offset by the first member so constant groups come back bit-exact
    first = v[..., :1]
    return (first + (v - first).mean(axis=-1, keepdims=True))[..., 0]


def _group_mean(values, mask, size):
    """Mean over consecutive groups of ``size`` along the last axis; the tail forms one short group."""
    n = values.shape[-1]
    full = n // size
    tail = n - full * size
    parts_v, parts_m = [], []
    if full:
        v = values[..., : full * size].reshape(*values.shape[:-1], full, size)
        m = mask[..., : full * size].reshape(*mask.shape[:-1], full, size)
        parts_v.append(_exact_mean(v))
        parts_m.append(m.all(axis=-1))
    if tail:
        parts_v.append(_exact_mean(values[..., full * size:, None].swapaxes(-1, -2)))
        parts_m.append(mask[..., full * size:].all(axis=-1, keepdims=True))
    return np.concatenate(parts_v, axis=-1), np.concatenate(parts_m, axis=-1)


def reduce_prb_to_prsg(raw: np.ndarray, mask: np.ndarray | None = None, timestamp: float = 0.0,
                       num_prb: int = 273) -> PrsgCtf:
    """273 PRBs -> 137 pair-averaged PRSGs -> 46 triple-averaged PRSGs.

    An output is valid only if every contributing PRB was; invalid outputs are zeroed.
    """
    raw = np.asarray(raw)
    if raw.shape[-1] != num_prb:
        raise ValueError(f"expected {num_prb} PRBs on the last axis, got shape {raw.shape}")
    if mask is None:
        mask = np.ones(raw.shape, dtype=bool)
    elif mask.shape != raw.shape:
        raise ValueError(f"mask shape {mask.shape} does not match data shape {raw.shape}")
    v1, m1 = _group_mean(raw, mask, 2)
    v2, m2 = _group_mean(v1, m1, 3)
    v2 = np.where(m2, v2, 0)
    return PrsgCtf(v2, m2, timestamp)


# --- validation ------------------------------------------------------------

def validate_snapshot(cur: PrsgCtf, prev: PrsgCtf | None = None, threshold: float = 0.60,
                      stall_tolerance: float = 0.0) -> Verdict:
    """Classify a snapshot as valid, short of CSI (< threshold populated) or stalled.

    Stalled means some beam is unchanged at every PRSG, or some PRSG is
    unchanged at every beam, compared with ``prev``. Only lines that carry
    data in both snapshots are compared, so blocks missing twice in a row
    are not mistaken for a stall.
    """
    _, agg_mask = cur.aggregate()
    if agg_mask.mean() < threshold:
        return Verdict.INSUFFICIENT_CSI
    if prev is None:
        return Verdict.VALID
    both = cur.validity_mask & prev.validity_mask
    same = (np.abs(cur.values - prev.values) <= stall_tolerance) | ~both
    same_mask = cur.validity_mask == prev.validity_mask
    populated_beam = both.any(axis=(0, 2))
    populated_prsg = both.any(axis=(0, 1))
    beam_stalled = (same & same_mask).all(axis=(0, 2)) & populated_beam
    prsg_stalled = (same & same_mask).all(axis=(0, 1)) & populated_prsg
    if beam_stalled.any() or prsg_stalled.any():
        return Verdict.STALLED
    return Verdict.VALID


def validate_stream(snapshots: Iterable[PrsgCtf], **kwargs) -> list[Verdict]:
    verdicts, prev = [], None
    for s in snapshots:
        verdicts.append(validate_snapshot(s, prev, **kwargs))
        prev = s
    return verdicts


# --- normalisation ----------------------------------------------------------

def normalization_scalar(snapshots: Sequence[PrsgCtf]) -> float:
    """Scalar making the mean-square of all valid entries equal to one."""
    energy, count = 0.0, 0
    for s in snapshots:
        v = s.values[s.validity_mask]
        energy += float(np.vdot(v, v).real)
        count += v.size
    if count == 0:
        raise ValueError("no valid entries to normalise")
    if energy == 0:
        raise ValueError("dataset is all zeros; cannot normalise")
    return float(np.sqrt(count / energy))


def normalize_dataset(snapshots: Sequence[PrsgCtf]) -> tuple[list[PrsgCtf], float]:
    s = normalization_scalar(snapshots)
    return [PrsgCtf(x.values * s, x.validity_mask, x.timestamp) for x in snapshots], s


# --- CIR features ------------------------------------------------------------

def hann_window(num: int = NUM_PRSG) -> np.ndarray:
    f = np.arange(num)
    return np.sin(np.pi * f / num) ** 2


def window_and_idft(rows: np.ndarray) -> np.ndarray:
    """Hann-window each row along frequency, IDFT with 1/F scaling, return magnitudes."""
    rows = np.asarray(rows)
    w = hann_window(rows.shape[-1])
    return np.abs(np.fft.ifft(rows * w, axis=-1))


def cir_features(ctf: PrsgCtf) -> CirBeamMatrix:
    agg, _ = ctf.aggregate()
    return CirBeamMatrix(window_and_idft(agg), ctf.timestamp, True)


# --- raw Q15 files -------------------------------------------------------------
# Layout (little-endian): magic "SRSQ15", u32 layers, u32 beams, u32 prbs,
# u32 record count, f64 scale (raw value = decoded / scale), then per record
# f64 timestamp followed by layers*beams*prbs int16 (re, im) pairs in
# layer-major, beam-major, PRB-minor order. A (0, 0) sample marks a missing entry.

_HEADER = struct.Struct("<6sIIIId")
_TS = struct.Struct("<d")


@dataclass
class RawQ15Header:
    layers: int
    beams: int
    prbs: int
    records: int
    scale: float

    @property
    def samples_per_record(self) -> int:
        return self.layers * self.beams * self.prbs

    @property
    def record_bytes(self) -> int:
        return _TS.size + 4 * self.samples_per_record


def write_q15_file(path, records: Iterable[tuple], shape: tuple[int, int, int],
                   num_records: int, scale: float) -> None:
    """Write raw records ``(timestamp, complex [layers, beams, prbs], mask)`` after
    multiplying by ``scale``.

    Present samples that would quantise to (0, 0) are nudged to the nearest
    nonzero code (one LSB) so they are not read back as missing.
    """
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SRSQ15_MAGIC, *shape, num_records, scale))
        written = 0
        for ts, raw, mask in records:
            if raw.shape != shape:
                raise ValueError(f"record shape {raw.shape} != header shape {shape}")
            q = q15_encode(raw * scale)
            q[~mask] = 0
            zero = mask & (q == 0).all(axis=-1)
            if zero.any():
                # push the dominant component to one LSB, keeping its sign
                re, im = raw.real[zero], raw.imag[zero]
                use_im = np.abs(im) > np.abs(re)
                lsb = np.where(np.where(use_im, im, re) < 0, -1, 1)
                q[zero, 0] = np.where(use_im, 0, lsb)
                q[zero, 1] = np.where(use_im, lsb, 0)
            fh.write(_TS.pack(ts))
            fh.write(q.astype("<i2").tobytes())
            written += 1
        if written != num_records:
            raise ValueError(f"wrote {written} records but header declares {num_records}")


def read_q15_header(fh: BinaryIO) -> RawQ15Header:
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ValueError(f"file too short for SRSQ15 header: {len(head)} of {_HEADER.size} bytes")
    magic, layers, beams, prbs, records, scale = _HEADER.unpack(head)
    if magic != SRSQ15_MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0, expected {SRSQ15_MAGIC!r}")
    if scale <= 0:
        raise ValueError(f"nonpositive scale {scale} at offset 22")
    return RawQ15Header(layers, beams, prbs, records, scale)


def iter_q15_file(path) -> Iterator[tuple[RawQ15Header, float, np.ndarray, np.ndarray]]:
    """Yield ``(header, timestamp, values, mask)`` per record; values are in raw units."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        hdr = read_q15_header(fh)
        expected = _HEADER.size + hdr.records * hdr.record_bytes
        if size != expected:
            actual = (size - _HEADER.size) / hdr.record_bytes
            raise ValueError(
                f"SRSQ15 file {path} holds {actual:.3f} records ({size} bytes) but header declares "
                f"{hdr.records} ({expected} bytes)")
        shape = (hdr.layers, hdr.beams, hdr.prbs)
        for _ in range(hdr.records):
            (ts,) = _TS.unpack(fh.read(_TS.size))
            q = np.frombuffer(fh.read(4 * hdr.samples_per_record), dtype="<i2").reshape(*shape, 2)
            mask = (q != 0).any(axis=-1)
            yield hdr, ts, q15_decode(q) / hdr.scale, mask
