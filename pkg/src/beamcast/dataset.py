"""Processed datasets and the BEAMDS01 container format.

Container layout, all little-endian::

    magic  "BEAMDS01"
    u32    version
    u32    T, layers, beams, prsgs
    f64    normalisation scalar
    32B    SHA-256 of the generating data config
    u32    metadata length, then UTF-8 JSON metadata
    T records:
        f64 timestamp, u8 verdict, u32 lap, 3 x f64 UE position
        validity mask, packed bits (layers*beams*prsgs)
        PRSG CTF, complex64 (layers*beams*prsgs)
        CIR amplitudes, f64 (beams*prsgs)
        per-beam energy target, f64 (beams)

Features and targets of snapshots that failed validation are zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .groundtruth import beam_energy_target, compute_dl_beam_tf
from .srs import PrsgCtf, Verdict, cir_features, reduce_prb_to_prsg, validate_snapshot

MAGIC = b"BEAMDS01"
VERSION = 1
_HEAD = struct.Struct("<8sIIIIId32sI")
_REC = struct.Struct("<dBI3d")


@dataclass
class Dataset:
    timestamps: np.ndarray  # [T]
    verdicts: np.ndarray  # [T] uint8
    laps: np.ndarray  # [T]
    positions: np.ndarray  # [T, 3]
    values: np.ndarray  # [T, layers, beams, prsgs] complex64, normalised
    masks: np.ndarray  # [T, layers, beams, prsgs] bool
    features: np.ndarray  # [T, beams, prsgs]
    targets: np.ndarray  # [T, beams]
    norm_scalar: float
    config_hash: bytes
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def valid(self) -> np.ndarray:
        return self.verdicts == Verdict.VALID

    @property
    def snapshot_interval(self) -> float:
        return float(self.meta.get("snapshot_interval", 0.02))

    def verdict_counts(self) -> dict[str, int]:
        return {v.name.lower(): int(np.sum(self.verdicts == v)) for v in Verdict}


def build_dataset(records: Iterable[tuple], num_records: int, *, num_prb: int, noise_variance: float,
                  validity_threshold: float = 0.60, stall_tolerance: float = 0.0,
                  mmse_sigma2: float | None = None, config_hash: bytes = b"\0" * 32,
                  meta: dict | None = None) -> Dataset:
    """Run raw per-PRB records through reduction, validation, normalisation,
    feature extraction and ground-truth computation.

    ``records`` yields ``(timestamp, lap, position, raw [layers, beams, prb], mask)``.
    """
    ts = np.zeros(num_records)
    laps = np.zeros(num_records, dtype=np.int64)
    pos = np.zeros((num_records, 3))
    verdicts = np.zeros(num_records, dtype=np.uint8)
    values = masks = None
    prev = None
    count = 0
    for k, (t, lap, p, raw, mask) in enumerate(records):
        if k >= num_records:
            raise ValueError(f"more than the declared {num_records} records")
        cur = reduce_prb_to_prsg(raw, mask, t, num_prb=num_prb)
        if values is None:
            values = np.zeros((num_records, *cur.values.shape), dtype=np.complex64)
            masks = np.zeros((num_records, *cur.values.shape), dtype=bool)
        verdicts[k] = validate_snapshot(cur, prev, validity_threshold, stall_tolerance)
        values[k] = cur.values
        masks[k] = cur.validity_mask
        ts[k], laps[k], pos[k] = t, lap, p
        prev = cur
        count += 1
    if count != num_records:
        raise ValueError(f"expected {num_records} records, got {count}")

    valid = verdicts == Verdict.VALID
    if not valid.any():
        raise ValueError("no snapshot passed validation")
    energy, n = 0.0, 0
    for k in np.nonzero(valid)[0]:
        v = values[k][masks[k]].astype(np.complex128)
        energy += float(np.vdot(v, v).real)
        n += v.size
    if energy == 0:
        raise ValueError("all valid snapshots are zero; cannot normalise")
    s = float(np.sqrt(n / energy))
    sigma2 = mmse_sigma2 if mmse_sigma2 is not None else noise_variance * s * s

    beams, prsgs = values.shape[2], values.shape[3]
    features = np.zeros((num_records, beams, prsgs))
    targets = np.zeros((num_records, beams))
    for k in range(num_records):
        values[k] = (values[k].astype(np.complex128) * s).astype(np.complex64)
        if valid[k]:
            ctf = PrsgCtf(values[k].astype(np.complex128), masks[k], ts[k])
            features[k] = cir_features(ctf).amplitudes
            targets[k] = beam_energy_target(compute_dl_beam_tf(ctf, sigma2)).eta
    meta = dict(meta or {})
    meta["mmse_sigma2"] = sigma2
    return Dataset(ts, verdicts, laps, pos, values, masks, features, targets, s, config_hash, meta)


def write_container(ds: Dataset, path) -> None:
    t, layers, beams, prsgs = ds.values.shape
    meta = json.dumps(ds.meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, t, layers, beams, prsgs, ds.norm_scalar,
                            ds.config_hash, len(meta)))
        fh.write(meta)
        for k in range(t):
            fh.write(_REC.pack(ds.timestamps[k], int(ds.verdicts[k]), int(ds.laps[k]), *ds.positions[k]))
            fh.write(np.packbits(ds.masks[k].ravel()).tobytes())
            fh.write(ds.values[k].astype("<c8").tobytes())
            fh.write(ds.features[k].astype("<f8").tobytes())
            fh.write(ds.targets[k].astype("<f8").tobytes())


def read_container(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise ValueError(f"{path}: {len(data)} bytes is too short for a BEAMDS01 header")
    magic, version, t, layers, beams, prsgs, s, chash, meta_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = _HEAD.size
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    cells = layers * beams * prsgs
    mask_bytes = (cells + 7) // 8
    rec_size = _REC.size + mask_bytes + 8 * cells + 8 * beams * prsgs + 8 * beams
    if len(data) - off != t * rec_size:
        raise ValueError(f"{path}: header declares {t} records but the body holds "
                         f"{(len(data) - off) / rec_size:.3f}")
    ds = Dataset(
        timestamps=np.zeros(t), verdicts=np.zeros(t, dtype=np.uint8), laps=np.zeros(t, dtype=np.int64),
        positions=np.zeros((t, 3)), values=np.zeros((t, layers, beams, prsgs), dtype=np.complex64),
        masks=np.zeros((t, layers, beams, prsgs), dtype=bool), features=np.zeros((t, beams, prsgs)),
        targets=np.zeros((t, beams)), norm_scalar=s, config_hash=chash, meta=meta)
    for k in range(t):
        ts, verdict, lap, x, y, z = _REC.unpack_from(data, off)
        ds.timestamps[k], ds.verdicts[k], ds.laps[k], ds.positions[k] = ts, verdict, lap, (x, y, z)
        off += _REC.size
        bits = np.frombuffer(data, np.uint8, mask_bytes, off)
        ds.masks[k] = np.unpackbits(bits, count=cells).astype(bool).reshape(layers, beams, prsgs)
        off += mask_bytes
        ds.values[k] = np.frombuffer(data, "<c8", cells, off).reshape(layers, beams, prsgs)
        off += 8 * cells
        ds.features[k] = np.frombuffer(data, "<f8", beams * prsgs, off).reshape(beams, prsgs)
        off += 8 * beams * prsgs
        ds.targets[k] = np.frombuffer(data, "<f8", beams, off)
        off += 8 * beams
    return ds
