"""Labeled training data: network drop -> alternating solver -> (input, powers).

Container layout (little-endian, no padding)::

    header  "CFPF" | u32 version | u32 M | u32 K | u32 tau | u64 count
            | u8 encoding (0 linear, 1 dB) | u64 master seed
    record  K x u32 pilot index | K*M x f64 fading (user-major)
            | K x f64 powers | f64 objective | u64 sample seed

Sample ``i`` is always built from ``mix_seed(master_seed, i)``, so the file
does not depend on how many workers produced it.
"""
from __future__ import annotations

import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .channel import NetworkConfig, NetworkRealization, drop_network, mix_seed
from .solver import (
    SolverOptions,
    build_quadratic_forms,
    optimal_filter,
    pf_objective,
    sinr_coefficients,
    solve_alternating,
)

MAGIC = b"CFPF"
VERSION = 1
ENC_LINEAR = 0
ENC_DB = 1
_HEADER = struct.Struct("<4sIIIIQBQ")


def record_dtype(M: int, K: int) -> np.dtype:
    return np.dtype([
        ("pov", "<u4", (K,)),
        ("fading", "<f8", (K, M)),
        ("label", "<f8", (K,)),
        ("objective", "<f8"),
        ("seed", "<u8"),
    ])


def build_input(realization: NetworkRealization, encoding: int = ENC_DB) -> np.ndarray:
    """``(K, M+1)`` network input: pilot index, then the user's fading to every AP."""
    fading = realization.beta.T
    if encoding == ENC_DB:
        fading = 10.0 * np.log10(fading)
    elif encoding != ENC_LINEAR:
        raise ValueError(f"unknown encoding flag {encoding}")
    return np.column_stack([realization.mu.astype(float), fading])


@dataclass(eq=False)
class DatasetFile:
    M: int
    K: int
    tau: int
    encoding: int
    master_seed: int
    records: np.ndarray

    def __post_init__(self):
        want = record_dtype(self.M, self.K)
        if self.records.dtype != want:
            raise ValueError("record dtype does not match (M, K)")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"]

    def inputs(self, indices=None) -> np.ndarray:
        """Network inputs ``(N, K, M+1)`` with fading in dB."""
        rec = self.records if indices is None else self.records[indices]
        fading = rec["fading"]
        if self.encoding == ENC_LINEAR:
            fading = 10.0 * np.log10(fading)
        return np.concatenate([rec["pov"][..., None].astype(float), fading], axis=-1)

    def header_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.M, self.K, self.tau,
                            len(self.records), self.encoding, self.master_seed)

    def write(self, path) -> None:
        if not np.all(np.isfinite(self.records["fading"])) or not np.all(
                np.isfinite(self.records["label"])):
            raise ValueError("non-finite values in dataset")
        with open(path, "wb") as fh:
            fh.write(self.header_bytes())
            fh.write(self.records.tobytes())

    @classmethod
    def read(cls, path, mmap: bool = False) -> "DatasetFile":
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, M, K, tau, count, enc, seed = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dt = record_dtype(M, K)
        expected = _HEADER.size + count * dt.itemsize
        if os.path.getsize(path) != expected:
            raise ValueError(f"{path}: size does not match header record count")
        if mmap:
            records = np.memmap(path, dtype=dt, mode="r", offset=_HEADER.size, shape=(count,))
        else:
            records = np.fromfile(path, dtype=dt, offset=_HEADER.size, count=count)
        return cls(M=M, K=K, tau=tau, encoding=enc, master_seed=seed, records=records)


@dataclass
class GenerationReport:
    converged: np.ndarray
    outer_iterations: np.ndarray
    solve_times: np.ndarray
    wall_time: float
    backend: str = ""

    def summary(self) -> dict:
        return {
            "count": int(self.converged.size),
            "converged": int(self.converged.sum()),
            "not_converged_indices": np.flatnonzero(~self.converged).tolist(),
            "outer_iterations_mean": float(self.outer_iterations.mean()),
            "outer_iterations_max": int(self.outer_iterations.max()),
            "solve_time_mean": float(self.solve_times.mean()),
            "wall_time": self.wall_time,
            "backend": self.backend,
        }


def _label_one(job):
    config, options, seed, encoding = job
    real = drop_network(config, seed)
    res = solve_alternating(real, options)
    inp = build_input(real, encoding)
    return (real.mu.astype(np.uint32), inp[:, 1:], res.p, res.objective,
            res.converged, res.outer_iterations, res.wall_time, res.backend)


def generate(config: NetworkConfig, count: int, master_seed: int,
             options: SolverOptions = SolverOptions(), jobs: int = 1,
             encoding: int = ENC_DB) -> tuple[DatasetFile, GenerationReport]:
    """Generate ``count`` labeled samples; output is independent of ``jobs``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = [mix_seed(master_seed, i) for i in range(count)]
    work = [(config, options, s, encoding) for s in seeds]
    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_label_one, work, chunksize=max(1, count // (4 * jobs))))
    else:
        results = [_label_one(w) for w in work]
    wall = time.perf_counter() - start

    records = np.zeros(count, dtype=record_dtype(config.M, config.K))
    for i, (pov, fading, label, obj, *_rest) in enumerate(results):
        records[i] = (pov, fading, label, obj, seeds[i])
    report = GenerationReport(
        converged=np.array([r[4] for r in results], dtype=bool),
        outer_iterations=np.array([r[5] for r in results]),
        solve_times=np.array([r[6] for r in results]),
        wall_time=wall,
        backend=results[0][7],
    )
    data = DatasetFile(M=config.M, K=config.K, tau=config.tau, encoding=encoding,
                       master_seed=int(master_seed), records=records)
    return data, report


def split(count: int, train_n: int, val_n: int, test_n: int):
    """Consecutive index ranges: first ``train_n``, next ``val_n``, next ``test_n``."""
    if min(train_n, val_n, test_n) < 0:
        raise ValueError("split sizes must be nonnegative")
    if train_n + val_n + test_n > count:
        raise ValueError(f"split {train_n}+{val_n}+{test_n} exceeds {count} samples")
    a, b = train_n, train_n + val_n
    return np.arange(0, a), np.arange(a, b), np.arange(b, b + test_n)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    pov_scale: float

    def apply(self, x):
        """Normalize ``(..., K, M+1)`` inputs (fading in dB)."""
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = x[..., 0] * self.pov_scale
        out[..., 1:] = (x[..., 1:] - self.mean) / self.std
        return out

    def invert(self, z):
        z = np.asarray(z, dtype=float)
        out = np.empty_like(z)
        out[..., 0] = z[..., 0] / self.pov_scale
        out[..., 1:] = z[..., 1:] * self.std + self.mean
        return out


def fit_normalization(inputs, train_indices, tau: int) -> NormalizationStats:
    """Per-AP-column z-score statistics over the training samples and users.

    ``inputs`` is an ``(N, K, M+1)`` array (or a :class:`DatasetFile`).
    """
    if isinstance(inputs, DatasetFile):
        inputs = inputs.inputs(train_indices)
    else:
        inputs = np.asarray(inputs, dtype=float)[train_indices]
    if len(inputs) == 0:
        raise ValueError("empty training split")
    fading = inputs[..., 1:].reshape(-1, inputs.shape[-1] - 1)
    mean = fading.mean(axis=0)
    std = fading.std(axis=0)
    if np.any(std <= 0):
        raise ValueError(f"zero-variance fading columns: {np.flatnonzero(std <= 0).tolist()}")
    return NormalizationStats(mean=mean, std=std, pov_scale=1.0 / tau)


def replay_objectives(data: DatasetFile, config: NetworkConfig, indices=None):
    """Objective of every stored label recomputed from a fresh drop.

    Filters are re-derived at the stored powers, so this reproduces the
    stored objective when the file and ``config`` belong together.
    """
    idx = range(len(data)) if indices is None else indices
    out = []
    for i in idx:
        rec = data.records[i]
        real = drop_network(config, int(rec["seed"]))
        forms = build_quadratic_forms(real)
        p = np.asarray(rec["label"], dtype=float)
        t = np.column_stack([optimal_filter(k, p, forms, real.rho) for k in range(real.K)])
        out.append(pf_objective(p, sinr_coefficients(t, forms, real.rho)))
    return np.array(out)
