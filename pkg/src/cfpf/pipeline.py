"""Experiment steps shared by the CLI and the acceptance tests."""
from __future__ import annotations

import statistics
import time

import numpy as np

from . import kernels
from .channel import drop_network
from .config import RunConfig
from .dataset import DatasetFile, fit_normalization, split
from .metrics import EvaluationRecord, net_se
from .rdn import PowerRDN, TrainResult, predict_and_refine, train
from .solver import refine, solve_alternating


def check_shapes(cfg: RunConfig, data: DatasetFile) -> None:
    n = cfg.network
    if (data.M, data.K, data.tau) != (n.M, n.K, n.tau):
        raise ValueError(
            f"dataset (M, K, tau)=({data.M}, {data.K}, {data.tau}) does not match "
            f"config ({n.M}, {n.K}, {n.tau})")


def splits(cfg: RunConfig, data: DatasetFile):
    return split(len(data), cfg.data.train, cfg.data.val, cfg.data.test)


def train_model(cfg: RunConfig, data: DatasetFile) -> tuple[PowerRDN, TrainResult]:
    check_shapes(cfg, data)
    tr, va, _ = splits(cfg, data)
    x = data.inputs()
    stats = fit_normalization(x, tr, data.tau)
    xn = stats.apply(x)
    y = data.labels
    result = train(xn[tr], y[tr], xn[va], y[va], cfg.rdn, cfg.train)
    return PowerRDN(cfg=cfg.rdn, params=result.params, stats=stats), result


def _realization(cfg: RunConfig, data: DatasetFile, i: int):
    rec = data.records[i]
    real = drop_network(cfg.network, int(rec["seed"]))
    fading = 10.0 * np.log10(real.beta.T) if data.encoding == 1 else real.beta.T
    if not np.array_equal(fading, rec["fading"]):
        raise ValueError(f"sample {i}: stored fading does not match a fresh drop; wrong network config?")
    return real


def evaluate(cfg: RunConfig, data: DatasetFile, model: PowerRDN | None, indices=None,
             use_labels: bool = False, backend: str | None = None):
    """Per-sample records for solver labels and network predictions.

    Solver time is a fresh alternating-solver run; network time covers input
    construction, normalization, the forward pass and one filter refinement.
    With ``use_labels`` the stored labels stand in for the predictions.
    """
    check_shapes(cfg, data)
    if indices is None:
        indices = splits(cfg, data)[2]
    tau_c = cfg.network.tau_c
    records, rows = [], []
    for i in indices:
        real = _realization(cfg, data, int(i))
        label = np.array(data.records[i]["label"], dtype=float)

        start = time.perf_counter()
        solve_alternating(real, cfg.solver, backend)
        solver_time = time.perf_counter() - start
        _, rates = refine(real, label, backend)
        rs = EvaluationRecord(net_se(rates, real.tau, tau_c), solver_time, "solver")

        start = time.perf_counter()
        if use_labels:
            _, rates = refine(real, label, backend)
            net_rates = net_se(rates, real.tau, tau_c)
        else:
            _, _, net_rates = predict_and_refine(model, real, tau_c, backend)
        net_time = time.perf_counter() - start
        rn = EvaluationRecord(net_rates, net_time, "network")
        records += [rs, rn]
        rows.append((int(i), int(data.records[i]["seed"]), rs.sum_se, rn.sum_se,
                     rs.jain, rn.jain, solver_time, net_time))
    return records, rows


def benchmark(cfg: RunConfig, data: DatasetFile, model: PowerRDN, indices=None,
              backends=None, repeat: int = 3) -> dict:
    """Per-instance timing of the alternating solver versus inference plus refinement.

    Each instance is timed ``repeat`` times per path and the median kept.
    Both paths run on the same kernel backend.
    """
    check_shapes(cfg, data)
    if indices is None:
        indices = splits(cfg, data)[2]
    backends = backends or [kernels.ACTIVE]
    reals = [_realization(cfg, data, int(i)) for i in indices]
    report = {}
    for name in backends:
        solver_t, net_t = [], []
        for real in reals:
            runs = []
            for _ in range(repeat):
                start = time.perf_counter()
                solve_alternating(real, cfg.solver, name)
                runs.append(time.perf_counter() - start)
            solver_t.append(statistics.median(runs))
            runs = []
            for _ in range(repeat):
                start = time.perf_counter()
                predict_and_refine(model, real, cfg.network.tau_c, name)
                runs.append(time.perf_counter() - start)
            net_t.append(statistics.median(runs))
        solver_t, net_t = np.array(solver_t), np.array(net_t)
        report[name] = {
            "instances": len(reals),
            "solver_median_us": round(float(np.median(solver_t)) * 1e6, 3),
            "solver_mean_us": round(float(np.mean(solver_t)) * 1e6, 3),
            "network_median_us": round(float(np.median(net_t)) * 1e6, 3),
            "network_mean_us": round(float(np.mean(net_t)) * 1e6, 3),
            "ratio_mean": float(np.mean(net_t) / np.mean(solver_t)),
            "ratio_median": float(np.median(net_t) / np.median(solver_t)),
            "speedup_mean": float(np.mean(solver_t) / np.mean(net_t)),
        }
    return report
