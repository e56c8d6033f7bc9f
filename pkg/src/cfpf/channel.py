"""Network drops and large-scale statistics for the cell-free uplink.

APs and users are dropped uniformly on a ``D x D`` square with wrap-around
distances.  Only large-scale quantities are generated: path loss, log-normal
shadowing, the pilot order vector and the variance of the MMSE channel
estimate.  No small-scale fading is ever drawn; every rate used downstream
depends on these statistics alone.

Units: distances in km, powers in mW, noise in dBm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NetworkConfig:
    """Geometry and radio parameters of one network setup.

    Defaults follow the full-scale simulation setup (80 APs, 20 users,
    10 pilots on a 1 km square).
    """

    M: int = 80
    K: int = 20
    tau: int = 10
    D: float = 1.0
    d1: float = 0.05
    d0: float = 0.01
    L_pl: float = 140.7
    sigma_sh: float = 8.0
    pilot_power_mw: float = 200.0
    data_power_mw: float = 200.0
    noise_dbm: float = -92.0
    tau_c: int = 200
    # recorded for completeness; the noise power is given directly in dBm
    noise_figure_db: float = 9.0
    bandwidth_hz: float = 20e6
    orthogonal_first: bool = False

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValueError(f"need M >= 1 and K >= 1, got M={self.M}, K={self.K}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.tau >= self.tau_c:
            raise ValueError(f"tau ({self.tau}) must be smaller than tau_c ({self.tau_c})")
        if not 0 < self.d0 < self.d1 < self.D:
            raise ValueError("need 0 < d0 < d1 < D")
        if self.sigma_sh < 0:
            raise ValueError("sigma_sh must be nonnegative")
        if self.pilot_power_mw <= 0 or self.data_power_mw <= 0:
            raise ValueError("transmit powers must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class NetworkRealization:
    """One dropped network.

    ``beta`` and ``xi`` are ``(M, K)``; ``mu`` holds 1-based pilot indices.
    ``rho_p`` and ``rho`` are the normalized pilot and data SNRs.
    """

    ap_pos: np.ndarray
    user_pos: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    rho_p: float
    rho: float
    tau: int
    seed: int

    @property
    def M(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def phi2(self) -> np.ndarray:
        return pilot_gram(self.mu)


def mix_seed(master_seed: int, index: int) -> int:
    """Derive a per-sample 64-bit seed from a master seed and an index.

    SplitMix64 finalizer applied to ``master + (index + 1) * 0x9E3779B97F4A7C15``
    (mod 2**64).  Stable across platforms and Python versions.
    """
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def wrapped_distance(a, b, D: float):
    """Euclidean distance on the ``D x D`` torus.

    Broadcasts over leading axes; the last axis holds the two coordinates.
    """
    delta = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    delta = np.minimum(delta, D - delta)
    return np.sqrt(np.sum(delta * delta, axis=-1))


def path_loss(d, config: NetworkConfig):
    """Three-slope path loss in dB (negative numbers) for distances ``d`` in km."""
    d = np.maximum(np.asarray(d, dtype=float), config.d0)
    L, d0, d1 = config.L_pl, config.d0, config.d1
    far = -L - 35.0 * np.log10(d)
    mid = -L - 15.0 * np.log10(d1) - 20.0 * np.log10(d)
    near = -L - 15.0 * np.log10(d1) - 20.0 * np.log10(d0)
    out = np.where(d > d1, far, np.where(d > d0, mid, near))
    return out if out.ndim else float(out)


def large_scale_fading(pl_db, shadow_draw, sigma_sh: float):
    """Linear large-scale gain from path loss (dB) and a standard-normal draw."""
    return 10.0 ** (np.asarray(pl_db) / 10.0) * 10.0 ** (sigma_sh * np.asarray(shadow_draw) / 10.0)


def assign_pilots(K: int, tau: int, rng: np.random.Generator, orthogonal_first: bool = False):
    """Pilot order vector with entries in ``1..tau``.

    Uniform i.i.d. by default.  With ``orthogonal_first`` the first
    ``min(K, tau)`` users get distinct pilots (random order) and the rest
    are drawn uniformly.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not orthogonal_first:
        return rng.integers(1, tau + 1, size=K).astype(np.int64)
    head = min(K, tau)
    distinct = rng.permutation(tau)[:head] + 1
    rest = rng.integers(1, tau + 1, size=K - head)
    return np.concatenate([distinct, rest]).astype(np.int64)


def pilot_gram(mu) -> np.ndarray:
    """Squared pilot inner products for canonical orthonormal pilots."""
    mu = np.asarray(mu)
    return (mu[:, None] == mu[None, :]).astype(float)


def estimation_quality(beta, mu, phi2, rho_p: float, tau: int) -> np.ndarray:
    """Variance of the MMSE channel estimate for every (AP, user) pair.

    ``beta`` is the full ``(M, K)`` matrix because each user's estimate is
    contaminated by every co-pilot user; column ``k`` of the result belongs
    to user ``k``.  Always ``0 < xi <= beta``.
    """
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0):
        raise ValueError("large-scale fading must be strictly positive")
    phi2 = pilot_gram(mu) if phi2 is None else np.asarray(phi2, dtype=float)
    gain = tau * rho_p
    # contamination[m, k] = sum_i beta[m, i] * phi2[k, i]
    contamination = beta @ phi2.T
    return gain * beta**2 / (gain * contamination + 1.0)


def normalized_snrs(config: NetworkConfig) -> tuple[float, float]:
    """Pilot and data SNRs: transmit power over noise power, both in mW."""
    noise_mw = 10.0 ** (config.noise_dbm / 10.0)
    return config.pilot_power_mw / noise_mw, config.data_power_mw / noise_mw


def drop_network(config: NetworkConfig, seed: int) -> NetworkRealization:
    """Drop APs and users and compute all large-scale statistics.

    RNG consumption order is fixed (AP positions, user positions, shadowing,
    pilots) so the result is a pure function of ``(config, seed)``.
    """
    rng = np.random.default_rng(int(seed))
    M, K = config.M, config.K
    ap_pos = rng.uniform(0.0, config.D, size=(M, 2))
    user_pos = rng.uniform(0.0, config.D, size=(K, 2))
    shadow = rng.standard_normal(size=(M, K))
    mu = assign_pilots(K, config.tau, rng, config.orthogonal_first)

    d = wrapped_distance(ap_pos[:, None, :], user_pos[None, :, :], config.D)
    beta = large_scale_fading(path_loss(d, config), shadow, config.sigma_sh)
    rho_p, rho = normalized_snrs(config)
    xi = estimation_quality(beta, mu, pilot_gram(mu), rho_p, config.tau)
    return NetworkRealization(
        ap_pos=ap_pos,
        user_pos=user_pos,
        beta=beta,
        mu=mu,
        xi=xi,
        rho_p=rho_p,
        rho=rho,
        tau=config.tau,
        seed=int(seed),
    )
