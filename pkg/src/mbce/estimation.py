"""OFDM pilot transmission, coarse LS channel estimation, and an OMP baseline.

Pilot structure: at each pilot subcarrier the transmitter sends Nt successive
pilot symbols forming a scaled unitary DFT matrix across transmit antennas,
so per-subcarrier least squares is a well-conditioned right inverse. The
coarse estimate interpolates magnitude and unwrapped phase across the band
and transforms back to the tap domain with an inverse DFT.

Everything is a pure function of (inputs, seed); Monte-Carlo trials can be
parallelized across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel_model import (
    ArrayGeometry,
    ChannelTensor,
    channel_frequency_response,
    steering_vector,
)

__all__ = [
    "PilotConfig",
    "PilotObservation",
    "transmit_pilots",
    "ls_estimate",
    "interpolate_full_band",
    "to_time_domain",
    "coarse_estimate",
    "OmpDictionary",
    "OmpResult",
    "omp_estimate",
    "nmse",
    "nmse_db",
]


def _comb_indices(n_sc: int, n_pilot: int) -> tuple[int, ...]:
    return tuple(int(i * n_sc // n_pilot) for i in range(n_pilot))


@dataclass(frozen=True)
class PilotConfig:
    """Pilot allocation and noise level for one OFDM sounding round.

    ``placement`` defaults to an equispaced comb. ``pilot_matrix`` is the
    Nt x Nt unitary matrix transmitted (column per symbol slot) at every
    pilot subcarrier. Noise: if ``snr_db`` is set, the noise variance is
    derived per call as mean received pilot power over 10^(snr/10) per
    receive antenna; otherwise ``noise_var`` is used directly (0/None means
    noiseless).
    """

    n_sc: int
    n_pilot: int
    nt: int
    snr_db: float | None = None
    noise_var: float | None = None
    p_t: float = 1.0
    placement: tuple[int, ...] = ()
    pilot_matrix: np.ndarray | None = None

    def __post_init__(self):
        if not 1 <= self.n_pilot <= self.n_sc:
            raise ValueError(f"need 1 <= n_pilot <= n_sc, got {self.n_pilot}/{self.n_sc}")
        if self.p_t <= 0:
            raise ValueError("transmit power must be > 0")
        if not self.placement:
            object.__setattr__(self, "placement", _comb_indices(self.n_sc, self.n_pilot))
        if len(self.placement) != self.n_pilot or any(
            b <= a for a, b in zip(self.placement, self.placement[1:])
        ):
            raise ValueError("pilot placement must be strictly increasing, one per pilot")
        if self.placement[0] < 0 or self.placement[-1] >= self.n_sc:
            raise ValueError("pilot placement outside subcarrier range")
        if self.pilot_matrix is None:
            dft = np.fft.fft(np.eye(self.nt)) / np.sqrt(self.nt)
            object.__setattr__(self, "pilot_matrix", dft)
        u = self.pilot_matrix
        if u.shape != (self.nt, self.nt):
            raise ValueError("pilot matrix must be Nt x Nt")
        if np.max(np.abs(u.conj().T @ u - np.eye(self.nt))) > 1e-10:
            raise ValueError("pilot matrix must be unitary within 1e-10")

    @property
    def scaled_matrix(self) -> np.ndarray:
        """Pilot matrix scaled to transmit power."""
        return np.sqrt(self.p_t) * self.pilot_matrix


@dataclass
class PilotObservation:
    """Received Nr x Nt matrices, one per pilot subcarrier."""

    y: np.ndarray                 # [n_pilot, Nr, Nt]
    placement: tuple[int, ...]

    def __post_init__(self):
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observation contains non-finite entries")


def transmit_pilots(h: ChannelTensor, cfg: PilotConfig, rng_seed) -> PilotObservation:
    """Simulate pilot reception: ``Y_k = H_k S + V_k`` at each pilot subcarrier.

    Deterministic given ``rng_seed``.
    """
    if cfg.n_sc < h.d:
        raise ValueError(f"subcarriers {cfg.n_sc} < tap count {h.d}")
    if cfg.nt != h.nt:
        raise ValueError(f"pilot config is for Nt={cfg.nt}, channel has Nt={h.nt}")
    h_freq = channel_frequency_response(h, cfg.n_sc)[list(cfg.placement)]
    s = cfg.scaled_matrix
    y = h_freq @ s

    if cfg.snr_db is not None:
        p_sig = float(np.mean(np.abs(y) ** 2))
        sigma2 = p_sig / 10.0 ** (cfg.snr_db / 10.0)
    else:
        sigma2 = float(cfg.noise_var or 0.0)
    if sigma2 > 0:
        rng = np.random.default_rng(rng_seed)
        scale = np.sqrt(sigma2 / 2.0)
        noise = scale * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
        y = y + noise
    return PilotObservation(y=y, placement=cfg.placement)


def ls_estimate(obs: PilotObservation, cfg: PilotConfig) -> np.ndarray:
    """Per-pilot-subcarrier least squares: ``H_hat_k = Y_k S^{-1}``."""
    s_inv = cfg.pilot_matrix.conj().T / np.sqrt(cfg.p_t)
    return obs.y @ s_inv


def interpolate_full_band(pilot_estimates: np.ndarray, cfg: PilotConfig) -> np.ndarray:
    """Linear magnitude/unwrapped-phase interpolation across all subcarriers.

    Edges are held at the nearest pilot value. A single pilot extrapolates as
    a constant.
    """
    est = np.asarray(pilot_estimates)
    n_p = est.shape[0]
    if n_p != len(cfg.placement):
        raise ValueError("estimate count does not match pilot placement")
    xs = np.asarray(cfg.placement, dtype=np.float64)
    xq = np.arange(cfg.n_sc, dtype=np.float64)

    mag = np.abs(est)
    phase = np.unwrap(np.angle(est), axis=0) if n_p > 1 else np.angle(est)

    if n_p == 1:
        full = np.broadcast_to(est[0], (cfg.n_sc,) + est.shape[1:]).copy()
        return full

    # Shared breakpoints: one searchsorted, then a broadcast lerp per pair.
    idx = np.clip(np.searchsorted(xs, xq, side="right") - 1, 0, n_p - 2)
    x0, x1 = xs[idx], xs[idx + 1]
    w = np.clip((xq - x0) / (x1 - x0), 0.0, 1.0)  # clip gives edge hold
    w = w.reshape((-1,) + (1,) * (est.ndim - 1))
    mag_q = mag[idx] * (1.0 - w) + mag[idx + 1] * w
    ph_q = phase[idx] * (1.0 - w) + phase[idx + 1] * w
    return mag_q * np.exp(1j * ph_q)


def to_time_domain(h_freq: np.ndarray, d: int) -> ChannelTensor:
    """Inverse DFT over subcarriers, truncated to the first ``d`` taps."""
    n_sc = h_freq.shape[0]
    if d > n_sc:
        raise ValueError(f"tap count {d} exceeds subcarrier count {n_sc}")
    taps = np.fft.ifft(h_freq, axis=0)[:d]
    return ChannelTensor(taps)


def coarse_estimate(h: ChannelTensor, cfg: PilotConfig, seed) -> ChannelTensor:
    """Full coarse pipeline: pilots -> LS -> band interpolation -> taps."""
    obs = transmit_pilots(h, cfg, seed)
    pilot_est = ls_estimate(obs, cfg)
    full_band = interpolate_full_band(pilot_est, cfg)
    return to_time_domain(full_band, h.d)


def nmse(h_hat: ChannelTensor, h: ChannelTensor) -> float:
    """Normalized mean-squared error ``||H - H_hat||^2 / ||H||^2``."""
    num = float(np.sum(np.abs(h.taps - h_hat.taps) ** 2))
    den = h.energy()
    if den == 0:
        raise ValueError("reference channel has zero norm")
    return num / den


def nmse_db(h_hat: ChannelTensor, h: ChannelTensor) -> float:
    return 10.0 * np.log10(max(nmse(h_hat, h), 1e-30))


# ---------------------------------------------------------------------------
# OMP sparse-recovery baseline
# ---------------------------------------------------------------------------


@dataclass
class OmpDictionary:
    """Separable angle/delay dictionary for greedy sparse recovery.

    Atoms are ``delta(tap=d) x outer(a_r, a_t) / sqrt(Nr*Nt)``, unit
    Frobenius norm. Direction grids are direction-cosine pairs, one row per
    atom direction.
    """

    delays: np.ndarray            # [Nd] integer taps
    rx_dirs: np.ndarray           # [Gr, 2] (cos-x, cos-y)
    tx_dirs: np.ndarray           # [Gt, 2]
    rx_geom: ArrayGeometry
    tx_geom: ArrayGeometry

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=np.int64)
        self.rx_dirs = np.atleast_2d(np.asarray(self.rx_dirs, dtype=np.float64))
        self.tx_dirs = np.atleast_2d(np.asarray(self.tx_dirs, dtype=np.float64))
        if self.delays.size == 0 or self.rx_dirs.size == 0 or self.tx_dirs.size == 0:
            raise ValueError("empty dictionary")
        self._a_r = self._steer_matrix(self.rx_dirs, self.rx_geom)
        self._a_t = self._steer_matrix(self.tx_dirs, self.tx_geom)

    @staticmethod
    def _steer_matrix(dirs: np.ndarray, geom: ArrayGeometry) -> np.ndarray:
        cols = [
            np.kron(steering_vector(dx, geom.nx), steering_vector(dy, geom.ny))
            for dx, dy in dirs
        ]
        return np.stack(cols, axis=1)  # [n_elem, G]

    @property
    def n_atoms(self) -> int:
        return int(self.delays.size * self.rx_dirs.shape[0] * self.tx_dirs.shape[0])

    @classmethod
    def build(
        cls,
        d: int,
        rx_geom: ArrayGeometry,
        tx_geom: ArrayGeometry,
        oversample: int = 2,
    ) -> "OmpDictionary":
        """Default grid: delays at tap resolution, cosine grids of
        ``oversample`` points per array element per axis."""

        def axis_grid(n):
            g = oversample * n
            return np.arange(g) * (2.0 / g) - 1.0

        def dir_pairs(geom):
            gx, gy = axis_grid(geom.nx), axis_grid(geom.ny)
            return np.array([(a, b) for a in gx for b in gy])

        return cls(
            delays=np.arange(d),
            rx_dirs=dir_pairs(rx_geom),
            tx_dirs=dir_pairs(tx_geom),
            rx_geom=rx_geom,
            tx_geom=tx_geom,
        )

    def atom_indices(self, flat: int) -> tuple[int, int, int]:
        gr = self.rx_dirs.shape[0]
        gt = self.tx_dirs.shape[0]
        di, rem = divmod(flat, gr * gt)
        ri, ti = divmod(rem, gt)
        return di, ri, ti

    def spatial_atom(self, ri: int, ti: int) -> np.ndarray:
        norm = np.sqrt(self.rx_geom.size * self.tx_geom.size)
        return np.outer(self._a_r[:, ri], self._a_t[:, ti]) / norm

    def measurement_column(self, flat: int, cfg: PilotConfig) -> np.ndarray:
        """Noise-free observation of one unit-gain atom, flattened."""
        di, ri, ti = self.atom_indices(flat)
        b = self.spatial_atom(ri, ti) @ cfg.scaled_matrix
        ks = np.asarray(cfg.placement, dtype=np.float64)
        phases = np.exp(-2j * np.pi * ks * self.delays[di] / cfg.n_sc)
        return (phases[:, None, None] * b[None, :, :]).ravel()


@dataclass
class OmpResult:
    estimate: ChannelTensor
    selected: list[int]
    gains: np.ndarray
    residual_norms: list[float]


def omp_estimate(
    obs: PilotObservation,
    cfg: PilotConfig,
    dictionary: OmpDictionary,
    k_max: int,
    resid_tol: float = 0.0,
    return_info: bool = False,
):
    """Greedy matching pursuit over the angle/delay dictionary.

    Each iteration selects the atom with maximal residual correlation, then
    refits all selected gains by least squares. Stops after ``k_max`` atoms
    or once the residual norm drops to ``resid_tol`` times the observation
    norm. A rank-deficient refit drops the newest atom and stops.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    dc = dictionary
    y = obs.y.ravel()
    y_norm = float(np.linalg.norm(y))
    d_taps = int(dc.delays.max()) + 1

    nr, nt = dc.rx_geom.size, dc.tx_geom.size
    zero = ChannelTensor(np.zeros((d_taps, nr, nt), dtype=np.complex128))
    resid_norms = [y_norm]
    if y_norm <= resid_tol * y_norm or y_norm == 0.0:
        result = OmpResult(zero, [], np.zeros(0, dtype=np.complex128), resid_norms)
        return result if return_info else result.estimate

    ks = np.asarray(cfg.placement, dtype=np.float64)
    # corr[d, gr, gt] = sum_k exp(+2j pi k d / N) * <B_{gr,gt} S, R_k>_F
    phase = np.exp(2j * np.pi * np.outer(dc.delays, ks) / cfg.n_sc)  # [Nd, P]
    s_h = cfg.scaled_matrix.conj().T
    spatial_norm = np.sqrt(nr * nt)

    selected: list[int] = []
    cols: list[np.ndarray] = []
    gains = np.zeros(0, dtype=np.complex128)
    residual = obs.y.copy()

    for _ in range(k_max):
        t = residual @ s_h @ np.conj(dc._a_t)               # [P, Nr, Gt]
        c = np.einsum("ng,pnt->pgt", np.conj(dc._a_r), t)   # [P, Gr, Gt]
        corr = np.einsum("dp,pgt->dgt", phase, c) / spatial_norm
        flat_corr = np.abs(corr).ravel()
        if selected:
            flat_corr[np.asarray(selected)] = 0.0
        pick = int(np.argmax(flat_corr))
        selected.append(pick)
        cols.append(dc.measurement_column(pick, cfg))

        phi = np.stack(cols, axis=1)
        sol, _, rank, _ = np.linalg.lstsq(phi, y, rcond=None)
        if rank < len(cols):
            selected.pop()
            cols.pop()
            break
        gains = sol
        r_vec = y - phi @ gains
        residual = r_vec.reshape(obs.y.shape)
        r_norm = float(np.linalg.norm(r_vec))
        if r_norm > resid_norms[-1] + 1e-9 * y_norm:
            raise AssertionError("OMP residual increased across an iteration")
        resid_norms.append(r_norm)
        if r_norm <= resid_tol * y_norm:
            break

    taps = np.zeros((d_taps, nr, nt), dtype=np.complex128)
    for g, flat in zip(gains, selected):
        di, ri, ti = dc.atom_indices(flat)
        taps[dc.delays[di]] += g * dc.spatial_atom(ri, ti)
    result = OmpResult(ChannelTensor(taps), selected, gains, resid_norms)
    return result if return_info else result.estimate
