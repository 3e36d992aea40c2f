"""Diffusion noise schedules and the closed-form algebra built on them.

All schedule math is done in float64 numpy; coefficients are cast to the
caller's dtype (numpy or torch) at the point of use, so cumulative products
stay stable even for 1000-step schedules.

Conventions: timesteps are 0-based indices into length-T vectors, with t=0
meaning one noising step applied.  alphas_bar[t] = prod_{s<=t} (1 - betas[s]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "NoiseSchedule",
    "build_scaled_linear",
    "enforce_zero_terminal_snr",
    "forward_sample",
    "to_v_target",
    "from_v",
    "posterior_params",
    "subsequence",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise levels plus derived square-root coefficients.

    ``timestep_index_map`` maps a position in this schedule to the timestep
    index of the original full-length schedule (identity unless the schedule
    is a subsequence); model timestep embeddings always use original indices.
    """

    betas: np.ndarray
    alphas_bar: np.ndarray
    sqrt_alphas_bar: np.ndarray
    sqrt_one_minus_alphas_bar: np.ndarray
    timestep_index_map: np.ndarray
    base_num_steps: int
    beta_start: float
    beta_end: float
    zero_terminal_snr: bool = False

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        """Raise ValueError if any structural invariant is violated."""
        T = self.num_steps
        if T < 1:
            raise ValueError("schedule must have at least one step")
        if self.betas.shape != (T,) or self.alphas_bar.shape != (T,):
            raise ValueError("inconsistent vector lengths")
        # the terminal beta reaches exactly 1.0 under zero-terminal SNR
        if np.any(self.betas <= 0.0) or np.any(self.betas > 1.0):
            raise ValueError("betas must lie in (0, 1]")
        if np.any(np.diff(self.alphas_bar) > 0.0):
            raise ValueError("alphas_bar must be non-increasing")
        if np.any(self.alphas_bar < -1e-15) or np.any(self.alphas_bar > 1.0):
            raise ValueError("alphas_bar must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "T": int(self.base_num_steps),
            "beta_start": float(self.beta_start),
            "beta_end": float(self.beta_end),
            "zero_terminal_snr": bool(self.zero_terminal_snr),
            "timesteps": [int(t) for t in self.timestep_index_map],
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    @staticmethod
    def from_json_dict(doc: dict) -> "NoiseSchedule":
        s = build_scaled_linear(doc["T"], doc["beta_start"], doc["beta_end"])
        if doc["zero_terminal_snr"]:
            s = enforce_zero_terminal_snr(s)
        timesteps = np.asarray(doc["timesteps"], dtype=np.int64)
        if len(timesteps) == s.num_steps and np.all(timesteps == np.arange(s.num_steps)):
            return s
        return _subsequence_at(s, timesteps)

    @staticmethod
    def load_json(path: str | Path) -> "NoiseSchedule":
        return NoiseSchedule.from_json_dict(json.loads(Path(path).read_text()))


def _derive(betas: np.ndarray, **meta) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    s = NoiseSchedule(
        betas=betas,
        alphas_bar=alphas_bar,
        sqrt_alphas_bar=np.sqrt(np.clip(alphas_bar, 0.0, None)),
        sqrt_one_minus_alphas_bar=np.sqrt(np.clip(1.0 - alphas_bar, 0.0, None)),
        timestep_index_map=meta.pop("timestep_index_map", np.arange(len(betas))),
        **meta,
    )
    s.validate()
    return s


def build_scaled_linear(
    num_steps: int, beta_start: float = 0.00085, beta_end: float = 0.012
) -> NoiseSchedule:
    """Scaled-linear schedule: sqrt(beta) interpolated linearly over t.

    betas[t] = (sqrt(beta_start) + t/(T-1) * (sqrt(beta_end) - sqrt(beta_start)))^2
    """
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    frac = np.arange(num_steps, dtype=np.float64) / (num_steps - 1)
    sqrt_betas = np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))
    return _derive(
        sqrt_betas**2,
        base_num_steps=num_steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def enforce_zero_terminal_snr(s: NoiseSchedule) -> NoiseSchedule:
    """Affinely rescale sqrt(alphas_bar) so the terminal entry is exactly 0.

    The first entry is preserved; betas are recomputed from the rescaled
    cumulative products.  A schedule already terminating at zero is returned
    unchanged (new object, identical values).
    """
    sab = s.sqrt_alphas_bar
    first, last = sab[0], sab[-1]
    if not first > last:
        raise ValueError("degenerate schedule: sqrt_alphas_bar[0] <= sqrt_alphas_bar[-1]")
    rescaled = (sab - last) * (first / (first - last))
    alphas_bar = rescaled**2
    ratios = np.empty_like(alphas_bar)
    ratios[0] = alphas_bar[0]
    ratios[1:] = alphas_bar[1:] / alphas_bar[:-1]
    return _derive(
        1.0 - ratios,
        base_num_steps=s.base_num_steps,
        beta_start=s.beta_start,
        beta_end=s.beta_end,
        zero_terminal_snr=True,
    )


def subsequence(s: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Uniform-stride subsequence of n_steps timesteps, always ending at T-1.

    alphas_bar at the selected timesteps are kept; effective betas are
    recomputed as beta'_i = 1 - alphas_bar[tau_i] / alphas_bar[tau_{i-1}].
    """
    T = s.num_steps
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    stride = T / n_steps
    taus = np.round(stride * np.arange(1, n_steps + 1)).astype(np.int64) - 1
    return _subsequence_at(s, taus)


def _subsequence_at(s: NoiseSchedule, taus: np.ndarray) -> NoiseSchedule:
    if np.any(np.diff(taus) <= 0):
        raise ValueError("subsequence timesteps must be strictly increasing")
    if taus[0] < 0 or taus[-1] >= s.num_steps:
        raise ValueError("subsequence timesteps out of range")
    ab = s.alphas_bar[taus]
    prev = np.concatenate([[1.0], ab[:-1]])
    return _derive(
        1.0 - ab / prev,
        timestep_index_map=s.timestep_index_map[taus],
        base_num_steps=s.base_num_steps,
        beta_start=s.beta_start,
        beta_end=s.beta_end,
        zero_terminal_snr=s.zero_terminal_snr,
    )


def _t_indices(t, num_steps: int, lo: int = 0) -> np.ndarray:
    """Timestep argument as an int64 array, range-checked against [lo, T)."""
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < lo) or np.any(t_arr >= num_steps):
        raise ValueError(f"timestep out of range [{lo}, {num_steps}): {t}")
    return t_arr


def _like(coef: np.ndarray, ref):
    """Shape a per-element coefficient to broadcast against ``ref``."""
    coef = np.asarray(coef)
    if coef.ndim > 0:
        coef = coef.reshape(coef.shape + (1,) * (ref.ndim - coef.ndim))
    if type(ref).__module__.split(".")[0] == "torch":
        import torch

        return torch.as_tensor(coef, dtype=ref.dtype, device=ref.device)
    return coef if coef.ndim > 0 else float(coef)


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(z0, t, eps, s: NoiseSchedule):
    """Noised latent at step t: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    _check_shapes(z0, eps)
    ti = _t_indices(t, s.num_steps)
    a = _like(s.sqrt_alphas_bar[ti], z0)
    b = _like(s.sqrt_one_minus_alphas_bar[ti], eps)
    return a * z0 + b * eps


def to_v_target(z0, eps, t, s: NoiseSchedule):
    """Velocity target: v = sqrt(ab_t) * eps - sqrt(1 - ab_t) * z0."""
    _check_shapes(z0, eps)
    ti = _t_indices(t, s.num_steps)
    a = _like(s.sqrt_alphas_bar[ti], eps)
    b = _like(s.sqrt_one_minus_alphas_bar[ti], z0)
    return a * eps - b * z0


def from_v(z_t, v, t, s: NoiseSchedule):
    """Invert the velocity parametrization: recover (z0_hat, eps_hat) from (z_t, v)."""
    _check_shapes(z_t, v)
    ti = _t_indices(t, s.num_steps)
    a = _like(s.sqrt_alphas_bar[ti], z_t)
    b = _like(s.sqrt_one_minus_alphas_bar[ti], z_t)
    return a * z_t - b * v, b * z_t + a * v


def posterior_params(z_t, z0_hat, t, s: NoiseSchedule):
    """Gaussian posterior q(z_{t-1} | z_t, z0) parameters: (mean, beta_tilde_t).

    Requires t >= 1 in the active schedule; the final denoising step is the
    sampler's responsibility (it returns z0_hat directly).
    """
    _check_shapes(z_t, z0_hat)
    ti = _t_indices(t, s.num_steps, lo=1)
    ab_t = s.alphas_bar[ti]
    ab_prev = s.alphas_bar[ti - 1]
    beta_t = s.betas[ti]
    coef0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_t = np.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    mean = _like(coef0, z_t) * z0_hat + _like(coef_t, z_t) * z_t
    return mean, _like(beta_tilde, z_t)


def posterior_log_variance(s: NoiseSchedule) -> np.ndarray:
    """log beta_tilde_t per step, with the t=0 entry clipped to beta_tilde_1.

    beta_tilde_0 is identically zero (the t=0 posterior is a point mass), so
    its log is clipped the same way learned-variance DDPM implementations do.
    """
    ab = s.alphas_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    bt = (1.0 - ab_prev) / (1.0 - ab) * s.betas
    if len(bt) > 1:
        bt[0] = bt[1]
    return np.log(np.clip(bt, 1e-20, None))
