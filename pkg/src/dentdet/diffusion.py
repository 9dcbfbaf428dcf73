"""Box diffusion machinery: cosine noise schedule, forward corruption,
signal-space encoding, deterministic-capable reverse steps, box renewal.

Boxes live in [0, 1] center-size coordinates; the diffusion process operates
in "signal space", a linear rescaling of those coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import MIN_SIZE, Box


@dataclass(frozen=True)
class Schedule:
    """Precomputed cumulative noise-variance sequence for T timesteps.

    alpha_bar has length T+1 with alpha_bar[0] == 1 and values strictly in
    (0, 1], non-increasing in t.
    """

    T: int
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ValueError("alpha_bar must have length T+1")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        object.__setattr__(self, "alpha_bar", ab)

    @staticmethod
    def cosine(T: int = 1000, s: float = 0.008) -> "Schedule":
        """Cosine schedule: alpha_bar[t] = f(t)/f(0),
        f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)."""
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T) + s) / (1 + s) * (np.pi / 2)) ** 2
        ab = f / f[0]
        ab[0] = 1.0
        return Schedule(T=T, alpha_bar=ab)


@dataclass(frozen=True)
class NoisyBoxes:
    """N x 4 signal-space box array at diffusion time t."""

    z: np.ndarray
    t: int


def signal_encode(boxes: np.ndarray, scale: float) -> np.ndarray:
    """Map [0, 1] box coordinates to signal space: x -> (2x - 1) * scale."""
    if scale <= 0:
        raise ValueError("signal scale must be positive")
    return (2.0 * np.asarray(boxes, dtype=np.float64) - 1.0) * scale


def signal_decode(z: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of signal_encode followed by clamping to valid boxes.

    Centers are clamped to [0, 1]; sizes get a floor of MIN_SIZE so that
    transiently degenerate boxes stay usable downstream.
    """
    if scale <= 0:
        raise ValueError("signal scale must be positive")
    x = (np.asarray(z, dtype=np.float64) / scale + 1.0) / 2.0
    out = x.copy()
    out[..., :2] = np.clip(x[..., :2], 0.0, 1.0)
    out[..., 2:] = np.clip(x[..., 2:], MIN_SIZE, 1.0)
    return out


def _check_t(t: int, schedule: Schedule) -> None:
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")


def forward_noise(
    z0: np.ndarray, t: int, schedule: Schedule, rng: np.random.Generator
) -> NoisyBoxes:
    """Sample z_t ~ N(sqrt(a_bar_t) z0, (1 - a_bar_t) I)."""
    _check_t(t, schedule)
    z0 = np.asarray(z0, dtype=np.float64)
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(z0.shape)
    return NoisyBoxes(z=np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps, t=t)


@dataclass(frozen=True)
class PadResult:
    z0: np.ndarray  # (N, 4) signal space
    n_gt: int  # rows carrying ground-truth boxes (shuffled within the array)
    truncated: bool


def pad_gt_boxes(
    gt: list[Box], n: int, rng: np.random.Generator, scale: float
) -> PadResult:
    """Build an N-row signal-space proposal target set from ground truth.

    Ground-truth boxes fill |gt| rows in shuffled order; the rest are random
    boxes drawn Gaussian around the image center with std 1/6 in normalized
    coordinates.  If |gt| > N a uniformly random subset is kept.
    """
    if n < 1:
        raise ValueError("proposal count must be >= 1")
    boxes = [b.to_array() for b in gt]
    truncated = False
    if len(boxes) > n:
        keep = rng.choice(len(boxes), size=n, replace=False)
        boxes = [boxes[i] for i in sorted(keep)]
        truncated = True
    arr = np.empty((n, 4), dtype=np.float64)
    n_gt = len(boxes)
    if n_gt:
        perm = rng.permutation(n_gt)
        arr[:n_gt] = np.stack(boxes)[perm]
    n_pad = n - n_gt
    if n_pad:
        pad = rng.normal(0.5, 1.0 / 6.0, size=(n_pad, 4))
        pad[:, :2] = np.clip(pad[:, :2], 0.0, 1.0)
        pad[:, 2:] = np.clip(pad[:, 2:], 0.01, 1.0)
        arr[n_gt:] = pad
    return PadResult(z0=signal_encode(arr, scale), n_gt=n_gt, truncated=truncated)


def ddim_step(
    z_t: NoisyBoxes,
    z0_pred: np.ndarray,
    t: int,
    t_next: int,
    schedule: Schedule,
    eta: float,
    rng: np.random.Generator | None = None,
) -> NoisyBoxes:
    """One reverse step parameterized by the predicted clean signal.

    With eta = 0 the update is deterministic; t_next = 0 reproduces the
    prediction exactly since alpha_bar[0] = 1.
    """
    if not 0 <= t_next < t <= schedule.T:
        raise ValueError(f"require 0 <= t_next < t <= T, got t={t}, t_next={t_next}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if z_t.t != t:
        raise ValueError(f"z_t is at timestep {z_t.t}, expected {t}")
    z0_pred = np.asarray(z0_pred, dtype=np.float64)
    if z0_pred.shape != z_t.z.shape:
        raise ValueError("z0_pred shape mismatch")
    ab_t = schedule.alpha_bar[t]
    ab_n = schedule.alpha_bar[t_next]
    eps_hat = (z_t.z - np.sqrt(ab_t) * z0_pred) / np.sqrt(1.0 - ab_t)
    sigma = (
        eta
        * np.sqrt((1.0 - ab_n) / (1.0 - ab_t))
        * np.sqrt(max(0.0, 1.0 - ab_t / ab_n))
    )
    out = np.sqrt(ab_n) * z0_pred + np.sqrt(max(0.0, 1.0 - ab_n - sigma**2)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        out = out + sigma * rng.standard_normal(out.shape)
    return NoisyBoxes(z=out, t=t_next)


def box_renewal(
    scores: np.ndarray,
    z: NoisyBoxes,
    score_threshold: float,
    rng: np.random.Generator,
) -> NoisyBoxes:
    """Replace low-confidence proposal rows with fresh standard-normal noise."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != z.z.shape[0]:
        raise ValueError("one score per proposal row required")
    keep = scores >= score_threshold
    fresh = rng.standard_normal(z.z.shape)
    out = np.where(keep[:, None], z.z, fresh)
    return NoisyBoxes(z=out, t=z.t)
