import math
from dataclasses import dataclass
from typing import List

from errors import NumericalError, ShapeError

ALPHA_FLOOR = 1e-8
# keeps alpha(T) of the cosine schedule away from zero
DDIM_THETA_SCALE = 0.995


def _copy(z):
    return z.clone() if hasattr(z, "clone") else z.copy()


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Noise path x_t = alpha(t) * x0 + sigma(t) * z over t in [0, T].

    ``rectified_flow``: alpha = 1 - t/T, sigma = t/T; the model predicts the
    velocity z - x0 and steps are Euler updates.
    ``ddim_cosine``: alpha = cos(theta), sigma = sin(theta); the model
    predicts the noise and steps are deterministic DDIM updates.
    """
    kind: str = "rectified_flow"
    T: float = 1.0
    num_steps: int = 28

    def __post_init__(self):
        if self.kind not in ("rectified_flow", "ddim_cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.T <= 0 or self.num_steps < 1:
            raise ValueError("T must be positive and num_steps at least 1")

    def _check_t(self, t: float) -> None:
        if not 0.0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")

    def alpha(self, t: float) -> float:
        self._check_t(t)
        if self.kind == "rectified_flow":
            return 1.0 - t / self.T
        return math.cos(DDIM_THETA_SCALE * (math.pi / 2) * t / self.T)

    def sigma(self, t: float) -> float:
        self._check_t(t)
        if self.kind == "rectified_flow":
            return t / self.T
        return math.sin(DDIM_THETA_SCALE * (math.pi / 2) * t / self.T)

    def timesteps(self) -> List[float]:
        """Uniform grid t_0 = T > t_1 > ... > t_n = 0."""
        n = self.num_steps
        return [self.T * (n - i) / n for i in range(n + 1)]

    def coefficients(self, t):
        """alpha(t), sigma(t) for a tensor of times (used by the trainer)."""
        if self.kind == "rectified_flow":
            return 1.0 - t / self.T, t / self.T
        theta = DDIM_THETA_SCALE * (math.pi / 2) * t / self.T
        return theta.cos(), theta.sin()

    def training_target(self, x0, noise):
        if self.kind == "rectified_flow":
            return noise - x0
        return noise

    def step(self, z_t, model_output, t: float, t_next: float):
        if self.kind == "rectified_flow":
            return euler_step(z_t, model_output, t - t_next)
        return ddim_step(z_t, model_output, t, t_next, self)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "num_steps": self.num_steps}


def forward_noise(x0, t: float, z, schedule: NoiseSchedule):
    if tuple(x0.shape) != tuple(z.shape):
        raise ShapeError(f"x0 shape {tuple(x0.shape)} does not match noise shape {tuple(z.shape)}")
    return schedule.alpha(t) * x0 + schedule.sigma(t) * z


def euler_step(z_t, v_hat, delta_t: float):
    if delta_t < 0:
        raise ValueError(f"delta_t must be non-negative, got {delta_t}")
    return z_t - v_hat * delta_t


def ddim_step(z_t, eps_hat, t: float, t_next: float, schedule: NoiseSchedule):
    if schedule.kind != "ddim_cosine":
        raise ValueError("ddim_step needs a ddim_cosine schedule")
    if t_next == t:
        return _copy(z_t)
    if t_next > t:
        raise ValueError(f"t_next={t_next} must be below t={t}")
    x0_hat = predict_x0(z_t, eps_hat, t, schedule)
    return schedule.alpha(t_next) * x0_hat + schedule.sigma(t_next) * eps_hat


def predict_x0(z_t, eps_hat, t: float, schedule: NoiseSchedule):
    """x0 estimate implied by a noise prediction (the first half of a DDIM step)."""
    alpha_t = schedule.alpha(t)
    if alpha_t < ALPHA_FLOOR:
        raise NumericalError(f"alpha({t}) = {alpha_t:.3g} is below {ALPHA_FLOOR}")
    return (z_t - schedule.sigma(t) * eps_hat) / alpha_t
