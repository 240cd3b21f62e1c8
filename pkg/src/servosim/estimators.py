"""Pose estimators: the behavioral contract, a ground-truth oracle with
configurable corruption, and a client session for remote estimator services.

Estimates are poses of the current camera relative to the estimator's
reference image. The servo loop never subtracts two estimates directly; it
composes them through the reference frame, which is what makes a constant
estimator bias cancel at convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from servosim.errors import ConnectionLost, EstimatorTimeout, EstimatorUnreachable
from servosim.geometry import Pose6
from servosim.image import ImageBuffer
from servosim.protocol import DEFAULT_TIMEOUT, EstimatorClient

PHASE_DESIRED = "desired"
PHASE_SERVO = "servo"
_GARBAGE_SPAN_SIGMAS = 3.0  # uniform garbage covers +-3 sigma of the coarse draw


class PoseEstimator(Protocol):
    """Anything that can turn an image into a pose relative to its reference."""

    def estimate(self, image: ImageBuffer) -> Pose6: ...


@dataclass(frozen=True)
class OutageWindow:
    start: int
    end: int  # half-open: active for start <= iteration < end
    mode: str  # "garbage" | "frozen"

    def __post_init__(self):
        if self.mode not in ("garbage", "frozen"):
            raise ValueError(f"unknown outage mode '{self.mode}'")
        if self.end <= self.start or self.start < 0:
            raise ValueError("outage window must satisfy 0 <= start < end")

    def contains(self, iteration: int) -> bool:
        return self.start <= iteration < self.end


@dataclass(frozen=True)
class CorruptionSchedule:
    """Additive bias and noise on the 6-vector, plus timed outage windows."""

    noise_std_t: float = 0.0  # meters, per axis
    noise_std_r_deg: float = 0.0  # degrees, per axis
    bias: Pose6 = field(default_factory=Pose6.zero)
    outage_windows: tuple[OutageWindow, ...] = ()
    garbage_std_t: tuple[float, float, float] = (0.01, 0.01, 0.01)
    garbage_std_r_deg: tuple[float, float, float] = (10.0, 10.0, 20.0)

    def __post_init__(self):
        if self.noise_std_t < 0 or self.noise_std_r_deg < 0:
            raise ValueError("noise stds must be non-negative")
        windows = tuple(sorted(self.outage_windows, key=lambda w: w.start))
        for a, b in zip(windows, windows[1:]):
            if b.start < a.end:
                raise ValueError(f"outage windows overlap: {a} and {b}")
        object.__setattr__(self, "outage_windows", windows)

    def window_at(self, iteration: int) -> OutageWindow | None:
        for w in self.outage_windows:
            if w.contains(iteration):
                return w
        return None

    def to_dict(self) -> dict:
        return {
            "noise_std_t_m": self.noise_std_t,
            "noise_std_r_deg": self.noise_std_r_deg,
            "bias": self.bias.to_file_units(),
            "outage_windows": [
                {"start": w.start, "end": w.end, "mode": w.mode} for w in self.outage_windows
            ],
            "garbage_std_t_m": list(self.garbage_std_t),
            "garbage_std_r_deg": list(self.garbage_std_r_deg),
        }

    @staticmethod
    def from_dict(data: dict) -> "CorruptionSchedule":
        windows = tuple(
            OutageWindow(start=w["start"], end=w["end"], mode=w["mode"])
            for w in data.get("outage_windows", [])
        )
        return CorruptionSchedule(
            noise_std_t=data.get("noise_std_t_m", 0.0),
            noise_std_r_deg=data.get("noise_std_r_deg", 0.0),
            bias=Pose6.from_file_units(data.get("bias", [0.0] * 6)),
            outage_windows=windows,
            garbage_std_t=tuple(data.get("garbage_std_t_m", (0.01, 0.01, 0.01))),
            garbage_std_r_deg=tuple(data.get("garbage_std_r_deg", (10.0, 10.0, 20.0))),
        )


def _corrupt(true_relative: Pose6, schedule: CorruptionSchedule, rng) -> Pose6:
    t = true_relative.t + schedule.bias.t
    r = true_relative.theta_u + schedule.bias.theta_u
    if schedule.noise_std_t > 0:
        t = t + rng.normal(0.0, schedule.noise_std_t, size=3)
    if schedule.noise_std_r_deg > 0:
        r = r + np.radians(rng.normal(0.0, schedule.noise_std_r_deg, size=3))
    return Pose6(t, r)


def _garbage(schedule: CorruptionSchedule, rng) -> Pose6:
    span_t = _GARBAGE_SPAN_SIGMAS * np.asarray(schedule.garbage_std_t)
    span_r = _GARBAGE_SPAN_SIGMAS * np.asarray(schedule.garbage_std_r_deg)
    t = rng.uniform(-span_t, span_t)
    r_deg = rng.uniform(-span_r, span_r)
    return Pose6(t, np.radians(r_deg))


def oracle_estimate(
    true_relative: Pose6,
    schedule: CorruptionSchedule,
    iteration: int,
    rng: np.random.Generator,
    last_output: Pose6 | None = None,
) -> Pose6:
    """Ground-truth estimate through the corruption schedule.

    Outside outage windows: truth plus bias plus per-axis Gaussian noise.
    Garbage windows draw uniformly from the coarse training range; frozen
    windows repeat ``last_output`` (the last pre-outage estimate), falling
    back to nominal corruption when there is none yet.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    window = schedule.window_at(iteration)
    if window is None:
        return _corrupt(true_relative, schedule, rng)
    if window.mode == "garbage":
        return _garbage(schedule, rng)
    if last_output is not None:
        return last_output
    return _corrupt(true_relative, schedule, rng)


class OracleEstimatorSession:
    """Stateful oracle for the servo loop: advances one iteration per call
    and remembers the last clean output for frozen windows."""

    def __init__(self, schedule: CorruptionSchedule, seed: int = 0):
        self.schedule = schedule
        self._rng = np.random.default_rng([seed, 0xE57])
        self.iteration = 0
        self._last_clean: Pose6 | None = None

    def estimate_desired(self, image: ImageBuffer, true_relative: Pose6) -> Pose6:
        """One-shot estimate of the desired image: bias only, no noise.

        The desired estimate is registered once before servoing starts;
        constant bias still flows through it (and cancels in composition).
        """
        return Pose6(
            true_relative.t + self.schedule.bias.t,
            true_relative.theta_u + self.schedule.bias.theta_u,
        )

    def estimate_current(self, image: ImageBuffer, true_relative: Pose6) -> Pose6:
        it = self.iteration
        self.iteration += 1
        out = oracle_estimate(true_relative, self.schedule, it, self._rng, self._last_clean)
        if self.schedule.window_at(it) is None:
            self._last_clean = out
        return out

    def close(self) -> None:
        pass


class RemoteEstimatorSession:
    """Protocol client session with reconnect-on-failure semantics.

    ``register_truth`` attaches the ground-truth pose to each request so the
    reference oracle service can answer; a learned estimator ignores it.
    """

    def __init__(
        self,
        host: str,
        port: int,
        timeout: float = DEFAULT_TIMEOUT,
        register_truth: bool = False,
    ):
        self.register_truth = register_truth
        self._client = EstimatorClient(host, port, timeout=timeout)
        self._client.connect()  # raises EstimatorUnreachable if nobody listens

    @property
    def server_name(self):
        return self._client.server_name

    def _request(self, image: ImageBuffer, true_relative: Pose6 | None, phase: str) -> Pose6:
        truth = None
        if self.register_truth and true_relative is not None:
            truth = true_relative.to_file_units()
        try:
            if not self._client.connected:
                self._client.connect()
            pose_file, _ = self._client.request_estimate(image, truth, phase)
        except (EstimatorTimeout, ConnectionLost):
            # Connection state is unknown after a failure: drop it so the
            # next call reconnects, and surface the failure to the loop.
            self._client.close()
            raise
        return Pose6.from_file_units(pose_file)

    def estimate_desired(self, image: ImageBuffer, true_relative: Pose6 | None = None) -> Pose6:
        return self._request(image, true_relative, PHASE_DESIRED)

    def estimate_current(self, image: ImageBuffer, true_relative: Pose6 | None = None) -> Pose6:
        return self._request(image, true_relative, PHASE_SERVO)

    def close(self) -> None:
        self._client.close()


def remote_estimate(image: ImageBuffer, connection: EstimatorClient) -> Pose6:
    """One estimate over an open protocol connection, in internal units."""
    pose_file, _ = connection.request_estimate(image)
    return Pose6.from_file_units(pose_file)


def desired_pose_from_image(desired_image: ImageBuffer, estimator: PoseEstimator) -> Pose6:
    """One-shot estimate of the desired image's pose relative to the
    estimator's reference; the caller caches it for the experiment."""
    return estimator.estimate(desired_image)
