"""Reference implementation of the estimator wire protocol.

Serves oracle estimates: ground truth registered per request (a "truth"
field, or a prior set_truth frame) flows through the corruption schedule.
Doubles as the loopback fixture for protocol tests; estimate replies carry
a digest of the decoded image so clients can verify transport fidelity.
"""

from __future__ import annotations

from servosim.errors import ProtocolError
from servosim.estimators import CorruptionSchedule, OracleEstimatorSession, PHASE_DESIRED
from servosim.geometry import Pose6
from servosim.protocol import EstimatorServer, image_digest, image_from_wire


class OracleService:
    """Protocol handler around a corrupted-oracle session."""

    def __init__(self, schedule: CorruptionSchedule | None = None, seed: int = 0):
        self.session = OracleEstimatorSession(schedule or CorruptionSchedule(), seed=seed)
        self._truth: Pose6 | None = None

    def handle(self, request: dict) -> dict:
        op = request.get("op")
        if op == "set_truth":
            pose = request.get("pose")
            if not isinstance(pose, list) or len(pose) != 6:
                raise ProtocolError("set_truth needs a 6-number 'pose'")
            self._truth = Pose6.from_file_units([float(v) for v in pose])
            return {"ok": True}
        if op == "estimate":
            return self._estimate(request)
        raise ProtocolError(f"unknown op {op!r}")

    def _estimate(self, request: dict) -> dict:
        for key, kind in (("width", int), ("height", int), ("image", str)):
            if not isinstance(request.get(key), kind):
                raise ProtocolError(f"estimate request needs '{key}'")
        if request.get("encoding") != "png-base64":
            raise ProtocolError(f"unsupported encoding {request.get('encoding')!r}")
        image = image_from_wire(request["image"])
        if (image.width, image.height) != (request["width"], request["height"]):
            raise ProtocolError(
                f"image is {image.width}x{image.height}, header says "
                f"{request['width']}x{request['height']}"
            )
        truth = self._truth
        if "truth" in request:
            t = request["truth"]
            if not isinstance(t, list) or len(t) != 6:
                raise ProtocolError("'truth' must be a 6-number list")
            truth = Pose6.from_file_units([float(v) for v in t])
        if truth is None:
            raise ProtocolError("no ground truth registered (set_truth or 'truth' field)")
        if request.get("phase") == PHASE_DESIRED:
            pose = self.session.estimate_desired(image, truth)
        else:
            pose = self.session.estimate_current(image, truth)
        return {"pose": pose.to_file_units(), "image_sha256": image_digest(image)}


def make_oracle_server(
    schedule: CorruptionSchedule | None = None,
    seed: int = 0,
    host: str = "127.0.0.1",
    port: int = 0,
    name: str = "servosim-oracle",
) -> EstimatorServer:
    service = OracleService(schedule, seed=seed)
    return EstimatorServer(service.handle, name=name, host=host, port=port)
