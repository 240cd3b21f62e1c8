import math
import socket
import struct
import threading
import time

import numpy as np
import pytest

from servosim.errors import (
    ConnectionLost,
    EstimatorTimeout,
    EstimatorUnreachable,
    ProtocolError,
)
from servosim.estimators import (
    CorruptionSchedule,
    OracleEstimatorSession,
    OutageWindow,
    RemoteEstimatorSession,
    desired_pose_from_image,
    oracle_estimate,
    remote_estimate,
)
from servosim.geometry import Pose6
from servosim.image import ImageBuffer
from servosim.oracle_service import make_oracle_server
from servosim.protocol import (
    EstimatorClient,
    image_digest,
    image_from_wire,
    image_to_wire,
    recv_frame,
    send_frame,
)
from tests.conftest import smooth_texture


@pytest.fixture
def oracle_server():
    server = make_oracle_server(seed=0).start()
    yield server
    server.stop()


class TestOracleEstimate:
    def test_zero_schedule_exact(self):
        truth = Pose6([0.01, -0.02, 0.005], np.radians([1.0, -2.0, 3.0]))
        out = oracle_estimate(truth, CorruptionSchedule(), 0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.t, truth.t)
        np.testing.assert_array_equal(out.theta_u, truth.theta_u)

    def test_bias_only_offsets_every_call(self):
        truth = Pose6([0.02, 0.0, 0.0], np.zeros(3))
        schedule = CorruptionSchedule(bias=Pose6([0.001, 0.0, 0.0], np.zeros(3)))
        rng = np.random.default_rng(0)
        for it in range(5):
            out = oracle_estimate(truth, schedule, it, rng)
            assert out.t[0] == pytest.approx(0.021)

    def test_noise_statistics(self):
        truth = Pose6.zero()
        schedule = CorruptionSchedule(noise_std_t=0.005, noise_std_r_deg=1.0)
        rng = np.random.default_rng(42)
        xs = np.array(
            [oracle_estimate(truth, schedule, i, rng).t[0] for i in range(10_000)]
        )
        assert abs(xs.std() - 0.005) / 0.005 < 0.05

    def test_garbage_window_draws_in_coarse_range(self):
        schedule = CorruptionSchedule(outage_windows=(OutageWindow(5, 10, "garbage"),))
        truth = Pose6.zero()
        rng = np.random.default_rng(1)
        for it in range(5, 10):
            out = oracle_estimate(truth, schedule, it, rng)
            assert np.all(np.abs(out.t) <= 3 * 0.01 + 1e-12)
            assert np.all(np.abs(np.degrees(out.theta_u)) <= 3 * np.array([10, 10, 20]) + 1e-9)

    def test_frozen_window_repeats_last(self):
        schedule = CorruptionSchedule(outage_windows=(OutageWindow(2, 4, "frozen"),))
        session = OracleEstimatorSession(schedule, seed=3)
        img = smooth_texture(8, 8, seed=0)
        outs = []
        for it in range(6):
            truth = Pose6([0.01 * (it + 1), 0.0, 0.0], np.zeros(3))
            outs.append(session.estimate_current(img, truth))
        np.testing.assert_array_equal(outs[2].t, outs[1].t)
        np.testing.assert_array_equal(outs[3].t, outs[1].t)
        assert outs[4].t[0] == pytest.approx(0.05)

    def test_windows_must_not_overlap(self):
        with pytest.raises(ValueError):
            CorruptionSchedule(
                outage_windows=(OutageWindow(0, 10, "garbage"), OutageWindow(5, 15, "frozen"))
            )

    def test_schedule_dict_round_trip(self):
        schedule = CorruptionSchedule(
            noise_std_t=0.005,
            noise_std_r_deg=1.0,
            bias=Pose6([0.001, 0, 0], np.zeros(3)),
            outage_windows=(OutageWindow(10, 20, "garbage"),),
        )
        again = CorruptionSchedule.from_dict(schedule.to_dict())
        assert again.noise_std_t == schedule.noise_std_t
        assert again.outage_windows == schedule.outage_windows
        np.testing.assert_allclose(again.bias.t, schedule.bias.t, atol=1e-15)


class TestWireProtocol:
    def test_frame_round_trip_over_socketpair(self):
        a, b = socket.socketpair()
        try:
            payload = {"op": "hello", "schema": 1, "blob": "x" * 500}
            send_frame(a, payload)
            assert recv_frame(b) == payload
        finally:
            a.close()
            b.close()

    def test_frame_has_big_endian_length_prefix(self):
        a, b = socket.socketpair()
        try:
            send_frame(a, {"k": 1})
            raw = b.recv(4)
            (length,) = struct.unpack(">I", raw)
            body = b.recv(length)
            assert body == b'{"k":1}'
        finally:
            a.close()
            b.close()

    def test_image_wire_round_trip_is_byte_faithful(self):
        img = smooth_texture(33, 17, seed=9)
        again = image_from_wire(image_to_wire(img))
        assert again == img
        assert image_digest(again) == image_digest(img)

    def test_oversized_frame_rejected(self):
        a, b = socket.socketpair()
        try:
            a.sendall(struct.pack(">I", 1 << 31))
            with pytest.raises(ProtocolError):
                recv_frame(b)
        finally:
            a.close()
            b.close()


class TestRemoteEstimate:
    def test_loopback_fixed_pose(self, oracle_server):
        client = EstimatorClient("127.0.0.1", oracle_server.port)
        client.connect()
        try:
            assert client.server_name == "servosim-oracle"
            img = smooth_texture(16, 16, seed=2)
            truth = [0.01, 0.0, 0.0, 0.0, 0.0, 0.0]
            pose_file, reply = client.request_estimate(img, truth_file_units=truth)
            assert pose_file == pytest.approx(truth)
        finally:
            client.close()

    def test_set_truth_then_estimate(self, oracle_server):
        client = EstimatorClient("127.0.0.1", oracle_server.port)
        client.connect()
        try:
            send_frame(client._sock, {"id": 99, "op": "set_truth", "pose": [0.0, 0.02, 0.0, 0.0, 0.0, 5.0]})
            reply = recv_frame(client._sock)
            assert reply.get("ok") is True and reply["id"] == 99
            img = smooth_texture(16, 16, seed=3)
            pose = remote_estimate(img, client)
            assert pose.t[1] == pytest.approx(0.02)
            assert math.degrees(pose.theta_u[2]) == pytest.approx(5.0)
        finally:
            client.close()

    def test_image_hash_echo_matches(self, oracle_server):
        client = EstimatorClient("127.0.0.1", oracle_server.port)
        client.connect()
        try:
            rng = np.random.default_rng(7)
            img = ImageBuffer(rng.integers(0, 256, size=(24, 31)).astype(np.uint8))
            _, reply = client.request_estimate(img, truth_file_units=[0.0] * 6)
            assert reply["image_sha256"] == image_digest(img)
        finally:
            client.close()

    def test_malformed_reply_raises_protocol_error(self):
        # Server that answers an estimate with a 5-number pose.
        def handler(request):
            return {"pose": [1.0, 2.0, 3.0, 4.0, 5.0]}

        from servosim.protocol import EstimatorServer

        server = EstimatorServer(handler, name="bad").start()
        try:
            client = EstimatorClient("127.0.0.1", server.port)
            client.connect()
            with pytest.raises(ProtocolError):
                client.request_estimate(smooth_texture(8, 8, seed=1))
            client.close()
        finally:
            server.stop()

    def test_malformed_frame_keeps_connection_open(self, oracle_server):
        sock = socket.create_connection(("127.0.0.1", oracle_server.port), timeout=2.0)
        sock.settimeout(2.0)
        try:
            payload = b"this is not json"
            sock.sendall(struct.pack(">I", len(payload)) + payload)
            reply = recv_frame(sock)
            assert "error" in reply
            # connection still serves valid requests
            send_frame(sock, {"op": "hello", "schema": 1})
            hello = recv_frame(sock)
            assert hello["schema"] == 1
        finally:
            sock.close()

    def test_unreachable_raises(self):
        with pytest.raises(EstimatorUnreachable):
            RemoteEstimatorSession("127.0.0.1", 1, timeout=0.3)

    def test_timeout_surfaced(self):
        # A listener that accepts but never answers the handshake.
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        stop = threading.Event()

        def sit_quietly():
            conn, _ = listener.accept()
            stop.wait(3.0)
            conn.close()

        t = threading.Thread(target=sit_quietly, daemon=True)
        t.start()
        try:
            client = EstimatorClient("127.0.0.1", port, timeout=0.3)
            with pytest.raises(EstimatorTimeout):
                client.connect()
        finally:
            stop.set()
            listener.close()

    def test_session_reconnects_after_server_restart(self):
        server = make_oracle_server(seed=0).start()
        session = RemoteEstimatorSession(
            "127.0.0.1", server.port, timeout=1.0, register_truth=True
        )
        img = smooth_texture(16, 16, seed=5)
        truth = Pose6([0.01, 0, 0], np.zeros(3))
        out = session.estimate_current(img, truth)
        assert out.t[0] == pytest.approx(0.01)
        port = server.port
        server.stop()
        with pytest.raises((ConnectionLost, EstimatorTimeout, EstimatorUnreachable)):
            session.estimate_current(img, truth)
            session.estimate_current(img, truth)
        server2 = make_oracle_server(seed=0, port=port).start()
        try:
            time.sleep(0.2)
            out2 = session.estimate_current(img, truth)
            assert out2.t[0] == pytest.approx(0.01)
        finally:
            session.close()
            server2.stop()


class TestDesiredPose:
    def test_oracle_desired_is_bias_only(self):
        schedule = CorruptionSchedule(
            noise_std_t=0.01, bias=Pose6([0.002, 0, 0], np.zeros(3))
        )
        session = OracleEstimatorSession(schedule, seed=1)
        img = smooth_texture(8, 8, seed=4)
        out = session.estimate_desired(img, Pose6.zero())
        np.testing.assert_allclose(out.t, [0.002, 0, 0], atol=1e-15)

    def test_contract_helper(self):
        class FixedEstimator:
            def estimate(self, image):
                return Pose6([0.0, 0.0, 0.004], np.zeros(3))

        out = desired_pose_from_image(smooth_texture(8, 8, seed=5), FixedEstimator())
        assert out.t[2] == pytest.approx(0.004)
