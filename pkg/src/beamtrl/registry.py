"""Model-sharing protocol between gNBs and a centralized unit.

Existing gNBs report their point clouds to the centralized unit, which keeps
the pairwise Chamfer distance map. A newly deployed gNB asks the unit for
its most similar peer, fetches that peer's Q-network weights, fine-tunes
them locally and finally registers its own environment.

Messages travel as length-prefixed frames: a 4-byte big-endian length then
a UTF-8 JSON object ``{"type": <int>, "sender": <str>, "payload": {...}}``.
Weight blobs ride inside the JSON as base64.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dqn import (
    CorruptModelError,
    QNetwork,
    TrainConfig,
    deserialize_weights,
    evaluate,
    fine_tune,
    serialize_weights,
)
from .geometry import InvalidInputError, PointCloud, chamfer_distance, load_cloud, save_cloud
from .layout import DistanceMap, build_distance_map
from .simenv import BeamEnvironment

log = logging.getLogger(__name__)

LENGTH = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    POINT_CLOUD_REPORT = 1
    DISTANCE_MAP_ACK = 2
    NEAREST_QUERY = 3
    NEAREST_RESPONSE = 4
    MODEL_REQUEST = 5
    MODEL_TRANSFER = 6
    STATE_CONTRIBUTION = 7
    ERROR = 8


# payload keys each message type must carry
REQUIRED_KEYS = {
    MsgType.POINT_CLOUD_REPORT: {"cloud"},
    MsgType.DISTANCE_MAP_ACK: {"version", "size"},
    MsgType.NEAREST_QUERY: {"cloud"},
    MsgType.NEAREST_RESPONSE: {"peer", "distance"},
    MsgType.MODEL_REQUEST: {"peer"},
    MsgType.MODEL_TRANSFER: {"peer", "weights", "sha256"},
    MsgType.STATE_CONTRIBUTION: {"cloud", "sha256"},
    MsgType.ERROR: {"reason"},
}


class ProtocolError(ValueError):
    """A frame or envelope that does not follow the wire format."""


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    sender: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = REQUIRED_KEYS[MsgType(self.msg_type)] - set(self.payload)
        if missing:
            raise ProtocolError(f"{MsgType(self.msg_type).name} payload missing {sorted(missing)}")

    @property
    def is_error(self) -> bool:
        return self.msg_type == MsgType.ERROR


def error(sender: str, reason: str) -> Envelope:
    return Envelope(MsgType.ERROR, sender, {"reason": reason})


def cloud_payload(cloud: PointCloud) -> dict:
    return {"label": cloud.label, "points": cloud.points.tolist()}


def cloud_from_payload(obj) -> PointCloud:
    try:
        return PointCloud(np.array(obj["points"], dtype=np.float64), str(obj.get("label", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed point cloud: {exc}") from None


def encode(envelope: Envelope) -> bytes:
    """Envelope to JSON bytes (without the length prefix)."""
    doc = {"type": int(envelope.msg_type), "sender": envelope.sender, "payload": envelope.payload}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def decode(body: bytes) -> Envelope:
    try:
        doc = json.loads(body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from None
    if not isinstance(doc, dict) or not {"type", "sender", "payload"} <= set(doc):
        raise ProtocolError("frame is not an envelope object")
    try:
        msg_type = MsgType(doc["type"])
    except ValueError:
        raise ProtocolError(f"unknown message type {doc['type']!r}") from None
    if not isinstance(doc["payload"], dict):
        raise ProtocolError("payload must be an object")
    return Envelope(msg_type, str(doc["sender"]), doc["payload"])


def frame(envelope: Envelope) -> bytes:
    body = encode(envelope)
    return LENGTH.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Body of the next frame, or None on a clean end of stream."""
    head = sock.recv(LENGTH.size)
    if not head:
        return None
    if len(head) < LENGTH.size:
        head += _recv_exact(sock, LENGTH.size - len(head))
    (n,) = LENGTH.unpack(head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def respond(handler, body: bytes, name: str) -> Envelope:
    """Decode a request body and run ``handler``; failures become Error envelopes."""
    try:
        request = decode(body)
    except ProtocolError as exc:
        return error(name, str(exc))
    try:
        return handler(request)
    except (InvalidInputError, ProtocolError, CorruptModelError) as exc:
        return error(name, str(exc))


# --- centralized unit -------------------------------------------------------


@dataclass(frozen=True)
class CentralState:
    clouds: dict = field(default_factory=dict)
    version: int = 0
    dmap: DistanceMap | None = None

    def __post_init__(self):
        if self.dmap is None and self.clouds:
            object.__setattr__(self, "dmap", _map_of(self.clouds))

    def __len__(self) -> int:
        return len(self.clouds)

    def same_as(self, other: "CentralState") -> bool:
        return (self.version == other.version and self.clouds.keys() == other.clouds.keys()
                and all(self.clouds[k] == other.clouds[k] for k in self.clouds)
                and (self.dmap == other.dmap))


def _map_of(clouds: dict) -> DistanceMap:
    return build_distance_map([clouds[k] for k in sorted(clouds)])


def _accept(state: CentralState, sender: str, cloud: PointCloud) -> CentralState:
    clouds = dict(state.clouds)
    clouds[sender] = cloud.relabel(sender)
    return CentralState(clouds, state.version + 1)


def _ack(state: CentralState) -> Envelope:
    return Envelope(MsgType.DISTANCE_MAP_ACK, "central", {"version": state.version, "size": len(state)})


def handle_report(state: CentralState, sender: str, cloud) -> tuple:
    """Store (or replace) ``sender``'s cloud and rebuild the distance map.

    ``cloud`` may be a :class:`PointCloud` or its wire payload. A malformed
    cloud yields an Error envelope and the state is returned unchanged.
    """
    try:
        if not isinstance(cloud, PointCloud):
            cloud = cloud_from_payload(cloud)
    except InvalidInputError as exc:
        return state, error("central", str(exc))
    new = _accept(state, sender, cloud)
    return new, _ack(new)


def handle_nearest_query(state: CentralState, querier: str, cloud: PointCloud) -> Envelope:
    """Most similar registered gNB to ``cloud``; the state is not modified.

    The querier's own entry, if any, is excluded. Ties go to the
    lexicographically smallest id.
    """
    candidates = sorted((chamfer_distance(cloud, c), gid) for gid, c in state.clouds.items() if gid != querier)
    if not candidates:
        return error("central", "no peers")
    distance, peer = candidates[0]
    return Envelope(MsgType.NEAREST_RESPONSE, "central", {"peer": peer, "distance": distance})


def contribute_state(node: "GnbNode", state: CentralState) -> tuple:
    """Register a fine-tuned node's environment with the centralized unit."""
    if node.model is None:
        return state, error("central", f"{node.gnb_id} has no model to contribute")
    new = _accept(state, node.gnb_id, node.cloud)
    return new, _ack(new)


class CentralUnit:
    """Message handler holding the registry; mutations are serialized by a lock.

    With a ``store`` directory every accepted report is persisted as
    ``<id>.cloud`` plus a ``version`` file, and :meth:`load` restores it.
    """

    name = "central"

    def __init__(self, store=None, state: CentralState | None = None):
        self.state = state or CentralState()
        self.store = Path(store) if store is not None else None
        self._lock = threading.Lock()

    @classmethod
    def load(cls, store) -> "CentralUnit":
        store = Path(store)
        clouds = {}
        for path in sorted(store.glob("*.cloud")):
            clouds[path.stem] = load_cloud(path).relabel(path.stem)
        version_file = store / "version"
        version = int(version_file.read_text()) if version_file.exists() else 0
        return cls(store, CentralState(clouds, version))

    def _persist(self, sender: str) -> None:
        if self.store is None:
            return
        self.store.mkdir(parents=True, exist_ok=True)
        save_cloud(self.state.clouds[sender], self.store / f"{sender}.cloud")
        tmp = self.store / "version.tmp"
        tmp.write_text(str(self.state.version))
        tmp.replace(self.store / "version")

    def __call__(self, request: Envelope) -> Envelope:
        with self._lock:
            t = request.msg_type
            if t in (MsgType.POINT_CLOUD_REPORT, MsgType.STATE_CONTRIBUTION):
                new, reply = handle_report(self.state, request.sender, request.payload["cloud"])
                if not reply.is_error:
                    self.state = new
                    self._persist(request.sender)
                return reply
            if t == MsgType.NEAREST_QUERY:
                return handle_nearest_query(self.state, request.sender, cloud_from_payload(request.payload["cloud"]))
            return error(self.name, f"centralized unit does not handle {t.name}")


# --- gNB nodes --------------------------------------------------------------


class Role(enum.Enum):
    EXISTING = "existing"
    NEW = "new"


@dataclass(eq=False)
class GnbNode:
    """A gNB: its environment, and a trained model once it has one.

    ``reward_line`` is the 95 % reward threshold measured when the model was
    trained from scratch; it travels with the weights so the receiver can
    tell when fine-tuning has caught up.
    """

    gnb_id: str
    env: BeamEnvironment
    model: QNetwork | None = None
    reward_line: float | None = None
    scratch_episodes: int | None = None

    @property
    def cloud(self) -> PointCloud:
        return self.env.cloud.relabel(self.gnb_id)

    @property
    def role(self) -> Role:
        return Role.EXISTING if self.model is not None else Role.NEW

    def __call__(self, request: Envelope) -> Envelope:
        if request.msg_type == MsgType.MODEL_REQUEST:
            return model_transfer(self)
        return error(self.gnb_id, f"gNB does not handle {request.msg_type.name}")


def model_transfer(peer: GnbNode) -> Envelope:
    """ModelTransfer envelope carrying ``peer``'s weights, or an Error if untrained."""
    if peer.model is None:
        return error(peer.gnb_id, "untrained peer")
    blob = serialize_weights(peer.model)
    payload = {
        "peer": peer.gnb_id,
        "weights": base64.b64encode(blob).decode("ascii"),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "reward_line": peer.reward_line,
        "scratch_episodes": peer.scratch_episodes,
    }
    return Envelope(MsgType.MODEL_TRANSFER, peer.gnb_id, payload)


def request_model(new_node: GnbNode, peer: GnbNode) -> Envelope:
    """Direct (transport-free) model request from ``new_node`` to ``peer``."""
    return peer(Envelope(MsgType.MODEL_REQUEST, new_node.gnb_id, {"peer": peer.gnb_id}))


def receive_model(transfer: Envelope) -> QNetwork:
    """Decode a ModelTransfer, checking the blob against its digest."""
    if transfer.is_error:
        raise InvalidInputError(f"model request failed: {transfer.payload['reason']}")
    if transfer.msg_type != MsgType.MODEL_TRANSFER:
        raise ProtocolError(f"expected MODEL_TRANSFER, got {transfer.msg_type.name}")
    try:
        blob = base64.b64decode(transfer.payload["weights"], validate=True)
    except (ValueError, TypeError) as exc:
        raise CorruptModelError(f"weights are not valid base64: {exc}") from None
    if hashlib.sha256(blob).hexdigest() != transfer.payload["sha256"]:
        raise CorruptModelError("weight digest mismatch")
    return deserialize_weights(blob)


# --- transports -------------------------------------------------------------


class InProcessTransport:
    """Synchronous loopback: every request and reply is encoded to bytes and decoded back."""

    def __init__(self):
        self.handlers = {}

    def serve(self, address: str, handler) -> str:
        self.handlers[address] = handler
        return address

    def stop(self, address: str) -> None:
        self.handlers.pop(address, None)

    def request(self, address: str, envelope: Envelope) -> Envelope:
        handler = self.handlers[address]
        reply = respond(handler, encode(envelope), getattr(handler, "name", address))
        return decode(encode(reply))

    def close(self) -> None:
        self.handlers.clear()


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                body = read_frame(sock)
            except (ConnectionError, ProtocolError, OSError):
                return
            if body is None:
                return
            reply = respond(self.server.envelope_handler, body, self.server.name)
            try:
                sock.sendall(frame(reply))
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpTransport:
    """Length-prefixed frames over localhost TCP; one server thread per endpoint."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self.servers = {}
        self.connections = {}

    def serve(self, address: str, handler) -> tuple:
        server = _Server((self.host, 0), _FrameHandler)
        server.envelope_handler = handler
        server.name = getattr(handler, "name", address)
        thread = threading.Thread(target=server.serve_forever, name=f"serve-{address}", daemon=True)
        thread.start()
        self.servers[address] = server
        return server.server_address

    def stop(self, address: str) -> None:
        conn = self.connections.pop(address, None)
        if conn is not None:
            conn.close()
        server = self.servers.pop(address, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def _connection(self, address: str) -> socket.socket:
        if address not in self.connections:
            self.connections[address] = socket.create_connection(self.servers[address].server_address, timeout=30)
        return self.connections[address]

    def send_raw(self, address: str, body: bytes) -> Envelope:
        sock = self._connection(address)
        sock.sendall(LENGTH.pack(len(body)) + body)
        reply = read_frame(sock)
        if reply is None:
            raise ConnectionError(f"{address} closed the connection")
        return decode(reply)

    def request(self, address: str, envelope: Envelope) -> Envelope:
        return self.send_raw(address, encode(envelope))

    def close(self) -> None:
        for address in list(self.servers):
            self.stop(address)


def make_transport(kind: str):
    if kind == "inprocess":
        return InProcessTransport()
    if kind == "tcp":
        return TcpTransport()
    raise InvalidInputError(f"unknown transport {kind!r}")


# --- end-to-end onboarding --------------------------------------------------


@dataclass
class ScenarioReport:
    new_gnb: str
    chosen_peer: str
    chamfer_distance: float
    brute_force_peer: str
    peer_sha256: str
    received_sha256: str
    peer_score: float
    transferred_score: float
    finetune_episodes: int
    reached_line: bool
    final_score: float
    registry_version: int
    registry_size: int
    registry_restored: bool | None
    steps: list = field(default_factory=list)

    def rows(self) -> list:
        keys = [k for k in self.__dataclass_fields__ if k != "steps"]
        return [(k, getattr(self, k)) for k in keys]

    def text(self) -> str:
        out = [f"{k}: {v}" for k, v in self.rows()]
        out += [f"  step {n:2d}: {desc}" for n, desc in self.steps]
        return "\n".join(out)


def run_onboarding_scenario(existing, new_node: GnbNode, fine_tune_cfg: TrainConfig,
                            transport: str = "inprocess", store=None, restart_central: bool = False) -> ScenarioReport:
    """Walk a new gNB through discovery, model transfer, fine-tuning and registration.

    ``existing`` are trained :class:`GnbNode` objects. With ``restart_central``
    the centralized unit is shut down after the reports, rebuilt from its
    ``store`` directory and the scenario continues against the restored unit.
    """
    existing = sorted(existing, key=lambda n: n.gnb_id)
    if not existing:
        raise InvalidInputError("need at least one existing gNB")
    if restart_central and store is None:
        raise InvalidInputError("restarting the centralized unit requires a store directory")
    net = make_transport(transport)
    steps = []

    def check(reply: Envelope) -> Envelope:
        if reply.is_error:
            raise InvalidInputError(f"{reply.sender}: {reply.payload['reason']}")
        return reply

    try:
        central = CentralUnit(store)
        net.serve("central", central)
        for node in existing:
            if node.model is None:
                raise InvalidInputError(f"existing gNB {node.gnb_id} has no model")
            net.serve(node.gnb_id, node)
        steps.append((1, "existing gNBs extract point clouds"))
        for node in existing:
            check(net.request("central", Envelope(MsgType.POINT_CLOUD_REPORT, node.gnb_id,
                                                  {"cloud": cloud_payload(node.cloud)})))
        steps.append((2, f"{len(existing)} point-cloud reports sent to the centralized unit"))
        steps.append((3, "centralized unit stores the clouds"))
        steps.append((4, f"distance map computed over {len(central.state)} gNBs, version {central.state.version}"))

        restored = None
        if restart_central:
            before = central.state
            net.stop("central")
            central = CentralUnit.load(store)
            net.serve("central", central)
            restored = central.state.same_as(before)
            steps.append((4, f"centralized unit restarted from {store}; registry restored: {restored}"))

        steps.append((5, f"{new_node.gnb_id} extracts its point cloud"))
        reply = check(net.request("central", Envelope(MsgType.NEAREST_QUERY, new_node.gnb_id,
                                                      {"cloud": cloud_payload(new_node.cloud)})))
        steps.append((6, "nearest-environment query sent"))
        peer_id, distance = reply.payload["peer"], reply.payload["distance"]
        steps.append((7, "centralized unit compares the new cloud with the distance map"))
        steps.append((8, f"nearest peer {peer_id} at Chamfer distance {distance:.6g}"))

        brute = min((chamfer_distance(new_node.cloud, n.cloud), n.gnb_id) for n in existing)[1]
        peer = next(n for n in existing if n.gnb_id == peer_id)

        transfer = check(net.request(peer_id, Envelope(MsgType.MODEL_REQUEST, new_node.gnb_id, {"peer": peer_id})))
        steps.append((9, f"model requested from {peer_id}"))
        steps.append((10, f"{peer_id} serializes its weights"))
        model = receive_model(transfer)
        steps.append((11, f"weights received ({len(transfer.payload['weights'])} base64 chars)"))
        received_digest = model.digest()
        transferred_score = evaluate(model, peer.env)
        steps.append((12, f"weights decoded, sha256 {received_digest[:12]}"))

        line = transfer.payload.get("reward_line")
        tuned, history = fine_tune(model, new_node.env, fine_tune_cfg, line)
        reached = line is not None and history.episodes_to_line(line) is not None
        new_node.model = tuned
        steps.append((13, f"fine-tuned for {len(history)} episodes"))

        check(net.request("central", Envelope(MsgType.STATE_CONTRIBUTION, new_node.gnb_id,
                                              {"cloud": cloud_payload(new_node.cloud), "sha256": tuned.digest()})))
        steps.append((14, f"{new_node.gnb_id} contributes its state; registry size {len(central.state)}"))

        return ScenarioReport(
            new_gnb=new_node.gnb_id,
            chosen_peer=peer_id,
            chamfer_distance=distance,
            brute_force_peer=brute,
            peer_sha256=peer.model.digest(),
            received_sha256=received_digest,
            peer_score=evaluate(peer.model, peer.env),
            transferred_score=transferred_score,
            finetune_episodes=len(history),
            reached_line=reached,
            final_score=evaluate(tuned, new_node.env),
            registry_version=central.state.version,
            registry_size=len(central.state),
            registry_restored=restored,
            steps=steps,
        )
    finally:
        net.close()
