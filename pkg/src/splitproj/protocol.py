"""Client and server state machines for U-shaped split training with a
compressed cut, plus round-robin orchestration over a transport.

One training step exchanges exactly four frames::

    client --Z_FWD-->  server     projected activation
    client <--U_FWD--  server     backbone output
    client --GRAD_U--> server     d L_CE / d u
    client <--GRAD_Z-- server     d L_CE / d z~
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .bottleneck import CutCodec, ProjectionBasis, build_cut, init_projection
from .errors import (Disconnected, InvalidArgument, ProtocolError, ProtocolOrderError,
                     SplitError)
from .linalg import RngStream, as_rng
from .nn import Network, Optimizer, cross_entropy
from .transport import (Endpoint, MsgType, WireMessage, channel_pair, encode, tcp_connect,
                        tcp_listen)
from .wcc import WccConfig, total_loss, wcc_grad, wcc_loss

log = logging.getLogger(__name__)

GIB = 2 ** 30


@dataclass(frozen=True)
class CutConfig:
    kind: str = "projection"  # raw | projection | learned-1x1
    k: int | None = None
    cr: float | None = 8.0
    mode: str = "LS-F"  # LS-F | LS-L
    hidden: int = 128
    seed: int = 0
    distribution: str = "gaussian"
    zero_output: bool = False


@dataclass(frozen=True)
class OptimSpec:
    rule: str = "adam"
    lr: float = 1e-3

    def build(self, networks) -> Optimizer:
        return Optimizer.for_networks(networks, rule=self.rule, lr=self.lr)


class Phase(enum.Enum):
    IDLE = "Idle"
    SENT_FORWARD = "SentForward"
    AWAIT_CUT_GRAD = "AwaitCutGrad"


class BatchStream:
    """Cycles through a shard in seeded random order."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int, rng):
        if len(images) != len(labels) or len(images) == 0:
            raise InvalidArgument("shard must be non-empty with one label per image")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.batch_size = min(batch_size, len(images))
        self.rng = as_rng(rng)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.generator.permutation(len(self.images))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.images[idx], self.labels[idx]


class ClientModel:
    """Head ``f``, cut encoder and tail ``h`` with one optimizer.

    Under shared-head ownership a single instance is used by every client.
    """

    def __init__(self, head: Network, tail: Network, cut: CutConfig, optim: OptimSpec):
        self.head = head
        self.tail = tail
        self.cut = cut
        self.optim = optim
        self.encoder: Network | None = None
        self.optimizer: Optimizer | None = None
        self.basis: ProjectionBasis | None = None
        if cut.kind != "projection":
            self._build_encoder(None)

    def _build_encoder(self, basis):
        k = basis.k if basis is not None else self.cut.k
        codec = build_cut(self.cut.kind, self.head.output_shape, k=k, cr=self.cut.cr,
                          mode="LS-F", rng=self.cut.seed, basis=basis)
        self.encoder = codec.encoder
        self.optimizer = self.optim.build([self.head, self.encoder, self.tail])

    def install_basis(self, basis: ProjectionBasis):
        if self.basis is not None:
            if not np.array_equal(self.basis.R, basis.R):
                raise ProtocolError("received a different projection basis")
            return
        self.basis = basis
        self._build_encoder(basis)

    @property
    def ready(self) -> bool:
        return self.encoder is not None

    def networks(self):
        return [self.head, self.encoder, self.tail]

    def predict(self, x, backbone_fn) -> np.ndarray:
        """Full forward in eval mode; ``backbone_fn`` maps payload to ``u``."""
        for net in self.networks():
            net.eval()
        try:
            payload = self.encoder(self.head(x))
            u = backbone_fn(payload)
            return self.tail(u.reshape((len(u),) + self.tail.input_shape))
        finally:
            for net in self.networks():
                net.train()


@dataclass
class StepRecord:
    msg_type: str
    nbytes: int
    payload_bytes: int
    batch: int
    dim: int
    crc32: int


@dataclass
class StepTrace:
    step: int
    client_id: int
    messages: list[StepRecord] = field(default_factory=list)
    ce: float = float("nan")
    wcc: float = float("nan")
    total: float = float("nan")
    wall_time: float = 0.0

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "client": self.client_id,
            "msg_sizes": {m.msg_type: m.nbytes for m in self.messages},
            "ce": self.ce, "wcc": self.wcc, "total": self.total,
            "wall_time": self.wall_time,
        }, sort_keys=True)


def trace_checksum(traces) -> str:
    h = hashlib.sha256()
    for t in traces:
        h.update(json.dumps(t.deterministic(), sort_keys=True).encode())
    return h.hexdigest()


class ClientState:
    def __init__(self, client_id: int, model: ClientModel, images, labels, batch_size: int,
                 wcc: WccConfig = WccConfig(), rng=0):
        self.client_id = client_id
        self.model = model
        self.batches = BatchStream(images, labels, batch_size, rng)
        self.wcc = wcc
        self.phase = Phase.IDLE
        self._pending: dict | None = None
        self.last_fused_grad: np.ndarray | None = None
        self.last_losses: tuple[float, float, float] | None = None

    def receive_setup(self, msg: WireMessage):
        if msg.msg_type != MsgType.SETUP_R:
            raise ProtocolError(f"expected SETUP_R, got {msg.msg_type.name}")
        blob = msg.extension + np.ascontiguousarray(msg.payload, dtype="<f4").tobytes()
        self.model.install_basis(ProjectionBasis.from_bytes(blob))

    def client_forward(self, step: int, batch=None) -> WireMessage:
        if self.phase is not Phase.IDLE:
            raise ProtocolOrderError(f"client {self.client_id}: forward in phase {self.phase.value}")
        if not self.model.ready:
            raise ProtocolOrderError(f"client {self.client_id}: projection basis not received")
        x, y = self.batches.next() if batch is None else batch
        m = self.model
        m.optimizer.zero_grad()
        z, tape_f = m.head.forward(x)
        z_tilde, tape_e = m.encoder.forward(z)
        self._pending = {"step": step, "y": np.asarray(y), "z_tilde": z_tilde,
                         "tape_f": tape_f, "tape_e": tape_e}
        self.phase = Phase.SENT_FORWARD
        return WireMessage(MsgType.Z_FWD, self.client_id, step, z_tilde)

    def _backward_into_head(self, grad_z_tilde):
        p = self._pending
        _, grad_z = self.model.encoder.backward_from_seed(p["tape_e"], grad_z_tilde)
        self.model.head.backward_from_seed(p["tape_f"], grad_z)

    def client_loss_and_backward_phase1(self, u_msg: WireMessage) -> WireMessage:
        if self.phase is not Phase.SENT_FORWARD:
            raise ProtocolOrderError(f"client {self.client_id}: phase 1 in phase {self.phase.value}")
        self._expect(u_msg, MsgType.U_FWD)
        p = self._pending
        tail = self.model.tail
        u = u_msg.payload.reshape((u_msg.batch,) + tail.input_shape)
        logits, tape_h = tail.forward(u)
        ce, dlogits = cross_entropy(logits, p["y"])
        wcc = wcc_loss(p["z_tilde"], p["y"])
        total = total_loss(ce, wcc, self.wcc)
        _, grad_u = tail.backward_from_seed(tape_h, dlogits)
        if self.wcc.lam > 0:
            local = (np.float32(self.wcc.lam) * wcc_grad(p["z_tilde"], p["y"])).astype(np.float32)
            self._backward_into_head(local)
        else:
            local = None
        p["wcc_grad"] = local
        self.last_losses = (ce, wcc, total)
        self.phase = Phase.AWAIT_CUT_GRAD
        return WireMessage(MsgType.GRAD_U, self.client_id, p["step"], grad_u.reshape(u_msg.batch, -1))

    def client_backward_phase2(self, grad_z_msg: WireMessage):
        if self.phase is not Phase.AWAIT_CUT_GRAD:
            raise ProtocolOrderError(f"client {self.client_id}: phase 2 in phase {self.phase.value}")
        self._expect(grad_z_msg, MsgType.GRAD_Z)
        p = self._pending
        g_ce = grad_z_msg.payload
        if g_ce.shape != p["z_tilde"].shape:
            raise InvalidArgument(f"cut gradient shape {g_ce.shape} != payload shape {p['z_tilde'].shape}")
        # the head already holds the local term from phase 1; linearity of
        # backprop makes adding the CE term here equal to backpropagating the sum
        self._backward_into_head(g_ce)
        self.last_fused_grad = g_ce if p["wcc_grad"] is None else g_ce + p["wcc_grad"]
        self.model.optimizer.step()
        self._pending = None
        self.phase = Phase.IDLE

    def _expect(self, msg: WireMessage, kind: MsgType):
        if msg.msg_type != kind:
            raise ProtocolError(f"client {self.client_id}: expected {kind.name}, got {msg.msg_type.name}")
        if msg.client_id != self.client_id or msg.step != self._pending["step"]:
            raise ProtocolError(f"client {self.client_id}: frame for client {msg.client_id} step {msg.step}")


class ServerState:
    def __init__(self, backbone: Network, cut: CutCodec, mode: str, roster, optim: OptimSpec):
        self.backbone = backbone
        self.cut = cut
        self.decoder = cut.decoder
        self.mode = mode
        self.basis = cut.basis
        self.roster = set(int(c) for c in roster)
        self.optimizer = optim.build([backbone, cut.decoder])
        self._pending: dict[int, dict] = {}
        self.lock = threading.Lock()
        self.observed: dict[int, list] = {}
        self.record_observations = False

    @property
    def liftback_trainable(self) -> int:
        return self.decoder.num_trainable()

    def setup_message(self, client_id: int) -> WireMessage | None:
        """The basis broadcast for one client, or ``None`` when the cut has no basis."""
        if self.basis is None:
            return None
        blob = self.basis.to_bytes()
        payload = np.frombuffer(blob[16:], dtype="<f4").reshape(1, -1)
        return WireMessage(MsgType.SETUP_R, client_id, 0, payload, blob[:16])

    def handle(self, msg: WireMessage) -> WireMessage:
        with self.lock:
            if msg.msg_type == MsgType.Z_FWD:
                return self.server_process(msg)
            if msg.msg_type == MsgType.GRAD_U:
                return self.server_backward(msg)
        raise ProtocolError(f"server cannot handle {msg.msg_type.name}")

    def server_process(self, msg: WireMessage) -> WireMessage:
        if msg.client_id not in self.roster:
            raise ProtocolError(f"unknown client {msg.client_id}")
        if msg.dim != self.cut.payload_dim:
            raise InvalidArgument(f"payload width {msg.dim} != expected {self.cut.payload_dim}")
        if msg.client_id in self._pending:
            raise ProtocolOrderError(f"client {msg.client_id} already has a step in flight")
        z_hat, tape_d = self.decoder.forward(msg.payload)
        u, tape_g = self.backbone.forward(z_hat)
        self._pending[msg.client_id] = {"step": msg.step, "tape_d": tape_d, "tape_g": tape_g}
        if self.record_observations:
            self.observed.setdefault(msg.client_id, []).append((msg.payload.copy(), u.copy()))
        return WireMessage(MsgType.U_FWD, msg.client_id, msg.step, u.reshape(len(u), -1))

    def server_backward(self, msg: WireMessage) -> WireMessage:
        p = self._pending.get(msg.client_id)
        if p is None or p["step"] != msg.step:
            raise ProtocolOrderError(f"no forward pending for client {msg.client_id} step {msg.step}")
        del self._pending[msg.client_id]
        self.optimizer.zero_grad()
        seed = msg.payload.reshape((msg.batch,) + self.backbone.output_shape)
        _, grad_zhat = self.backbone.backward_from_seed(p["tape_g"], seed)
        _, grad_zt = self.decoder.backward_from_seed(p["tape_d"], grad_zhat)
        self.optimizer.step()
        return WireMessage(MsgType.GRAD_Z, msg.client_id, msg.step, grad_zt)

    def backbone_fn(self, payload: np.ndarray) -> np.ndarray:
        """Eval-mode lift-back and backbone, used for offline evaluation."""
        for net in (self.decoder, self.backbone):
            net.eval()
        try:
            return self.backbone(self.decoder(payload))
        finally:
            for net in (self.decoder, self.backbone):
                net.train()


def server_setup(backbone: Network, cut_shape, cut: CutConfig, roster,
                 optim: OptimSpec = OptimSpec()) -> ServerState:
    if cut.kind == "projection":
        d = int(np.prod(cut_shape))
        k = cut.k if cut.k is not None else max(1, int(round(d / cut.cr)))
        if k > d:
            raise InvalidArgument(f"k={k} exceeds d={d}")
        basis = init_projection(d, k, RngStream(cut.seed), cut.distribution)
        codec = build_cut("projection", cut_shape, k=k, mode=cut.mode, hidden=cut.hidden,
                          rng=cut.seed, basis=basis, zero_output=cut.zero_output)
    else:
        codec = build_cut(cut.kind, cut_shape, k=cut.k, cr=cut.cr, rng=cut.seed)
    if codec.decoder.output_shape != backbone.input_shape:
        raise InvalidArgument(f"lift-back output {codec.decoder.output_shape} != backbone input "
                              f"{backbone.input_shape}")
    return ServerState(backbone, codec, cut.mode if cut.kind == "projection" else cut.kind, roster, optim)


def _record(msg: WireMessage) -> StepRecord:
    data = encode(msg)
    return StepRecord(msg.msg_type.name, len(data), 4 * msg.payload.size, msg.batch, msg.dim,
                      zlib.crc32(data))


class RunAborted(SplitError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def serve(server: ServerState, endpoint: Endpoint):
    """Answer frames on ``endpoint`` until the peer disconnects."""
    while True:
        try:
            msg = endpoint.recv(timeout=None)
        except Disconnected:
            return
        try:
            reply = server.handle(msg)
        except SplitError as exc:
            log.error("server failed on %r: %s", msg, exc)
            endpoint.close()
            return
        endpoint.send(reply)


class Session:
    """Links between clients and a server over one carrier.

    ``transport`` is ``inproc`` or ``tcp``.  With ``server=None`` the session
    connects to a remote server at ``address`` (split-process mode).
    """

    def __init__(self, server: ServerState | None, clients: list[ClientState],
                 transport: str = "inproc", address: str = "127.0.0.1:0", timeout: float = 60.0):
        self.server = server
        self.clients = clients
        self.step = 0
        self.traces: list[StepTrace] = []
        self.endpoints: dict[int, Endpoint] = {}
        self._server_eps: list[Endpoint] = []
        self._threads: list[threading.Thread] = []
        self._listener = None
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("client ids must be unique")
        if transport == "inproc":
            if server is None:
                raise InvalidArgument("in-process transport needs a local server")
            for c in clients:
                a, b = channel_pair(timeout)
                self.endpoints[c.client_id] = a
                self._server_eps.append(b)
        elif transport == "tcp":
            if server is not None:
                self._listener = tcp_listen(address)
                address = "%s:%d" % self._listener.address
            for c in clients:
                ep = tcp_connect(address, timeout)
                ep.timeout = timeout
                self.endpoints[c.client_id] = ep
                if server is not None:
                    self._server_eps.append(self._listener.accept(timeout))
        else:
            raise InvalidArgument(f"unknown transport {transport!r}")
        self.transport = transport
        self.address = address
        if server is not None:
            for ep, c in zip(self._server_eps, clients):
                setup = server.setup_message(c.client_id)
                if setup is not None:
                    ep.send(setup)
                t = threading.Thread(target=serve, args=(server, ep), daemon=True)
                t.start()
                self._threads.append(t)
            expect_setup = server.basis is not None
        else:
            expect_setup = clients[0].model.cut.kind == "projection"
        if expect_setup:
            for c in clients:
                setup = self.endpoints[c.client_id].recv()
                if setup.client_id != c.client_id:
                    raise ProtocolError("setup frame addressed to another client")
                c.receive_setup(setup)

    def run_step(self, client: ClientState) -> StepTrace:
        ep = self.endpoints[client.client_id]
        t0 = time.perf_counter()
        trace = StepTrace(self.step, client.client_id)
        msg = client.client_forward(self.step)
        trace.messages.append(_record(msg))
        ep.send(msg)
        u = ep.recv()
        trace.messages.append(_record(u))
        gu = client.client_loss_and_backward_phase1(u)
        trace.messages.append(_record(gu))
        ep.send(gu)
        gz = ep.recv()
        trace.messages.append(_record(gz))
        client.client_backward_phase2(gz)
        trace.ce, trace.wcc, trace.total = client.last_losses
        trace.wall_time = time.perf_counter() - t0
        self.step += 1
        return trace

    def run(self, rounds: int) -> list[StepTrace]:
        """``rounds * len(clients)`` strictly sequential steps, client ``t mod n`` at step ``t``."""
        out = []
        n = len(self.clients)
        for _ in range(rounds * n):
            client = self.clients[self.step % n]
            try:
                out.append(self.run_step(client))
            except Exception as exc:
                self.traces.extend(out)
                raise RunAborted(f"step {self.step} (client {client.client_id}) failed: {exc}",
                                 list(self.traces)) from exc
        self.traces.extend(out)
        return out

    def close(self):
        for ep in self.endpoints.values():
            ep.close()
        for t in self._threads:
            t.join(timeout=5)
        for ep in self._server_eps:
            ep.close()
        if self._listener is not None:
            self._listener.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def byte_counters(self) -> dict:
        sent = sum(ep.counters.bytes_sent for ep in self.endpoints.values())
        recv = sum(ep.counters.bytes_received for ep in self.endpoints.values())
        return {"client_to_server": sent, "server_to_client": recv}


def run_round_robin(server: ServerState, clients: list[ClientState], rounds: int,
                    transport: str = "inproc", address: str = "127.0.0.1:0") -> list[StepTrace]:
    with Session(server, clients, transport, address) as session:
        return session.run(rounds)


def serve_forever(server: ServerState, address: str, n_clients: int, timeout: float | None = None):
    """Server side of split-process mode: accept ``n_clients`` and serve until all leave."""
    listener = tcp_listen(address)
    log.info("listening on %s:%d", *listener.address)
    threads = []
    try:
        # clients connect in ascending id order
        for cid in sorted(server.roster)[:n_clients]:
            ep = listener.accept(timeout)
            setup = server.setup_message(cid)
            if setup is not None:
                ep.send(setup)
            t = threading.Thread(target=serve, args=(server, ep), daemon=True)
            t.start()
            threads.append(t)
        for t in threads:
            t.join()
    finally:
        listener.close()


@dataclass
class CommReport:
    payload_dim: int
    floats_per_sample: int
    samples: int
    total_bytes: int
    total_gib: float
    measured_bytes: int | None = None
    header_bytes: int | None = None
    u_bytes: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def comm_account(trace=None, *, k: int | None = None, samples_per_epoch: int | None = None,
                 epochs: int | None = None) -> CommReport:
    """Split-point traffic: forward ``z~`` plus its returned gradient.

    Closed form uses ``k``, ``samples_per_epoch`` and ``epochs``.  Given a
    trace, the sample count and ``k`` come from the recorded frames and the
    measured payload bytes are reported alongside.  ``u`` and its gradient
    are reported separately and excluded from the headline total.
    """
    if trace is None:
        if None in (k, samples_per_epoch, epochs):
            raise InvalidArgument("closed form needs k, samples_per_epoch and epochs")
        samples = samples_per_epoch * epochs
        total = samples * 2 * k * 4
        return CommReport(k, 2 * k, samples, total, total / GIB)
    samples = measured = headers = u_bytes = 0
    dims = set()
    for t in trace:
        for m in t.messages:
            if m.msg_type == "Z_FWD":
                samples += m.batch
                dims.add(m.dim)
            if m.msg_type in ("Z_FWD", "GRAD_Z"):
                measured += m.payload_bytes
                headers += m.nbytes - m.payload_bytes
            elif m.msg_type in ("U_FWD", "GRAD_U"):
                u_bytes += m.nbytes
    if len(dims) > 1:
        raise InvalidArgument(f"trace mixes payload widths {sorted(dims)}")
    k = dims.pop() if dims else (k or 0)
    total = samples * 2 * k * 4
    return CommReport(k, 2 * k, samples, total, total / GIB, measured, headers, u_bytes)


def round_gib(x: float) -> float:
    return math.floor(x * 10 + 0.5) / 10
