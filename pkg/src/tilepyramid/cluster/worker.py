"""Shared-nothing cluster worker: own queue, random-victim work stealing over TCP.

Every worker holds a replica of the slide data. Worker 0 deals the top-level
tiles round-robin, collects the partial trees and broadcasts the shutdown once
every worker has reported idle (an idle worker's upload doubles as its idle
notice, since an idle worker never receives work again).
"""

from __future__ import annotations

import random
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from ..engine import Decision, ExecutionTree, ThresholdSchedule
from ..errors import IntegrityError, MissingPredictionError, TransportError
from ..predictions import PredictionSource
from ..pyramid import GroundTruthPyramid, TileId
from .wire import (
    Empty,
    FrameDecoder,
    Hello,
    Message,
    Shutdown,
    StealRequest,
    SubtreeUpload,
    TaskGrant,
    encode,
    tree_from_nodes,
    tree_nodes,
)

Address = tuple[str, int]


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}, expected host:port")
    return host, int(port)


def gather(partials, exactly_once: bool = True) -> ExecutionTree:
    """Merge partial trees. Conflicting nodes always fail; duplicates fail under `exactly_once`."""
    partials = list(partials)
    if not partials:
        raise IntegrityError("nothing to gather")
    return reduce(lambda a, b: a.merge(b, strict=exactly_once), partials[1:], partials[0].copy())


@dataclass
class WorkerStats:
    tiles: int = 0
    steal_requests: int = 0
    grants_received: int = 0
    empties_received: int = 0
    grants_sent: int = 0
    empties_sent: int = 0
    messages_sent: int = 0


class ClusterWorker:
    def __init__(
        self,
        worker_id: int,
        peers: list[Address],
        gt: GroundTruthPyramid,
        src: PredictionSource,
        sched: ThresholdSchedule,
        seed: int = 0,
        listen_sock: socket.socket | None = None,
        timeout: float = 120.0,
        assignment: list[list[TileId]] | None = None,
    ):
        if not 0 <= worker_id < len(peers):
            raise ValueError(f"worker id {worker_id} outside 0..{len(peers) - 1}")
        sched.require(gt.geometry)
        self.id = worker_id
        self.peers = list(peers)
        self.gt, self.src, self.sched = gt, src, sched
        self.timeout = timeout
        self.rng = random.Random(seed * 1_000_003 + worker_id)
        self.queue: deque[TileId] = deque()
        self.partial = ExecutionTree(gt.geometry)
        self.victims = {v for v in range(len(peers)) if v != worker_id}
        self.stats = WorkerStats()
        self.uploads: dict[int, ExecutionTree] = {}
        self._listen = listen_sock
        self._out: dict[int, socket.socket] = {}
        self._sel = selectors.DefaultSelector()
        self._outstanding: int | None = None
        if assignment is None:
            roots = gt.roots()
            assignment = [roots[i :: len(peers)] for i in range(len(peers))]
        if len(assignment) != len(peers):
            raise ValueError("assignment needs one queue per worker")
        self.assignment = assignment
        # worker 0 deals its own share locally; the others wait for theirs before stealing
        self._initial_expected = len(assignment[worker_id]) if worker_id else 0
        self.sent: list[tuple[int, str]] = []  # (peer, message type) in send order
        self._initial_received = 0
        self._idle = False
        self._done = False
        self._deadline = 0.0

    @property
    def size(self) -> int:
        return len(self.peers)

    # -- transport
    def _connect(self) -> None:
        if self._listen is None:
            self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listen.bind(self.peers[self.id])
            self._listen.listen(self.size)
        self._listen.setblocking(False)
        self._sel.register(self._listen, selectors.EVENT_READ, None)
        for v, addr in enumerate(self.peers):
            if v == self.id:
                continue
            while True:
                try:
                    s = socket.create_connection(addr, timeout=5.0)
                    break
                except OSError:
                    if time.monotonic() > self._deadline:
                        raise TransportError(f"cannot connect to {addr[0]}:{addr[1]}", v) from None
                    # not polling here: replies need every outgoing link in place
                    time.sleep(0.05)
            s.settimeout(None)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._out[v] = s
            self._send(v, Hello(self.id))

    def _send(self, v: int, msg: Message) -> None:
        try:
            self._out[v].sendall(encode(msg))
        except OSError as e:
            if self._idle:
                return  # peer already shut down; nothing left to tell it
            raise TransportError(f"send failed: {e}", v) from None
        self.stats.messages_sent += 1
        if not isinstance(msg, Hello):
            self.sent.append((v, type(msg).__name__))

    def _poll(self, wait: float) -> None:
        for key, _ in self._sel.select(wait):
            if key.fileobj is self._listen:
                conn, _ = self._listen.accept()
                conn.setblocking(False)
                self._sel.register(conn, selectors.EVENT_READ, {"peer": None, "dec": FrameDecoder()})
                continue
            conn, info = key.fileobj, key.data
            try:
                data = conn.recv(1 << 16)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError:
                data = b""
            if not data:
                self._sel.unregister(conn)
                conn.close()
                if not self._idle and not self._done:
                    raise TransportError("connection lost", info["peer"])
                continue
            for msg in info["dec"].feed(data):
                if isinstance(msg, Hello):
                    info["peer"] = msg.sender
                else:
                    self._handle(msg)

    def _close(self) -> None:
        for key in list(self._sel.get_map().values()):
            self._sel.unregister(key.fileobj)
            key.fileobj.close()
        for s in self._out.values():
            s.close()
        self._sel.close()

    # -- protocol
    def _handle(self, msg: Message) -> None:
        if isinstance(msg, StealRequest):
            # the thief has run dry: no point stealing from it later
            self.victims.discard(msg.sender)
            if len(self.queue) >= 2:
                self._send(msg.sender, TaskGrant(self.id, self.queue.pop()))
                self.stats.grants_sent += 1
            else:
                self._send(msg.sender, Empty(self.id))
                self.stats.empties_sent += 1
        elif isinstance(msg, TaskGrant):
            self.queue.append(msg.tile)
            if self._outstanding == msg.sender and self._started:
                self._outstanding = None
                self.stats.grants_received += 1
            else:
                self._initial_received += 1
        elif isinstance(msg, Empty):
            self.victims.discard(msg.sender)
            self.stats.empties_received += 1
            if self._outstanding == msg.sender:
                self._outstanding = None
        elif isinstance(msg, SubtreeUpload):
            if self.id != 0:
                raise TransportError("subtree upload sent to a non-coordinator", msg.sender)
            self.uploads[msg.sender] = tree_from_nodes(self.gt.geometry, msg.nodes)
        elif isinstance(msg, Shutdown):
            self._done = True

    @property
    def _started(self) -> bool:
        return self._initial_received >= self._initial_expected

    def _analyze(self, t: TileId) -> None:
        p = self.src.level_array(t.level)[t.row, t.col]
        if np.isnan(p):
            raise MissingPredictionError(t)
        d = self.sched.decide(t.level, float(p))
        self.partial.add(t, float(p), d)
        self.stats.tiles += 1
        if d is Decision.ZOOM:
            self.queue.extend(self.gt.geometry.children(t))

    def run(self) -> ExecutionTree:
        """Worker 0 returns the gathered tree; every other worker its own partial tree."""
        self._deadline = time.monotonic() + self.timeout
        try:
            self._connect()
            if self.id == 0:
                self.queue.extend(self.assignment[0])
                for w in range(1, self.size):
                    for t in self.assignment[w]:
                        self._send(w, TaskGrant(0, t))
            while not self._done:
                if time.monotonic() > self._deadline:
                    raise TransportError(f"worker {self.id} timed out")
                self._poll(0 if self.queue else 0.05)
                if self._done:
                    break
                if self.queue:
                    self._analyze(self.queue.popleft())
                elif not self._started or self._outstanding is not None:
                    continue
                elif self.victims:
                    v = self.rng.choice(sorted(self.victims))
                    self._outstanding = v
                    self.stats.steal_requests += 1
                    self._send(v, StealRequest(self.id))
                elif not self._idle:
                    self._idle = True
                    if self.id != 0:
                        self._send(0, SubtreeUpload(self.id, tree_nodes(self.partial)))
                if self.id == 0 and self._idle and len(self.uploads) == self.size - 1:
                    for v in range(1, self.size):
                        self._send(v, Shutdown(0))
                    self._done = True
        finally:
            self._close()
        if self.id != 0:
            return self.partial
        tree = gather([self.partial] + [self.uploads[v] for v in range(1, self.size)])
        tree.check_invariants(self.gt)
        return tree


@dataclass
class ClusterResult:
    tree: ExecutionTree
    partials: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    sent: list = field(default_factory=list)

    @property
    def loads(self) -> list[int]:
        return [s.tiles for s in self.stats]


def run_local_cluster(gt: GroundTruthPyramid, src: PredictionSource, sched: ThresholdSchedule,
                      num_workers: int, seed: int = 0, timeout: float = 120.0,
                      assignment: list[list[TileId]] | None = None) -> ClusterResult:
    """Run `num_workers` workers on loopback, one thread each, sockets only between them."""
    socks = []
    for _ in range(num_workers):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        s.listen(num_workers)
        socks.append(s)
    peers = [s.getsockname() for s in socks]
    workers = [ClusterWorker(i, peers, gt, src, sched, seed, socks[i], timeout, assignment) for i in range(num_workers)]
    results: list = [None] * num_workers
    errors: list = [None] * num_workers

    def target(i):
        try:
            results[i] = workers[i].run()
        except BaseException as e:  # reported to the caller below
            errors[i] = e

    threads = [threading.Thread(target=target, args=(i,), daemon=True) for i in range(num_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout + 5.0)
    for i, e in enumerate(errors):
        if e is not None:
            raise e
    if any(t.is_alive() for t in threads):
        raise TransportError("cluster did not terminate")
    partials = [workers[0].partial] + results[1:]
    return ClusterResult(results[0], partials, [w.stats for w in workers], [w.sent for w in workers])
