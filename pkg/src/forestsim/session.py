"""Socket sessions: one reader and one writer thread per connection, talking to the tick loop via queues."""
from __future__ import annotations

import collections
import errno
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional, Union

from . import protocol as P

log = logging.getLogger(__name__)
RECV_CHUNK = 1 << 18


class PortInUse(OSError):
    pass


@dataclass(frozen=True)
class Closed:
    reason: str = "eof"


Event = tuple["Session", Union[P.Message, P.DecodeError, Closed]]


class Session:
    """Server side of one vehicle connection.

    Control messages are sent in order. Frames are held per camera; with
    ``drop_frames`` a newer frame for the same camera replaces an unsent
    older one, so a slow reader never stalls the tick loop.
    """

    def __init__(self, sock: socket.socket, events: "queue.Queue[Event]", sid: int, drop_frames: bool = False):
        self.sock = sock
        self.sid = sid
        self.drop_frames = drop_frames
        self.body_id: Optional[int] = None
        self.hello: Optional[P.Hello] = None
        self.dropped_frames = 0
        self._events = events
        self._out: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closing = False
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name=f"session-{sid}-rx", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"session-{sid}-tx", daemon=True)
        # the writer must exist before any inbound event can trigger close()
        self._writer.start()
        self._reader.start()

    # -- outbound ----------------------------------------------------------
    def send(self, msg: P.Message) -> None:
        self._push(("ctl", None, P.encode(msg)))

    def send_frame(self, camera_id: int, header: P.FrameHeader, payload: bytes) -> None:
        data = P.encode(header) + P.encode(P.FramePayload(payload))
        with self._cond:
            if self.drop_frames:
                for i, item in enumerate(self._out):
                    if item[0] == "frame" and item[1] == camera_id:
                        del self._out[i]
                        self.dropped_frames += 1
                        break
            self._out.append(("frame", camera_id, data))
            self._cond.notify()

    def _push(self, item) -> None:
        with self._cond:
            self._out.append(item)
            self._cond.notify()

    def _write_loop(self) -> None:
        try:
            while True:
                with self._cond:
                    while not self._out and not self._closing:
                        self._cond.wait()
                    if not self._out and self._closing:
                        break
                    item = self._out.popleft()
                self.sock.sendall(item[2])
        except OSError as exc:
            self._events.put((self, Closed(f"send failed: {exc}")))
        finally:
            try:
                self.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    # -- inbound -----------------------------------------------------------
    def _read_loop(self) -> None:
        dec = P.StreamDecoder()
        try:
            while True:
                data = self.sock.recv(RECV_CHUNK)
                if not data:
                    self._events.put((self, Closed("eof")))
                    return
                try:
                    for msg in dec.feed(data):
                        self._events.put((self, msg))
                except P.DecodeError as exc:
                    self._events.put((self, exc))
                    return
        except OSError as exc:
            self._events.put((self, Closed(f"recv failed: {exc}")))

    # -- teardown ----------------------------------------------------------
    def close(self, error: Optional[P.Error] = None, wait: float = 2.0) -> None:
        """Flush queued output (plus an optional ERROR), then close."""
        if error is not None:
            self.send(error)
        with self._cond:
            self._closing = True
            self._cond.notify()
        self._writer.join(wait)
        try:
            self.sock.close()
        except OSError:
            pass
        self._closed.set()

    @property
    def backlog(self) -> int:
        with self._cond:
            return len(self._out)


def listen(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        srv.bind((host, port))
    except OSError as exc:
        srv.close()
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(exc.errno, f"port {port} is already in use") from None
        raise
    srv.listen(16)
    return srv


class Acceptor:
    """Accepts connections on a background thread and wraps each in a Session."""

    def __init__(self, srv: socket.socket, events: "queue.Queue[Event]", drop_frames: bool):
        self.srv = srv
        self.sessions: list[Session] = []
        self._events = events
        self._drop = drop_frames
        self._stop = False
        self._thread = threading.Thread(target=self._loop, name="acceptor", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        sid = 0
        while not self._stop:
            try:
                conn, _ = self.srv.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sid += 1
            self.sessions.append(Session(conn, self._events, sid, self._drop))

    def close(self) -> None:
        self._stop = True
        try:
            self.srv.close()
        except OSError:
            pass
        for s in list(self.sessions):
            s.close(wait=1.0)


def connect(host: str, port: int, timeout: float) -> socket.socket:
    """Connect with retries until ``timeout`` seconds have passed."""
    deadline = time.monotonic() + timeout
    delay = 0.02
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(delay)
            delay = min(delay * 2, 0.25)


class ClientConnection:
    """Blocking message reader/writer for the vehicle side."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._dec = P.StreamDecoder()
        self._ready: collections.deque = collections.deque()

    def send(self, msg: P.Message) -> None:
        self.sock.sendall(P.encode(msg))

    def recv(self) -> P.Message:
        while not self._ready:
            data = self.sock.recv(RECV_CHUNK)
            if not data:
                raise ConnectionError("server closed the connection")
            self._ready.extend(self._dec.feed(data))
        return self._ready.popleft()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
