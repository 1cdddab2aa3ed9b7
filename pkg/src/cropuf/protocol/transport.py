"""Request/response channels between the TTP and device agents.

A device greets with HELLO as soon as a session opens; after that the TTP side
sends requests and reads one reply each.  DATA messages between devices are
one-way.  Every frame that crosses a channel can be captured in a
:class:`Transcript`.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..errors import FrameError, ProtocolError
from .messages import HELLO, MAX_FRAME, Message, decode_message, encode_message, read_frame


class ChannelClosed(ProtocolError):
    def __init__(self, detail: str = "channel closed"):
        super().__init__("channel_closed", detail)


@dataclass
class Transcript:
    frames: list[tuple[str, str, bytes]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, label: str, direction: str, frame: bytes) -> None:
        with self._lock:
            self.frames.append((label, direction, frame))

    def __iter__(self):
        return iter(list(self.frames))

    def __len__(self):
        return len(self.frames)

    def contains(self, needle: bytes) -> bool:
        return any(needle in f for _, _, f in self.frames)

    def dump_hex(self) -> list[str]:
        return [f"{label} {direction} {frame.hex()}" for label, direction, frame in self.frames]


class SequenceTracker:
    """Outgoing counter plus monotonicity check on the peer's numbers."""

    def __init__(self):
        self.out = 0
        self.last_in = -1

    def stamp(self, msg: Message) -> Message:
        self.out += 1
        msg.seq = self.out
        return msg

    def accept(self, msg: Message) -> None:
        if msg.seq <= self.last_in:
            raise ProtocolError("bad_sequence", f"seq {msg.seq} after {self.last_in}")
        self.last_in = msg.seq


class FrameHandler(Protocol):
    def open_session(self) -> Message: ...

    def handle_frame(self, frame: bytes) -> bytes | None: ...


class Channel:
    """TTP-side endpoint of one session."""

    hello: Message

    def request(self, msg: Message) -> Message:
        raise NotImplementedError

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackChannel(Channel):
    """In-process channel that still round-trips every message through its frame.

    ``tamper`` may rewrite requests in transit; ``fail_after`` closes the
    channel once that many replies have been delivered.
    """

    def __init__(
        self,
        peer: FrameHandler,
        transcript: Transcript | None = None,
        label: str = "",
        tamper: Callable[[Message], Message] | None = None,
        fail_after: int | None = None,
    ):
        self.peer = peer
        self.transcript = transcript
        self.label = label
        self.tamper = tamper
        self.fail_after = fail_after
        self.delivered = 0
        self.closed = False
        self.seq = SequenceTracker()
        frame = encode_message(peer.open_session())
        self._record("<-", frame)
        self.hello = decode_message(frame)
        self.seq.accept(self.hello)

    def _record(self, direction: str, frame: bytes) -> None:
        if self.transcript is not None:
            self.transcript.record(self.label, direction, frame)

    def _transmit(self, msg: Message) -> bytes | None:
        if self.closed:
            raise ChannelClosed()
        frame = encode_message(self.seq.stamp(msg))
        if self.tamper is not None:
            frame = encode_message(self.tamper(decode_message(frame)))
        self._record("->", frame)
        return self.peer.handle_frame(frame)

    def request(self, msg: Message) -> Message:
        if self.fail_after is not None and self.delivered >= self.fail_after:
            self.closed = True
            raise ChannelClosed(f"link lost after {self.delivered} replies")
        reply = self._transmit(msg)
        if reply is None:
            raise ProtocolError("bad_message", "peer sent no reply")
        self._record("<-", reply)
        self.delivered += 1
        out = decode_message(reply)
        self.seq.accept(out)
        return out

    def send(self, msg: Message) -> None:
        reply = self._transmit(msg)
        if reply is not None:
            self._record("<-", reply)

    def close(self) -> None:
        self.closed = True


class SocketChannel(Channel):
    """TCP client session (TTP connecting to a device server)."""

    def __init__(self, host: str, port: int, timeout: float | None = 30.0, transcript: Transcript | None = None,
                 label: str = ""):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.stream = self.sock.makefile("rb")
        self.transcript = transcript
        self.label = label or f"{host}:{port}"
        self.seq = SequenceTracker()
        self.hello = self._read()
        if self.hello.type != HELLO:
            raise ProtocolError("bad_message", f"expected HELLO, got {self.hello.type}")

    def _read(self) -> Message:
        try:
            frame = read_frame(self.stream)
        except (EOFError, OSError) as exc:
            raise ChannelClosed(str(exc)) from exc
        if self.transcript is not None:
            self.transcript.record(self.label, "<-", frame)
        msg = decode_message(frame)
        self.seq.accept(msg)
        return msg

    def send(self, msg: Message) -> None:
        frame = encode_message(self.seq.stamp(msg))
        if self.transcript is not None:
            self.transcript.record(self.label, "->", frame)
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def request(self, msg: Message) -> Message:
        self.send(msg)
        return self._read()

    def close(self) -> None:
        try:
            self.stream.close()
            self.sock.close()
        except OSError:
            pass


class _DeviceRequestHandler(socketserver.StreamRequestHandler):
    def handle(self):
        agent = self.server.agent
        self.wfile.write(encode_message(agent.open_session()))
        while True:
            try:
                frame = read_frame(self.rfile, MAX_FRAME)
            except (EOFError, ConnectionError):
                return
            except FrameError as exc:
                # No clean boundary left on this stream: report and close.
                self.wfile.write(agent.error_frame("bad_frame", exc.detail))
                return
            reply = agent.handle_frame(frame)
            if reply is not None:
                self.wfile.write(reply)


class DeviceServer(socketserver.TCPServer):
    """Serves one device agent over TCP.

    A device runs one session at a time, so connections are handled
    sequentially; a second client waits in the listen backlog.
    """

    allow_reuse_address = True

    def __init__(self, agent, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _DeviceRequestHandler)
        self.agent = agent

    @property
    def port(self) -> int:
        return self.server_address[1]
