"""Socket gateway exposing a live simulation: frame injection, registry
edits, run control, and a broadcast event stream.

Wire format: newline-delimited JSON objects over a plain TCP stream. A
browser can connect to the same port - the listener sniffs an HTTP GET
and upgrades to a WebSocket, where each text frame carries one of the
same JSON objects.

The simulation itself stays single-threaded: client readers only enqueue
commands, and one sim thread executes them, advances the bus, and
broadcasts events in trace order.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import replace
from typing import Optional

from . import bus as bus_mod
from .bus import BUS_OFF, build_bus, reset_node
from .codec import EXTENDED, STANDARD, Frame, FrameId
from .errors import BindError, ConfigError
from .metrics import summarize
from .rbt import RuleSet
from .scenario import ScenarioConfig, build_scenario

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
DEFAULT_PORT = 29536

QUIESCE_LIMIT_BITS = 500_000


def _parse_wire_id(value) -> int:
    if isinstance(value, str):
        return int(value, 16)
    return int(value)


def _fmt_id(value: int) -> str:
    return f"0x{value:X}"


class _Client:
    _counter = 0

    def __init__(self, sock: socket.socket):
        _Client._counter += 1
        self.id = _Client._counter
        self.sock = sock
        self.websocket = False
        self.lock = threading.Lock()
        self.alive = True

    def send_line(self, text: str):
        if not self.alive:
            return
        try:
            if self.websocket:
                payload = text.encode()
                header = bytearray([0x81])
                n = len(payload)
                if n < 126:
                    header.append(n)
                elif n < 1 << 16:
                    header.append(126)
                    header += struct.pack(">H", n)
                else:
                    header.append(127)
                    header += struct.pack(">Q", n)
                with self.lock:
                    self.sock.sendall(bytes(header) + payload)
            else:
                with self.lock:
                    self.sock.sendall(text.encode() + b"\n")
        except OSError:
            self.alive = False


class GatewayServer:
    def __init__(self, scenario: ScenarioConfig, port: int = DEFAULT_PORT,
                 host: str = "127.0.0.1", time_scale: float = 0.0):
        self.scenario = scenario
        self.host = host
        self.port = port
        self.time_scale = time_scale

        fresh = build_scenario(scenario.doc)
        config = replace(fresh.bus, max_time_us=None)
        self.bus = build_bus(config)
        self.rules: Optional[RuleSet] = fresh.rules
        self.rbt_name = "rbt"
        if fresh.attach_rbt and fresh.rules is not None:
            bus_mod.attach_rbt_node(self.bus, fresh.rules, self.rbt_name)
        self.tx_node = fresh.tx_node or self._default_tx_node()

        self._commands: queue.Queue = queue.Queue()
        self._clients: dict[int, _Client] = {}
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._running = time_scale > 0
        self._trace_cursor = 0
        self._delivered_attempts: set = set()
        self._listener: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []

    def _default_tx_node(self) -> str:
        for spec in self.bus.config.nodes:
            if spec.role == "sender":
                return spec.name
        return self.bus.config.nodes[0].name if self.bus.config.nodes else ""

    # -- lifecycle -------------------------------------------------------

    def start(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((self.host, self.port))
        except OSError as exc:
            listener.close()
            raise BindError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        listener.listen(8)
        listener.settimeout(0.2)
        self._listener = listener

        accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        sim_thread = threading.Thread(target=self._sim_loop, daemon=True)
        self._threads = [accept_thread, sim_thread]
        accept_thread.start()
        sim_thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        for thread in self._threads:
            thread.join(timeout=2.0)
        with self._clients_lock:
            for client in self._clients.values():
                try:
                    client.sock.close()
                except OSError:
                    pass
            self._clients.clear()

    def wait(self):
        while not self._stop.is_set():
            time.sleep(0.2)

    # -- client handling -------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            client = _Client(sock)
            with self._clients_lock:
                self._clients[client.id] = client
            thread = threading.Thread(target=self._reader_loop, args=(client,), daemon=True)
            thread.start()

    def _reader_loop(self, client: _Client):
        sock = client.sock
        try:
            # sniff a WebSocket upgrade; raw clients may connect silently,
            # so give the sniff a short deadline and fall back to line mode
            sock.settimeout(0.3)
            try:
                head = sock.recv(4, socket.MSG_PEEK)
            except (socket.timeout, TimeoutError):
                head = b""
            sock.settimeout(None)
            if head.startswith(b"GET"):
                if not self._ws_handshake(client):
                    raise OSError("websocket handshake failed")
                client.websocket = True
            self._commands.put((client, {"type": "__hello__"}))
            if client.websocket:
                self._ws_read_loop(client)
            else:
                self._line_read_loop(client)
        except OSError:
            pass
        finally:
            client.alive = False
            with self._clients_lock:
                self._clients.pop(client.id, None)
            try:
                sock.close()
            except OSError:
                pass

    def _line_read_loop(self, client: _Client):
        buf = b""
        while not self._stop.is_set():
            chunk = client.sock.recv(4096)
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, _, buf = buf.partition(b"\n")
                self._enqueue_text(client, line.decode(errors="replace").strip())

    def _ws_handshake(self, client: _Client) -> bool:
        data = b""
        sock = client.sock
        while b"\r\n\r\n" not in data:
            chunk = sock.recv(4096)
            if not chunk:
                return False
            data += chunk
        headers = {}
        for line in data.split(b"\r\n")[1:]:
            if b":" in line:
                key, _, value = line.partition(b":")
                headers[key.strip().lower()] = value.strip()
        key = headers.get(b"sec-websocket-key")
        if key is None:
            return False
        accept = base64.b64encode(hashlib.sha1(key + _WS_GUID.encode()).digest())
        sock.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\n"
            b"Connection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n"
        )
        return True

    def _ws_read_loop(self, client: _Client):
        sock = client.sock

        def read_exact(n: int) -> bytes:
            data = b""
            while len(data) < n:
                chunk = sock.recv(n - len(data))
                if not chunk:
                    raise OSError("closed")
                data += chunk
            return data

        while not self._stop.is_set():
            header = read_exact(2)
            opcode = header[0] & 0x0F
            masked = header[1] & 0x80
            length = header[1] & 0x7F
            if length == 126:
                length = struct.unpack(">H", read_exact(2))[0]
            elif length == 127:
                length = struct.unpack(">Q", read_exact(8))[0]
            mask = read_exact(4) if masked else b"\x00" * 4
            payload = bytearray(read_exact(length))
            for i in range(length):
                payload[i] ^= mask[i % 4]
            if opcode == 8:  # close
                break
            if opcode == 9:  # ping -> pong
                with client.lock:
                    sock.sendall(bytes([0x8A, len(payload)]) + bytes(payload))
                continue
            if opcode in (1, 2):
                self._enqueue_text(client, payload.decode(errors="replace").strip())

    def _enqueue_text(self, client: _Client, text: str):
        if not text:
            return
        try:
            msg = json.loads(text)
            if not isinstance(msg, dict):
                raise ValueError("not an object")
        except ValueError as exc:
            client.send_line(json.dumps(
                {"type": "error", "code": "parse_error", "detail": str(exc)}, sort_keys=True))
            return
        self._commands.put((client, msg))

    # -- simulation thread ----------------------------------------------

    def _sim_loop(self):
        last_wall = time.monotonic()
        while not self._stop.is_set():
            try:
                client, msg = self._commands.get(timeout=0.05)
            except queue.Empty:
                client, msg = None, None
            if msg is not None:
                self._execute(client, msg)
            if self._running and self.time_scale > 0:
                now = time.monotonic()
                target_us = (now - last_wall) * 1e6 * self.time_scale
                bits = int(target_us // self.bus.bit_time_us)
                if bits > 0:
                    for _ in range(min(bits, 20000)):
                        self.bus.step_bit()
                    last_wall = now
                    self._flush_events()
            else:
                last_wall = time.monotonic()

    def _execute(self, client: Optional[_Client], msg: dict):
        kind = msg.get("type")
        if kind == "__hello__":
            if client is not None:
                client.send_line(json.dumps(self._hello(), sort_keys=True))
            return
        try:
            response = self.handle_command(msg)
        except _CommandError as exc:
            if client is not None:
                client.send_line(json.dumps(
                    {"type": "error", "code": exc.code, "detail": str(exc)}, sort_keys=True))
            return
        self._flush_events()
        if response is not None and client is not None:
            client.send_line(json.dumps(response, sort_keys=True))

    def _hello(self) -> dict:
        registered = []
        if self._rbt() is not None:
            registered = sorted(f.value for f in self._rbt().rules.registered_ids)
        return {
            "type": "hello",
            "bitrate": self.bus.config.bitrate,
            "channel": self.bus.config.channel,
            "tx_node": self.tx_node,
            "nodes": [
                {
                    "name": n.name,
                    "role": n.role,
                    "state": n.fault.mode,
                    "tec": n.fault.tec,
                    "rec": n.fault.rec,
                }
                for n in self.bus.nodes
            ],
            "registered_ids": [_fmt_id(v) for v in registered],
        }

    def _rbt(self):
        for node in self.bus.nodes:
            if isinstance(node, bus_mod._RbtNode):
                return node
        return None

    # -- command execution ------------------------------------------------

    def handle_command(self, msg: dict) -> Optional[dict]:
        kind = msg.get("type")
        if kind == "send_frame":
            return self._cmd_send_frame(msg)
        if kind == "register_id":
            return self._cmd_register(msg, add=True)
        if kind == "unregister_id":
            return self._cmd_register(msg, add=False)
        if kind == "control":
            return self._cmd_control(msg)
        if kind == "get_summary":
            summary = summarize(self.bus.trace)
            return {
                "type": "metrics",
                "busload_pct": summary.busload_pct,
                "frames_offered": summary.frames_offered,
                "frames_delivered": summary.frames_delivered,
                "frames_killed": summary.frames_killed,
                "bus_off_events": [
                    {"node": n, "time_us": t} for n, t in summary.bus_off_events
                ],
            }
        raise _CommandError("unknown_type", f"unknown message type {kind!r}")

    def _cmd_send_frame(self, msg: dict) -> None:
        try:
            value = _parse_wire_id(msg["id"])
        except (KeyError, ValueError) as exc:
            raise _CommandError("invalid_frame", f"bad id: {exc}") from exc
        extended = bool(msg.get("extended", False))
        if not extended and value >= (1 << 11):
            if value < (1 << 29):
                extended = True
            else:
                raise _CommandError("invalid_frame", f"id {value:#x} out of 29-bit range")
        data_hex = msg.get("data", "")
        dlc = msg.get("dlc", len(data_hex) // 2)
        try:
            frame = Frame(
                FrameId(value, EXTENDED if extended else STANDARD),
                rtr=bool(msg.get("rtr", False)),
                dlc=int(dlc),
                data=bytes.fromhex(data_hex),
            )
        except ValueError as exc:
            raise _CommandError("invalid_frame", str(exc)) from exc
        node_name = msg.get("node", self.tx_node)
        try:
            node = self.bus.node(node_name)
        except Exception as exc:
            raise _CommandError("unknown_node", str(exc)) from exc
        node.pending.append(
            bus_mod.QueuedFrame(frame, msg.get("name", ""), self.bus.time_us)
        )
        if self.time_scale == 0:
            # command-driven mode: resolve the send before answering
            self._advance_quiescent()
        return None

    def _cmd_register(self, msg: dict, add: bool) -> None:
        rbt = self._rbt()
        if rbt is None:
            raise _CommandError("bad_command", "no rbt attached")
        try:
            value = _parse_wire_id(msg["id"])
        except (KeyError, ValueError) as exc:
            raise _CommandError("invalid_frame", f"bad id: {exc}") from exc
        extended = bool(msg.get("extended", False)) or value >= (1 << 11)
        frame_id = FrameId(value, EXTENDED if extended else STANDARD)
        ids = set(rbt.rules.registered_ids)
        if add:
            ids.add(frame_id)
        else:
            ids.discard(frame_id)
        rbt.rules = replace(rbt.rules, registered_ids=frozenset(ids))
        return None

    def _cmd_control(self, msg: dict) -> Optional[dict]:
        action = msg.get("action")
        if action == "start":
            self._running = True
            return None
        if action == "pause":
            self._running = False
            return None
        if action == "step":
            bits = int(msg.get("bits", 0))
            if bits > 0:
                for _ in range(min(bits, QUIESCE_LIMIT_BITS)):
                    self.bus.step_bit()
            else:
                self._advance_quiescent()
            self._flush_events()
            return None
        if action == "reset_node":
            name = msg.get("node", "")
            try:
                reset_node(self.bus, name)
            except Exception as exc:
                raise _CommandError("unknown_node", str(exc)) from exc
            self._flush_events()
            node = self.bus.node(name)
            return {
                "type": "node_state",
                "node": name,
                "state": node.fault.mode,
                "tec": node.fault.tec,
                "rec": node.fault.rec,
            }
        raise _CommandError("bad_command", f"unknown control action {action!r}")

    def _advance_quiescent(self):
        for _ in range(QUIESCE_LIMIT_BITS):
            if self.bus.activity == "idle" and not any(
                n.tx is not None or n.pending or n.flag_level is not None
                or n.flag_next is not None
                for n in self.bus.nodes
            ):
                break
            self.bus.step_bit()
        self._flush_events()

    # -- event broadcast ---------------------------------------------------

    def _flush_events(self):
        records = self.bus.trace.records
        new = records[self._trace_cursor:]
        self._trace_cursor = len(records)
        out = []
        for rec in new:
            if rec.kind == "frame_delivered":
                attempt = rec.detail.get("attempt")
                if attempt in self._delivered_attempts:
                    continue
                self._delivered_attempts.add(attempt)
                out.append(self._frame_event(rec, "delivered", rec.detail.get("tx_node", "")))
            elif rec.kind == "frame_killed":
                out.append(self._frame_event(rec, "killed", rec.node))
            elif rec.kind == "state_change":
                out.append(
                    {
                        "type": "node_state",
                        "node": rec.node,
                        "state": rec.detail["mode"],
                        "tec": rec.detail["tec"],
                        "rec": rec.detail["rec"],
                    }
                )
        if out:
            summary = summarize(self.bus.trace)
            out.append({"type": "metrics", "busload_pct": summary.busload_pct})
        for event in out:
            self._broadcast(event)

    def _frame_event(self, rec, verdict: str, tx_node: str) -> dict:
        detail = rec.detail
        direction = "TX" if tx_node == self.tx_node else "RX"
        return {
            "type": "frame_event",
            "time_us": rec.time_us,
            "channel": self.bus.config.channel,
            "id": _fmt_id(detail["id"]),
            "name": detail.get("name", ""),
            "direction": direction,
            "data": detail.get("data", ""),
            "verdict": verdict,
        }

    def _broadcast(self, event: dict):
        text = json.dumps(event, sort_keys=True)
        with self._clients_lock:
            clients = list(self._clients.values())
        for client in clients:
            client.send_line(text)


class _CommandError(Exception):
    def __init__(self, code: str, detail: str):
        self.code = code
        super().__init__(detail)


def serve(scenario: ScenarioConfig, port: Optional[int] = None,
          host: str = "127.0.0.1", time_scale: float = 0.0) -> GatewayServer:
    """Start a gateway for the scenario; returns the running server."""
    if port is None:
        port = int(os.environ.get("CANSIM_PORT", DEFAULT_PORT))
    server = GatewayServer(scenario, port=port, host=host, time_scale=time_scale)
    server.start()
    return server
