"""Quasi real-time classification of a per-pulse count stream.

Wire protocol, newline-delimited UTF-8::

    in:  EVT <bin> <d1> <d2> <d3> | FLUSH | QUIT
    out: CLS <first_bin> <last_bin> <COH|F1|F2|F3|UNDETERMINED> <p_coh> <p_f1> <p_f2> <p_f3> <g3_zero> <g2_zero_est>
         ERR <token>

Ingestion order is authoritative.  A bin index ahead of the expected next
index inserts zero-count bins (at most ``gap_cap`` of them); an index at or
behind it is relabelled as the next bin.  Blank lines are ignored.
"""

from __future__ import annotations

import io
import logging
import re
import socketserver
import sys
from dataclasses import dataclass
from typing import Iterable, NamedTuple, TextIO

import numpy as np

from .correlator import TAU_MAX, CorrelationMap, InvalidMapError, critical_points, g3_map
from .source import DetectionRecord
from .theory import PhotonClass, baseline_classify

log = logging.getLogger(__name__)

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1
_EVT = re.compile(r"EVT ([0-9]{1,20}) ([0-9]{1,10}) ([0-9]{1,10}) ([0-9]{1,10})")


class ProtocolError(ValueError):
    def __init__(self, token: str):
        super().__init__(token)
        self.token = token


class Event(NamedTuple):
    bin: int
    d1: int
    d2: int
    d3: int


def parse_event(line: str):
    """Parse one protocol line into an ``Event`` or the string ``"FLUSH"``/``"QUIT"``.

    Raises ``ProtocolError`` with the ERR token for malformed input.
    """
    text = " ".join(line.split())
    if text in ("FLUSH", "QUIT"):
        return text
    if not text.startswith("EVT"):
        raise ProtocolError("unknown-command")
    m = _EVT.fullmatch(text)
    if m is None:
        raise ProtocolError("bad-event")
    b, d1, d2, d3 = (int(g) for g in m.groups())
    if b > U64_MAX or max(d1, d2, d3) > U32_MAX:
        raise ProtocolError("bad-event")
    return Event(b, d1, d2, d3)


@dataclass(frozen=True)
class StreamConfig:
    window_size: int = 10_000
    emit_every: int = 1_000
    tau_max: int = TAU_MAX
    gap_cap: int | None = None  # defaults to window_size

    def __post_init__(self):
        if self.window_size <= 2 * self.tau_max:
            raise ValueError(f"window_size must exceed 2*tau_max = {2 * self.tau_max}")
        if not 1 <= self.emit_every <= self.window_size:
            raise ValueError("emit_every must lie in [1, window_size]")
        if self.gap_cap is not None and self.gap_cap < 0:
            raise ValueError("gap_cap must be non-negative")

    @property
    def min_window(self) -> int:
        return 2 * self.tau_max + 1

    @property
    def max_gap(self) -> int:
        return self.window_size if self.gap_cap is None else self.gap_cap


class BaselineClassifier:
    """Threshold fit of the map's critical points; scores are one-hot."""

    def classify(self, cmap: CorrelationMap) -> tuple[PhotonClass, np.ndarray]:
        g3, g2 = critical_points(cmap)
        cls = baseline_classify(g2, g3).photon_class
        return cls, np.eye(4)[int(cls)]


class CnnClassifier:
    def __init__(self, params):
        self.params = params

    def classify(self, cmap: CorrelationMap) -> tuple[PhotonClass, np.ndarray]:
        from .cnn import predict

        return predict(self.params, cmap)


class WindowState:
    """Ring buffers holding the most recent ``capacity`` bins."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.counts = np.zeros((capacity, 3), dtype=np.int64)
        self.labels = np.zeros(capacity, dtype=np.uint64)
        self.head = 0  # next write position
        self.bins_seen = 0
        self.last_bin: int | None = None

    def __len__(self) -> int:
        return min(self.bins_seen, self.capacity)

    def push(self, label: int, counts) -> None:
        self.counts[self.head] = counts
        self.labels[self.head] = label
        self.head = (self.head + 1) % self.capacity
        self.bins_seen += 1
        self.last_bin = label

    def push_zeros(self, first_label: int, n: int) -> None:
        """Append ``n`` empty bins labelled consecutively from ``first_label``."""
        if n <= 0:
            return
        keep = min(n, self.capacity)
        skipped = n - keep
        labels = np.arange(keep, dtype=np.uint64) + np.uint64(first_label + skipped)
        pos = (self.head + skipped + np.arange(keep)) % self.capacity
        self.counts[pos] = 0
        self.labels[pos] = labels
        self.head = (self.head + n) % self.capacity
        self.bins_seen += n
        self.last_bin = first_label + n - 1

    def snapshot(self) -> tuple[DetectionRecord, int, int]:
        """Ordered copy of the window as a record, with its first and last bin labels."""
        n = len(self)
        if n == 0:
            raise ValueError("window is empty")
        idx = (self.head - n + np.arange(n)) % self.capacity
        c = self.counts[idx]
        labels = self.labels[idx]
        return DetectionRecord(c[:, 0], c[:, 1], c[:, 2]), int(labels[0]), int(labels[-1])


def _num(x: float) -> str:
    return f"{x:.6f}"


def format_verdict(first_bin: int, last_bin: int, cls, scores=None, points=None) -> str:
    if cls is None:
        fields = ["UNDETERMINED"] + ["nan"] * 6
    else:
        fields = [PhotonClass(cls).short] + [_num(s) for s in scores] + [_num(v) for v in points]
    return f"CLS {first_bin} {last_bin} " + " ".join(fields)


def verdict_for(record: DetectionRecord, first_bin: int, last_bin: int, classifier, tau_max: int = TAU_MAX) -> str:
    """Classify a window; zero-normalization maps give an UNDETERMINED verdict."""
    cmap = g3_map(record, tau_max)
    try:
        points = critical_points(cmap)
        cls, scores = classifier.classify(cmap)
    except InvalidMapError:
        return format_verdict(first_bin, last_bin, None)
    return format_verdict(first_bin, last_bin, cls, scores, points)


def classify_window(state: WindowState, classifier, tau_max: int = TAU_MAX) -> str:
    if len(state) < 2 * tau_max + 1:
        raise ValueError(f"window holds {len(state)} bins; at least {2 * tau_max + 1} required")
    record, first, last = state.snapshot()
    return verdict_for(record, first, last, classifier, tau_max)


class StreamSession:
    """Per-client protocol state: feeds lines in, returns response lines."""

    def __init__(self, config: StreamConfig, classifier):
        self.config = config
        self.classifier = classifier
        self.state = WindowState(config.window_size)
        self.closed = False

    def _maybe_emit(self, out: list[str]) -> None:
        cfg = self.config
        if self.state.bins_seen % cfg.emit_every == 0 and len(self.state) >= cfg.min_window:
            out.append(classify_window(self.state, self.classifier, cfg.tau_max))

    def _fill_gap(self, first_label: int, n: int, out: list[str]) -> None:
        # split at emission boundaries so each verdict sees the window at that bin
        every = self.config.emit_every
        while n > 0:
            chunk = min(n, every - self.state.bins_seen % every)
            self.state.push_zeros(first_label, chunk)
            first_label += chunk
            n -= chunk
            self._maybe_emit(out)

    def ingest(self, event: Event) -> list[str]:
        out: list[str] = []
        last = self.state.last_bin
        if last is None:
            label = event.bin
        elif event.bin > last + 1:
            gap = min(event.bin - last - 1, self.config.max_gap)
            self._fill_gap(last + 1, gap, out)
            label = event.bin
        else:
            label = last + 1
        # labels wrap within the u64 field
        self.state.push(label & U64_MAX, (event.d1, event.d2, event.d3))
        self._maybe_emit(out)
        return out

    def flush(self) -> list[str]:
        n = len(self.state)
        if n == 0:
            return ["ERR empty-window"]
        if n < self.config.min_window:
            _, first, last = self.state.snapshot()
            return [format_verdict(first, last, None)]
        return [classify_window(self.state, self.classifier, self.config.tau_max)]

    def handle_line(self, line: str) -> list[str]:
        if self.closed or not line.strip():
            return []
        try:
            item = parse_event(line)
        except ProtocolError as exc:
            return [f"ERR {exc.token}"]
        if item == "QUIT":
            self.closed = True
            return []
        if item == "FLUSH":
            return self.flush()
        return self.ingest(item)


def run_lines(lines: Iterable[str], config: StreamConfig, classifier) -> list[str]:
    session = StreamSession(config, classifier)
    out = []
    for line in lines:
        out.extend(session.handle_line(line))
        if session.closed:
            break
    return out


def serve_text(infile: TextIO, outfile: TextIO, config: StreamConfig, classifier) -> int:
    """Stdin/stdout mode; returns the number of response lines written."""
    session = StreamSession(config, classifier)
    written = 0
    for line in infile:
        for response in session.handle_line(line):
            outfile.write(response + "\n")
            written += 1
        outfile.flush()
        if session.closed:
            break
    return written


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        session = StreamSession(srv.stream_config, srv.classifier)
        log.info("client %s connected", self.client_address)
        try:
            for raw in self.rfile:
                for response in session.handle_line(raw.decode("utf-8", errors="replace")):
                    self.wfile.write((response + "\n").encode())
                self.wfile.flush()
                if session.closed:
                    break
        except (ConnectionError, BrokenPipeError):
            pass
        log.info("client %s done after %d bins", self.client_address, session.state.bins_seen)


class StreamServer(socketserver.TCPServer):
    """Single-client-at-a-time TCP server; each connection gets a fresh window."""

    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], config: StreamConfig, classifier):
        self.stream_config = config
        self.classifier = classifier
        super().__init__(address, _Handler)


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def serve(config: StreamConfig, classifier, listen: str | None = None) -> None:
    """Run until end of input (stdin mode) or until interrupted (TCP mode)."""
    if listen is None:
        stdin = io.TextIOWrapper(sys.stdin.buffer, encoding="utf-8", errors="replace")
        serve_text(stdin, sys.stdout, config, classifier)
        return
    address = parse_listen(listen)
    try:
        server = StreamServer(address, config, classifier)
    except OSError as exc:
        raise OSError(f"cannot bind {listen}: {exc.strerror}") from exc
    log.info("listening on %s:%d", *server.server_address[:2])
    with server:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("shutting down")
