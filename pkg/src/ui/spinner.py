"""Stderr spinner shown while a simulate, solve or fuse step runs."""

import sys
import threading
import time
from typing import Optional, TextIO

from src.config import Config

GLYPHS = "⠋⠙⠹⠸⠼⠴⠦⠧⠇⠏"
TICK_SECONDS = 0.08

# shared by every spinner so two never interleave on one line
_write_lock = threading.Lock()

_ANSI = {
    "cyan": "\033[36m",
    "green": "\033[32m",
    "red": "\033[31m",
    "dim": "\033[2m",
    "bold": "\033[1m",
    "reset": "\033[0m",
}


class Spinner:
    """Animated status line on stderr.

    Stays silent unless stderr is a terminal, so piped output, CI logs and
    click's CliRunner see only the final results on stdout. On stop it
    leaves one line with the outcome and the elapsed wall time.
    """

    def __init__(self, label: str, color: str = "cyan", stream: Optional[TextIO] = None):
        self.label = label
        self.stream = stream if stream is not None else sys.stderr
        try:
            self.enabled = bool(self.stream.isatty())
        except (AttributeError, ValueError):
            self.enabled = False
        self.colored = self.enabled and not Config.no_color()
        self.color = color if color in _ANSI else "cyan"
        self._halt = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._started_at: Optional[float] = None
        self._done = False

    def _ansi(self, name: str) -> str:
        return _ANSI[name] if self.colored else ""

    def _loop(self) -> None:
        tick = 0
        while not self._halt.is_set():
            glyph = GLYPHS[tick % len(GLYPHS)]
            tick += 1
            with _write_lock:
                if self._done:
                    break
                try:
                    self.stream.write(
                        f"\r{self._ansi('bold')}{self.label}{self._ansi('reset')} "
                        f"{self._ansi(self.color)}{glyph}{self._ansi('reset')}"
                    )
                except UnicodeEncodeError:
                    self.stream.write(f"\r{self.label} ...")
                self.stream.flush()
            self._halt.wait(TICK_SECONDS)

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self._started_at if self._started_at is not None else 0.0

    def start(self) -> None:
        if self._done or self._started_at is not None:
            return
        self._started_at = time.monotonic()
        if self.enabled:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()

    def stop(self, success: bool = True) -> None:
        if self._done:
            return
        with _write_lock:
            self._done = True
        self._halt.set()
        if self._thread is not None:
            self._thread.join(timeout=0.3)
        if not self.enabled:
            return
        outcome = (
            f"{self._ansi('green')}[OK]" if success else f"{self._ansi('red')}[FAILED]"
        ) + self._ansi("reset")
        with _write_lock:
            self.stream.write(
                f"\r\033[K{self._ansi('bold')}{self.label}{self._ansi('reset')} {outcome} "
                f"{self._ansi('dim')}({self.elapsed:.1f}s){self._ansi('reset')}\n"
            )
            self.stream.flush()
