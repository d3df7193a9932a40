"""
Terminal output for the registration CLI

Every user-facing line goes through ``console`` so prefixes stay
consistent. ANSI colors are used only when the stream is a terminal and
``NO_COLOR`` is unset; characters the stream cannot encode degrade to ASCII.

Usage:
    from src.ui.output_manager import console

    console.header("DSR registration of 11 frames")
    console.iteration(record)
    console.table(["sequence", "dsr_objective"], rows)

    with console.spinner("Fusing 11 frames"):
        ...
"""

import sys
import threading
from contextlib import contextmanager
from typing import Any, Iterator, List, Mapping, Optional, Sequence, TextIO

from src.config import Config
from src.ui.spinner import Spinner


class Colors:
    """ANSI codes used by the CLI."""

    RESET = "\033[0m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    CYAN = "\033[36m"
    BRIGHT_CYAN = "\033[96m"


class OutputManager:
    """Thread-safe, color-aware printer for CLI results and solver progress."""

    RULE_WIDTH = 75

    def __init__(self, stream: Optional[TextIO] = None):
        self._lock = threading.Lock()
        self._stream = stream
        self._spinner: Optional[Spinner] = None

    @property
    def stream(self) -> TextIO:
        # resolved late so click's CliRunner can swap sys.stdout
        return self._stream if self._stream is not None else sys.stdout

    @property
    def colored(self) -> bool:
        if Config.no_color():
            return False
        try:
            return bool(self.stream.isatty())
        except (AttributeError, ValueError):
            return False

    def _paint(self, text: str, *codes: str) -> str:
        if not codes or not self.colored:
            return text
        return "".join(codes) + text + Colors.RESET

    def _emit(self, line: str) -> None:
        with self._lock:
            try:
                print(line, file=self.stream)
            except UnicodeEncodeError:
                print(line.encode("ascii", errors="replace").decode("ascii"), file=self.stream)

    def _tagged(self, tag: str, color: str, text: str) -> None:
        self._emit(f"{self._paint(tag, color)} {text}")

    def success(self, text: str) -> None:
        self._tagged("[OK]", Colors.GREEN, text)

    def error(self, text: str) -> None:
        self._tagged("[ERROR]", Colors.RED, text)

    def warning(self, text: str) -> None:
        self._tagged("[WARN]", Colors.YELLOW, text)

    def info(self, text: str) -> None:
        self._tagged("[INFO]", Colors.CYAN, text)

    def header(self, text: str) -> None:
        encoding = getattr(self.stream, "encoding", None) or "utf-8"
        try:
            rule = ("─" * self.RULE_WIDTH).encode(encoding).decode(encoding)
        except (UnicodeEncodeError, LookupError):
            rule = "-" * self.RULE_WIDTH
        self._emit(self._paint(rule, Colors.BRIGHT_CYAN))
        self._emit(self._paint(text, Colors.BOLD))
        self._emit(self._paint(rule, Colors.BRIGHT_CYAN))

    def metrics(self, items: Mapping[str, Any]) -> None:
        """Indented ``name: value`` lines; floats in six significant digits."""
        for name, value in items.items():
            shown = f"{value:.6g}" if isinstance(value, float) else value
            self._emit(f"   {name}: {shown}")

    def iteration(self, record: Any) -> None:
        """One line per solver iteration, used as the solver progress callback."""
        frame = getattr(record, "frame", None)
        where = f"L{record.level} it {record.iteration:>3}"
        if frame is not None:
            where += f" frame {frame}"
        self._emit(
            self._paint(
                f"  {where}  f={record.objective:.6e}  "
                f"|dx|={record.step_norm:.2e}  s={record.step_scale:g}",
                Colors.DIM,
            )
        )

    @contextmanager
    def spinner(self, label: str, color: str = "cyan") -> Iterator[Spinner]:
        """Run the body under a spinner; a new spinner finishes any active one."""
        with self._lock:
            if self._spinner is not None:
                self._spinner.stop(success=True)
            current = self._spinner = Spinner(label, color=color)
        current.start()
        try:
            yield current
        except BaseException:
            current.stop(success=False)
            raise
        else:
            current.stop(success=True)
        finally:
            with self._lock:
                if self._spinner is current:
                    self._spinner = None

    def table(self, headers: Sequence[str], rows: List[Sequence[Any]]) -> None:
        """Left-aligned, pipe-separated table; floats in six significant digits."""
        cells = [[f"{c:.6g}" if isinstance(c, float) else str(c) for c in row] for row in rows]
        widths = [
            max([len(h)] + [len(row[i]) for row in cells if i < len(row)])
            for i, h in enumerate(headers)
        ]
        head = " | ".join(h.ljust(w) for h, w in zip(headers, widths))
        self._emit(self._paint(head, Colors.BOLD))
        self._emit("-" * len(head))
        for row in cells:
            self._emit(" | ".join(c.ljust(w) for c, w in zip(row, widths)))


console = OutputManager()
