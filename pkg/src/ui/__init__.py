"""
UI Package

Terminal output and spinner used by the CLI.
"""

from src.ui.output_manager import Colors, OutputManager, console
from src.ui.spinner import Spinner

__all__ = [
    "console",
    "Colors",
    "OutputManager",
    "Spinner",
]
