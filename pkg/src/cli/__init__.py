"""
Command-line interface

Click group with the simulate, register, evaluate, fuse and benchmark commands.
"""

from src.cli.commands import cli, handle_errors

__all__ = ["cli", "handle_errors"]
