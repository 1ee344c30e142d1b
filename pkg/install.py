#!/usr/bin/env python3
"""
install.py — Cross-platform installer for depthflow
====================================================

Supported platforms
-------------------
  * Windows 10 / Windows 11
  * Linux (any modern distribution)

What this script does
---------------------
  1. Verifies that Python 3.9+ is available.
  2. Creates a virtual environment in the ``.venv`` folder.
  3. Installs PyTorch into the venv (CPU-only wheels with ``--cpu``).
  4. Installs depthflow itself and its remaining dependencies in editable mode.
  5. Creates a platform-specific launcher:
       Windows  → ``run_depthflow.bat``  (run from CMD)
       Linux    → ``run_depthflow.sh``   (run as ./run_depthflow.sh)
  6. Prints next-step instructions.

Usage
-----
  Windows:   python install.py [--cpu]
  Linux:     python3 install.py [--cpu]
"""

from __future__ import annotations

import argparse
import os
import platform
import subprocess
import sys
import textwrap
from pathlib import Path

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MINIMUM_PYTHON = (3, 9)
VENV_DIR = Path(".venv")
SCRIPT_DIR = Path(__file__).resolve().parent
TORCH_CPU_INDEX = "https://download.pytorch.org/whl/cpu"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _print_header(text: str) -> None:
    line = "=" * 60
    print(f"\n{line}\n  {text}\n{line}")


def _print_step(step: str, description: str) -> None:
    print(f"\n[{step}] {description}")


def _abort(message: str) -> None:
    print(f"\nERROR: {message}\n", file=sys.stderr)
    sys.exit(1)


def _run(args: list, **kwargs) -> subprocess.CompletedProcess:
    """Run a subprocess, stream output to the terminal, raise on failure."""
    print("  $", " ".join(str(a) for a in args))
    try:
        return subprocess.run(args, check=True, **kwargs)  # noqa: S603
    except subprocess.CalledProcessError as exc:
        _abort(
            f"Command failed with exit code {exc.returncode}.\n"
            f"Command: {' '.join(str(a) for a in args)}\n"
            "Please check the output above for details."
        )


def _venv_python(venv: Path) -> Path:
    if platform.system() == "Windows":
        return venv / "Scripts" / "python.exe"
    return venv / "bin" / "python"


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def check_python_version() -> None:
    _print_step("1/5", "Checking Python version")
    version = sys.version_info[:2]
    if version < MINIMUM_PYTHON:
        _abort(
            f"Python {MINIMUM_PYTHON[0]}.{MINIMUM_PYTHON[1]}+ is required, "
            f"but you are running Python {version[0]}.{version[1]}.\n"
            "Please install a newer Python from https://www.python.org/downloads/"
        )
    print(f"  ✓ Python {sys.version.split()[0]} — OK")


def create_venv() -> Path:
    _print_step("2/5", f"Creating virtual environment in '{VENV_DIR}'")
    if VENV_DIR.exists():
        print(f"  Virtual environment already exists at '{VENV_DIR}' — skipping creation.")
    else:
        _run([sys.executable, "-m", "venv", str(VENV_DIR)])
        print(f"  ✓ Virtual environment created at '{VENV_DIR}'")
    _run([str(_venv_python(VENV_DIR)), "-m", "pip", "install", "--upgrade", "pip"])
    return VENV_DIR


def install_torch(venv: Path, cpu_only: bool) -> None:
    _print_step("3/5", "Installing PyTorch" + (" (CPU-only wheels)" if cpu_only else ""))
    cmd = [str(_venv_python(venv)), "-m", "pip", "install", "torch"]
    if cpu_only:
        cmd += ["--index-url", TORCH_CPU_INDEX]
    _run(cmd)
    print("  ✓ torch installed")


def install_package(venv: Path) -> None:
    _print_step("4/5", "Installing depthflow and its dependencies")
    _run(
        [
            str(_venv_python(venv)),
            "-m",
            "pip",
            "install",
            "--editable",
            f"{SCRIPT_DIR}[dev]",
        ]
    )
    print("  ✓ depthflow installed")


def create_launcher(venv: Path) -> Path:
    _print_step("5/5", "Creating platform launcher")
    if platform.system() == "Windows":
        path = SCRIPT_DIR / "run_depthflow.bat"
        content = textwrap.dedent(
            f"""\
            @echo off
            REM depthflow launcher — generated by install.py
            "{venv / 'Scripts' / 'python.exe'}" -m depthflow.main %*
            """
        )
        path.write_text(content, encoding="utf-8")
    else:
        path = SCRIPT_DIR / "run_depthflow.sh"
        content = textwrap.dedent(
            f"""\
            #!/usr/bin/env bash
            # depthflow launcher — generated by install.py
            exec "{venv / 'bin' / 'python'}" -m depthflow.main "$@"
            """
        )
        path.write_text(content, encoding="utf-8")
        path.chmod(path.stat().st_mode | 0o111)
    print(f"  ✓ Launcher created: {path}")
    return path


def print_instructions(launcher: Path) -> None:
    activate_cmd = (
        r".venv\Scripts\activate" if platform.system() == "Windows" else "source .venv/bin/activate"
    )
    print(
        textwrap.dedent(
            f"""
            ╔══════════════════════════════════════════════════════════╗
            ║            depthflow installation complete!              ║
            ╚══════════════════════════════════════════════════════════╝

            Option 1 — Use the launcher script (no activation needed):
                {launcher} --help

            Option 2 — Activate the virtual environment first:
                {activate_cmd}
                depthflow --help

            Quick start (desk-scale synthetic run):
                depthflow synth-data --out data/desk
                depthflow train --stage all --config configs/desk.cfg
                depthflow eval-flow --checkpoint runs/desk/stage3.ckpt

            Run the test suite:
                pytest                # fast tests
                pytest --runslow      # include the training acceptance runs
            """
        )
    )


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------


def main() -> None:
    parser = argparse.ArgumentParser(description="Install depthflow into a local virtual environment.")
    parser.add_argument("--cpu", action="store_true", help="Install CPU-only PyTorch wheels.")
    args = parser.parse_args()

    _print_header("depthflow — Installation")
    os.chdir(SCRIPT_DIR)

    check_python_version()
    venv = create_venv()
    install_torch(venv, args.cpu)
    install_package(venv)
    print_instructions(create_launcher(venv))


if __name__ == "__main__":
    main()
