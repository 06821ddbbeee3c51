#!/usr/bin/env python3
"""Run the linters and the fast test suite; --fix applies the formatters first."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).parent.parent

FORMATTERS = [
    (["uv", "run", "isort", "backend", "scripts", "main.py"], "isort"),
    (["uv", "run", "black", "backend", "scripts", "main.py"], "black"),
]

CHECKS = [
    (["uv", "run", "black", "--check", "backend", "scripts", "main.py"], "black"),
    (["uv", "run", "isort", "--check-only", "backend", "scripts", "main.py"], "isort"),
    (["uv", "run", "flake8", "backend", "scripts"], "flake8"),
    (["uv", "run", "mypy", "backend"], "mypy"),
    (["uv", "run", "pytest", "-m", "not slow"], "fast tests"),
]


def run(command: list[str], name: str) -> bool:
    print(f"\n[{name}] {' '.join(command)}")
    result = subprocess.run(command, cwd=ROOT)
    print(f"[{name}] {'ok' if result.returncode == 0 else 'FAILED'}")
    return result.returncode == 0


def main() -> int:
    steps = (FORMATTERS if "--fix" in sys.argv else []) + CHECKS
    failed = [name for command, name in steps if not run(command, name)]
    print("\n" + "=" * 50)
    if failed:
        print(f"Failed: {', '.join(failed)}")
        return 1
    print("All checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
