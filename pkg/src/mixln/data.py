"""A corpus that needs no download: the local Python standard library sources."""

from __future__ import annotations

import sysconfig
from pathlib import Path


_SKIP_DIRS = {"test", "tests", "idle_test", "site-packages", "dist-packages", "lib2to3"}


def stdlib_corpus_text(max_bytes: int | None = None) -> str:
    """Concatenate stdlib ``.py`` files (test suites excluded) in sorted path order.

    The result is deterministic for a given Python installation. Useful for
    smoke runs and demos where no text file is at hand.
    """
    root = Path(sysconfig.get_paths()["stdlib"])
    parts, size = [], 0
    for path in sorted(root.rglob("*.py")):
        if _SKIP_DIRS.intersection(path.relative_to(root).parts[:-1]):
            continue
        text = path.read_text(encoding="utf-8", errors="ignore")
        parts.append(text)
        size += len(text.encode("utf-8"))
        if max_bytes is not None and size >= max_bytes:
            break
    blob = "".join(parts).encode("utf-8")
    if max_bytes is not None:
        blob = blob[:max_bytes]
    return blob.decode("utf-8", errors="ignore")


def write_stdlib_corpus(path, max_bytes: int | None = None) -> Path:
    path = Path(path)
    path.write_text(stdlib_corpus_text(max_bytes), encoding="utf-8")
    return path
