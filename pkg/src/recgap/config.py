"""Plain ``key = value`` config files, atomic writes and float formatting."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def fmt(x: float) -> str:
    """12-significant-digit float text used in every emitted file."""
    return format(float(x), ".12g")


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def load_config(path: str | os.PathLike) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))


def parse_list(value: str, cast=float) -> list:
    return [cast(v) for v in value.replace(";", ",").split(",") if v.strip()]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
