"""
Loading pydantic configuration models from TOML text.

Syntax errors report the line and column tomli found; validation errors report
the line of the key or `[[table]]` header that introduced the bad value.
"""

import re
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Type, TypeVar, Union

import tomli
from pydantic import BaseModel, ValidationError

from radloc.errors import ConfigError

M = TypeVar("M", bound=BaseModel)

Triple = Tuple[float, float, float]

_LINE_RE = re.compile(r"line (\d+)")


def _decode_line(exc: tomli.TOMLDecodeError) -> int:
    lineno = getattr(exc, "lineno", None)
    if isinstance(lineno, int):
        return lineno
    match = _LINE_RE.search(str(exc))
    return int(match.group(1)) if match else 0


def locate(text: str, loc: Sequence[Union[str, int]]) -> int:
    """
    Best-effort line number for a pydantic error location inside TOML text.
    :param text: The TOML source.
    :param loc: Error location, e.g. ("primitives", 2, "radius").
    :return: 1-based line number, 0 when nothing matches.
    """
    lines = text.splitlines()
    best = 0
    start = 0
    i = 0
    while i < len(loc):
        key = loc[i]
        if not isinstance(key, str):
            i += 1
            continue
        index = loc[i + 1] if i + 1 < len(loc) and isinstance(loc[i + 1], int) else None
        header = re.compile(rf"^\s*\[\[\s*(?:[\w.]+\.)?{re.escape(key)}\s*\]\]")
        table = re.compile(rf"^\s*\[\s*(?:[\w.]+\.)?{re.escape(key)}\s*\]")
        assign = re.compile(rf"^\s*{re.escape(key)}\s*=")
        if index is not None:
            hits = [n for n in range(start, len(lines)) if header.match(lines[n])]
            if index < len(hits):
                best = start = hits[index] + 1
                i += 2
                continue
        found = False
        for n in range(start, len(lines)):
            if (table.match(lines[n]) and index is None) or assign.match(lines[n]):
                best = start = n + 1
                found = True
                break
            if best and lines[n].lstrip().startswith("["):
                # key absent from the table we are inside
                break
        if not found:
            break
        i += 1
    return best


def parse_toml(text: str, source: str = "") -> Dict[str, Any]:
    """
    :raises ConfigError: With the line of the syntax error.
    """
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc), source, _decode_line(exc)) from exc


def model_from_toml(model: Type[M], text: str, source: str = "") -> M:
    """
    Parse and validate TOML text into a pydantic model.
    :param model: Target model class.
    :param text: TOML source.
    :param source: File name used in messages.
    :raises ConfigError: On syntax or validation failure.
    :return: Validated model instance.
    """
    data = parse_toml(text, source)
    return model_from_dict(model, data, text, source)


def model_from_dict(
    model: Type[M], data: Dict[str, Any], text: str = "", source: str = ""
) -> M:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc: List[Union[str, int]] = list(first.get("loc", ()))
        where = ".".join(str(part) for part in loc)
        message = f"{where}: {first.get('msg', 'invalid value')}" if where else str(exc)
        raise ConfigError(message, source, locate(text, loc) if text else 0) from exc


def load_model(model: Type[M], path: Union[str, Path]) -> M:
    """
    Read a TOML file into a model.
    :raises ConfigError: On I/O, syntax or validation failure.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return model_from_toml(model, text, str(path))
