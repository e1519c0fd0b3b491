import hashlib
import logging
import os
import re
from pathlib import Path
from typing import Any, Iterable, List, Union

import orjson
from dotenv import load_dotenv, find_dotenv

logger = logging.getLogger(__name__)

_TOKEN_PATTERN = re.compile(r'[a-z0-9]+')


def tokenize(text: str) -> List[str]:
    """Split text into lowercased alphanumeric tokens

    Examples:
        "Heat the Mug, then cool it" -> ['heat', 'the', 'mug', 'then', 'cool', 'it']
        "tags: helpful=heat" -> ['tags', 'helpful', 'heat']
    """
    return _TOKEN_PATTERN.findall(text.lower())


def length_prefixed(data: bytes) -> bytes:
    """Prefix a byte string with its length as an 8-byte big-endian integer"""
    return len(data).to_bytes(8, 'big') + data


def sha256_hex(*parts: bytes) -> str:
    """SHA-256 hex digest over the concatenation of length-prefixed parts"""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(length_prefixed(part))
    return digest.hexdigest()


def dumps_json(obj: Any, indent: bool = True) -> bytes:
    """Serialize to JSON bytes with a trailing newline

    Dict key order is preserved, so callers control the on-disk field order.
    """
    option = orjson.OPT_SERIALIZE_NUMPY
    if indent:
        option |= orjson.OPT_INDENT_2
    return orjson.dumps(obj, option=option) + b'\n'


def write_bytes_atomic(path: Union[str, Path], data: bytes) -> Path:
    """Write bytes through a temp file and rename, creating parent directories"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp_path, 'wb') as f:
        f.write(data)
    os.replace(tmp_path, path)
    return path


def write_json(path: Union[str, Path], obj: Any) -> Path:
    return write_bytes_atomic(path, dumps_json(obj))


def read_json(path: Union[str, Path]) -> Any:
    with open(path, 'rb') as f:
        return orjson.loads(f.read())


def append_json_line(path: Union[str, Path], obj: Any) -> None:
    """Append one compact JSON object as a line; the file is flushed per record"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'ab') as f:
        f.write(dumps_json(obj, indent=False))
        f.flush()


def read_json_lines(path: Union[str, Path]) -> List[Any]:
    """Read a JSON lines file, skipping blank lines"""
    records = []
    with open(path, 'rb') as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(orjson.loads(line))
            except orjson.JSONDecodeError as e:
                raise ValueError(f"Malformed JSON on line {line_number} of {path}: {e}") from e
    return records


def parse_csv_list(value: str) -> List[str]:
    """Parse a comma separated flag value such as 'util,div,cov'"""
    return [item.strip().lower() for item in value.split(',') if item.strip()]


def unique_in_order(items: Iterable[str]) -> List[str]:
    seen = set()
    ordered = []
    for item in items:
        if item not in seen:
            seen.add(item)
            ordered.append(item)
    return ordered


def load_env() -> None:
    """Load a .env file from the working directory or any parent"""
    _ = load_dotenv(find_dotenv(usecwd=True))
