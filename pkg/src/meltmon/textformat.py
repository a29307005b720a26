"""Line-oriented versioned text format shared by model and regressor files."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import CorruptFile, SchemaVersionMismatch


def fmt(v: float) -> str:
    # 17 significant digits round-trips every float64 exactly
    return format(float(v), ".17g")


def fmt_list(values) -> str:
    return " ".join(fmt(v) for v in values)


def quote(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


class LineReader:
    """Iterates the lines of a file while tracking byte offsets for error reports."""

    def __init__(self, data: bytes, name: str = "<file>"):
        self.name = name
        self._lines: list[tuple[int, str]] = []
        offset = 0
        for raw in data.splitlines(keepends=True):
            try:
                text = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError as exc:
                raise CorruptFile(f"{name}: invalid UTF-8", offset + exc.start) from None
            self._lines.append((offset, text))
            offset += len(raw)
        self._end = offset
        self._pos = 0

    @classmethod
    def open(cls, path: str | Path) -> "LineReader":
        return cls(Path(path).read_bytes(), str(path))

    @property
    def offset(self) -> int:
        return self._lines[self._pos][0] if self._pos < len(self._lines) else self._end

    def fail(self, message: str) -> CorruptFile:
        return CorruptFile(f"{self.name}: {message}", self.offset)

    def next_tokens(self, keyword: str, count: int | None = None) -> list[str]:
        """Consume the next line, which must start with ``keyword``; returns the remaining tokens."""
        if self._pos >= len(self._lines):
            raise self.fail(f"unexpected end of file, expected '{keyword}'")
        line = self._lines[self._pos][1]
        tokens = line.split()
        if not tokens or tokens[0] != keyword:
            raise self.fail(f"expected '{keyword}', found {line[:40]!r}")
        if count is not None and len(tokens) - 1 != count:
            raise self.fail(f"'{keyword}' line needs {count} values, found {len(tokens) - 1}")
        self._pos += 1
        return tokens[1:]

    def next_string(self, keyword: str) -> str:
        if self._pos >= len(self._lines):
            raise self.fail(f"unexpected end of file, expected '{keyword}'")
        line = self._lines[self._pos][1]
        head, _, rest = line.partition(" ")
        if head != keyword:
            raise self.fail(f"expected '{keyword}', found {line[:40]!r}")
        try:
            value = json.loads(rest)
        except json.JSONDecodeError:
            raise self.fail(f"bad quoted string after '{keyword}'") from None
        if not isinstance(value, str):
            raise self.fail(f"'{keyword}' must be a quoted string")
        self._pos += 1
        return value

    def floats(self, tokens: list[str]) -> list[float]:
        try:
            return [float(t) for t in tokens]
        except ValueError:
            raise self.fail("malformed number") from None

    def ints(self, tokens: list[str]) -> list[int]:
        try:
            return [int(t) for t in tokens]
        except ValueError:
            raise self.fail("malformed integer") from None

    def header(self, magic: str, supported: int) -> int:
        tokens = self.next_tokens(magic, 1)
        (version,) = self.ints(tokens)
        if version != supported:
            raise SchemaVersionMismatch(
                f"{self.name}: schema version {version} not supported (expected {supported})"
            )
        return version

    def expect_eof(self) -> None:
        while self._pos < len(self._lines) and not self._lines[self._pos][1].strip():
            self._pos += 1
        if self._pos < len(self._lines):
            raise self.fail("trailing content")
