"""Tolerant HTTP/1.x response head parsing."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class HttpResponse:
    status_line: str
    status: int | None
    headers: tuple[tuple[str, str], ...]  # (lower-cased name, stripped value)
    body: bytes
    complete_head: bool

    def values(self, name: str) -> list[str]:
        name = name.lower()
        return [v for n, v in self.headers if n == name]


def parse_response(payload: bytes) -> HttpResponse | None:
    """Parse a response head; None if the payload is not an HTTP response.

    Headers run to the first blank line (CRLF or bare LF). A head cut short
    by the end of the segment is still parsed, flagged incomplete.
    """
    if not payload.startswith(b"HTTP/"):
        return None
    end = payload.find(b"\r\n\r\n")
    sep = 4
    if end < 0:
        end = payload.find(b"\n\n")
        sep = 2
    complete = end >= 0
    head = payload[:end] if complete else payload
    body = payload[end + sep:] if complete else b""
    lines = head.decode("latin-1").replace("\r\n", "\n").split("\n")
    status_line = lines[0].strip()
    parts = status_line.split(None, 2)
    # isdigit alone admits superscripts such as "\xb2"
    status = int(parts[1]) if len(parts) > 1 and parts[1].isascii() and parts[1].isdigit() else None
    headers = []
    for line in lines[1:]:
        name, colon, value = line.partition(":")
        if not colon:
            continue
        headers.append((name.strip().lower(), value.strip()))
    return HttpResponse(status_line, status, tuple(headers), body, complete)


def differing_headers(a: HttpResponse, b: HttpResponse) -> set[str]:
    """Names of headers whose value lists differ between two responses."""
    names = {n for n, _ in a.headers} | {n for n, _ in b.headers}
    return {n for n in names if a.values(n) != b.values(n)}
