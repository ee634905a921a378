"""RFC retrieval and structural parsing.

Fetches the canonical plain-text rendering of an RFC (HTTP or a local mirror,
with an on-disk cache), then strips page furniture, detects numbered section
headings, and reflows paragraph text into section bodies.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import requests

FOOTER_RE = re.compile(r"\[Page\s+[0-9ivxlcdm]+\]\s*$", re.IGNORECASE)
HEADING_RE = re.compile(r"^(\d+(?:\.\d+)*)\.?\s+(\S.*)$")
_MONTHS = (
    "January|February|March|April|May|June|July|August|September|October|November|December"
)
_DATE_RE = re.compile(rf"\b(?:{_MONTHS})\s+\d{{4}}\s*$")
_RFC_BANNER_RE = re.compile(r"^RFC\s*:?\s*\d+")

_request_lock = threading.Lock()
_last_request_at = 0.0


class FetchError(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


@dataclass
class SourceConfig:
    base_url: str = "https://www.rfc-editor.org/rfc"
    mirror_dir: str | None = None
    cache_dir: str | None = None
    offline: bool = False
    request_delay_s: float = 0.5
    user_agent: str = "teleqlora-rfc-ingest/0.1"
    refetch: bool = False


@dataclass
class RfcSection:
    heading_number: str
    heading_text: str
    body: str


@dataclass
class RfcDocument:
    number: int
    title: str
    sections: list[RfcSection]
    source_url: str = ""
    fetched_at: str = ""


def _looks_like_text(data: bytes) -> bool:
    if b"\x00" in data:
        return False
    head = data[:512].lower()
    return b"<html" not in head and b"<!doctype" not in head


def _throttle(delay_s: float):
    global _last_request_at
    with _request_lock:
        wait = _last_request_at + delay_s - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        _last_request_at = time.monotonic()


def fetch_rfc(number: int, source: SourceConfig) -> bytes:
    """Raw bytes of rfc{number}.txt from cache, mirror, or HTTP (in that order)."""
    if number <= 0:
        raise ValueError("RFC number must be positive")
    name = f"rfc{number}.txt"

    if source.cache_dir and not source.refetch:
        cached = Path(source.cache_dir) / name
        if cached.exists():
            return cached.read_bytes()

    if source.mirror_dir is not None:
        candidate = Path(source.mirror_dir) / name
        if not candidate.exists():
            raise FetchError(f"fetch failed (missing from mirror: {name})")
        data = candidate.read_bytes()
        if not _looks_like_text(data):
            raise FetchError("unexpected content type")
        return data

    if source.offline:
        raise FetchError(f"fetch failed (offline and {name} not cached)")

    url = f"{source.base_url.rstrip('/')}/{name}"
    _throttle(source.request_delay_s)
    resp = requests.get(url, headers={"User-Agent": source.user_agent}, timeout=30)
    if resp.status_code != 200:
        raise FetchError(f"fetch failed ({resp.status_code})")
    data = resp.content
    if not data.strip() or not _looks_like_text(data):
        raise FetchError("unexpected content type")

    if source.cache_dir:
        cache_path = Path(source.cache_dir) / name
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_bytes(data)
    return data


def _is_headerish(line: str, seen_headers: set[str]) -> bool:
    stripped = line.strip()
    if not stripped:
        return False
    if stripped in seen_headers:
        return True
    if _RFC_BANNER_RE.match(stripped):
        return True
    if _DATE_RE.search(stripped):
        return True
    # left text, wide gap, right text: the classic running-header shape
    return bool(re.search(r"\S\s{6,}\S", line.rstrip()))


def _strip_page_furniture(raw: str) -> list[str]:
    pages = raw.replace("\r\n", "\n").replace("\r", "\n").split("\f")
    seen_headers: set[str] = set()
    kept: list[str] = []
    for page_no, page in enumerate(pages):
        lines = page.split("\n")
        # footers sit at the bottom of a page, possibly above blank lines
        while lines and not lines[-1].strip():
            lines.pop()
        if lines and FOOTER_RE.search(lines[-1]):
            seen_headers.add(lines[-1].strip())
            lines.pop()
        if page_no > 0:
            while lines and not lines[0].strip():
                lines.pop(0)
            # a header block is 1-3 non-blank lines ending at the first blank;
            # only consumed when the top line looks like page furniture
            if lines and _is_headerish(lines[0], seen_headers):
                budget = 3
                while lines and lines[0].strip() and budget:
                    seen_headers.add(lines[0].strip())
                    lines.pop(0)
                    budget -= 1
        kept.extend(lines)
        kept.append("")
    return kept


def _reflow(lines: list[str]) -> str:
    paragraphs: list[str] = []
    current: list[str] = []
    for line in lines:
        if line.strip():
            current.append(line.strip())
        elif current:
            paragraphs.append(" ".join(current))
            current = []
    if current:
        paragraphs.append(" ".join(current))
    return "\n\n".join(paragraphs)


def _extract_title(preamble: list[str]) -> str:
    for line in preamble:
        stripped = line.strip()
        if not stripped or len(stripped) < 4:
            continue
        indent = len(line) - len(line.lstrip())
        if indent >= 8 and not any(ch.isdigit() for ch in stripped):
            return stripped
    return ""


def parse_rfc(raw, number: int | None = None) -> RfcDocument:
    """Parse plain-text RFC content into ordered sections.

    Raises ParseError("unstructured document") with the raw text preserved
    when no numbered headings are found.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"undecodable document: {exc}", raw=repr(raw[:200])) from exc
    else:
        text = raw

    lines = _strip_page_furniture(text)

    preamble: list[str] = []
    sections: list[RfcSection] = []
    current: RfcSection | None = None
    body_lines: list[str] = []

    def flush():
        if current is not None:
            current.body = _reflow(body_lines)
            sections.append(current)

    for line in lines:
        match = HEADING_RE.match(line)
        if match:
            flush()
            current = RfcSection(match.group(1), match.group(2).strip(), "")
            body_lines = []
        elif current is None:
            preamble.append(line)
        else:
            body_lines.append(line)
    flush()

    if not sections:
        raise ParseError("unstructured document", raw=text)

    if number is None:
        found = re.search(r"RFC\s*:?\s*(\d+)", "\n".join(preamble))
        number = int(found.group(1)) if found else 0

    return RfcDocument(number=number, title=_extract_title(preamble), sections=sections)


def render_back(doc: RfcDocument) -> str:
    """Reconstitute parseable text from a document (used to check idempotence)."""
    out = [f"RFC: {doc.number}", ""]
    if doc.title:
        out.append(" " * 20 + doc.title)
        out.append("")
    for section in doc.sections:
        out.append(f"{section.heading_number}  {section.heading_text}")
        out.append("")
        for paragraph in section.body.split("\n\n"):
            if paragraph:
                out.append("   " + paragraph)
                out.append("")
    return "\n".join(out) + "\n"


def now_utc() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
