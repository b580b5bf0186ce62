"""Reading structured fields and sign names out of free-form model answers."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

from .dataset import ClassRef

_NON_ALNUM = re.compile(r"[^0-9a-z]+")
_DIGIT_ALPHA = re.compile(r"(?<=[0-9])(?=[a-z])|(?<=[a-z])(?=[0-9])")
_LABEL_LINE = re.compile(r"^[\s>*#_-]*\**\s*([A-Za-z][A-Za-z ]*?)\s*\**\s*:\s*\**\s*(.*)$")
_ENUM = re.compile(r"(?<!\S)(\d{1,3})[.)]\s+")
_BULLET = re.compile(r"^\s*[-*•]\s+(.*)$")


def normalize(text: str) -> str:
    """Lowercase, punctuation to spaces, digits split from letters, spaces collapsed.

    ``"Speed Limit (50km/h)"`` becomes ``"speed limit 50 km h"``.
    """
    t = _NON_ALNUM.sub(" ", text.lower())
    t = _DIGIT_ALPHA.sub(" ", t)
    return " ".join(t.split())


def _contains(haystack: str, needle: str) -> bool:
    return bool(needle) and f" {needle} " in f" {haystack} "


def match_name(text: str, classes: Sequence[ClassRef]) -> ClassRef | None:
    """Resolve a candidate string to one catalog class, or ``None``.

    Preference: exact normalized equality; then the longest display name
    contained in the text (earliest position on ties); then the text contained
    in exactly one display name. Containment is checked on whole tokens, so
    ``"speed limit 5"`` never matches ``"Speed limit (50km/h)"``.
    """
    t = normalize(text)
    if not t:
        return None
    names = [(normalize(c.display_name), c) for c in classes]
    for n, c in names:
        if n == t:
            return c
    inside = [(n, c) for n, c in names if _contains(t, n)]
    if inside:
        padded = f" {t} "
        return max(inside, key=lambda nc: (len(nc[0]), -padded.index(f" {nc[0]} ")))[1]
    around = [c for n, c in names if _contains(n, t)]
    if len(around) == 1:
        return around[0]
    return None


def labeled_fields(text: str, labels: Iterable[str]) -> dict[str, str]:
    """Values of ``Label: value`` segments, matched case-insensitively.

    Segments are split on newlines and on ``|``, so one-line answers such as
    ``"Shape: octagon | Color: red"`` work too. Unlabeled segments are ignored;
    a repeated label keeps its first non-empty value.
    """
    wanted = {lab.lower(): lab for lab in labels}
    aliases = {"colour": "color"}
    out: dict[str, str] = {}
    for line in text.splitlines():
        for seg in line.split("|"):
            m = _LABEL_LINE.match(seg)
            if not m:
                continue
            key = m.group(1).strip().lower()
            key = aliases.get(key, key)
            if key in wanted:
                name = wanted[key]
                val = m.group(2).strip().strip("*").strip()
                if not out.get(name):
                    out[name] = val
    return out


def split_candidates(text: str) -> list[str]:
    items = enumerated_items(text)
    if items:
        return items
    sep = ";" if ";" in text else ","
    return [s.strip() for s in re.split(rf"[{sep}\n]", text) if s.strip()]


def enumerated_items(text: str) -> list[str]:
    """Items of a ``1. a 2. b`` style list, inline or one per line.

    Only numbers forming the sequence 1, 2, 3, ... count as enumerators, which
    keeps digits inside names (``Speed limit 50``) from splitting an item.
    """
    marks = []
    expect = 1
    for m in _ENUM.finditer(text):
        if int(m.group(1)) == expect:
            marks.append(m)
            expect += 1
    items = []
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        chunk = text[m.end() : end].strip()
        if i + 1 == len(marks):
            chunk = chunk.split("\n")[0]
        chunk = chunk.strip().strip("*").strip()
        if chunk:
            items.append(chunk)
    return items


def resolve_names(items: Iterable[str], classes: Sequence[ClassRef], limit: int | None = None) -> tuple[list[ClassRef], list[str]]:
    """Map strings to classes, first occurrence wins; returns (matched, unmatched)."""
    out: list[ClassRef] = []
    unmatched: list[str] = []
    for item in items:
        c = match_name(item, classes)
        if c is None:
            unmatched.append(item)
        elif c not in out:
            out.append(c)
        if limit is not None and len(out) >= limit:
            break
    return out, unmatched


def parse_ranked_answer(text: str, classes: Sequence[ClassRef], k_max: int) -> list[ClassRef]:
    """Ranked, de-duplicated classes from an answer, at most ``k_max``.

    Enumerated items are used when present, then bullet lines. Failing both, a
    text that names exactly one catalog class yields that class alone.
    """
    items = enumerated_items(text)
    if not items:
        items = [m.group(1) for m in map(_BULLET.match, text.splitlines()) if m]
    if items:
        ranked, _ = resolve_names(items, classes, k_max)
        return ranked
    t = normalize(text)
    found = [c for c in classes if _contains(t, normalize(c.display_name))]
    # "speed limit 50" also contains a hypothetical "speed limit" class; keep the longest
    found = [
        c
        for c in found
        if not any(
            o is not c and _contains(normalize(o.display_name), normalize(c.display_name)) for o in found
        )
    ]
    return found[:1] if len(found) == 1 and k_max >= 1 else []
