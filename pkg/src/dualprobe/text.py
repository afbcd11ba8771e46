"""Answer/response text normalization shared by dataset building and scoring."""

from __future__ import annotations

import re
import unicodedata

_WS = re.compile(r"\s+")


def _pass(s: str) -> str:
    s = unicodedata.normalize("NFKC", s).lower()
    s = unicodedata.normalize("NFKC", s)
    s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    return _WS.sub(" ", s).strip()


def normalize_text(s: str) -> str:
    """NFKC fold, lowercase, drop punctuation, collapse whitespace.

    Dropping punctuation can leave a combining mark next to a new base
    character ("z?̌" -> "ž"), which the next NFKC would compose,
    so the pass is repeated until the text stops changing.  After the first
    pass the text is already lowercase and folded, so later passes can only
    compose or delete characters and the loop terminates.
    """
    out = _pass(s)
    while True:
        again = _pass(out)
        if again == out:
            return out
        out = again
