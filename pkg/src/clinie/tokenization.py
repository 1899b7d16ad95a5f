"""Default tokenizer.

Splits on whitespace, keeps runs of word characters together, and falls back
to one token per character for unsegmented scripts (kana, CJK ideographs).
Punctuation characters become single tokens so that annotated spans such as
``<A>liver</A>.`` align with token boundaries.

Any callable ``str -> list[(start, end)]`` can replace it.
"""
import re

_CJK = "぀-ヿ㐀-䶿一-鿿豈-﫿ｦ-ﾟ"
_TOKEN_RE = re.compile(rf"[{_CJK}]|[^\W{_CJK}]+|[^\s\w]")


def tokenize(text):
    """Character spans ``(start, end)`` of each token in ``text``."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def whitespace_tokenize(text):
    return [m.span() for m in re.finditer(r"\S+", text)]
