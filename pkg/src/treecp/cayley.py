"""Reduced-word arithmetic on the free group underlying T_{2d}.

Vertices of the degree-2d homogeneous tree are reduced words over 2d
letters.  Letters are indexed 0..2d-1; letter i and its inverse pair up
arithmetically as inv(i) = (i + d) mod 2d, so no inverse table is needed.
Words are plain tuples of letter indices, which keeps them hashable and
cheap to copy inside the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

Word = tuple  # reduced word, tuple of letter indices

ROOT: Word = ()


class ParameterError(ValueError):
    """A numeric or structural argument is outside its admissible range."""


class InsufficientDepthError(ValueError):
    """Boundary-word prefixes are too short to witness a disagreement."""


@dataclass(frozen=True)
class Alphabet:
    """The 2d-letter alphabet {a_1..a_d, a_1'..a_d'} of the free group."""

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ParameterError(f"need d >= 1, got d={self.d}")

    @property
    def size(self) -> int:
        return 2 * self.d

    def inv(self, i: int) -> int:
        return (i + self.d) % (2 * self.d)

    def letters(self) -> range:
        return range(2 * self.d)

    def check_letter(self, i: int) -> int:
        if not 0 <= i < 2 * self.d:
            raise ParameterError(f"letter {i} out of range for d={self.d}")
        return i

    def letter_name(self, i: int) -> str:
        self.check_letter(i)
        return f"a{i + 1}" if i < self.d else f"a{i - self.d + 1}'"

    def parse_letter(self, name: str) -> int:
        inv = name.endswith("'")
        body = name[:-1] if inv else name
        if not body.startswith("a"):
            raise ParameterError(f"bad letter name {name!r}")
        try:
            k = int(body[1:])
        except ValueError:
            raise ParameterError(f"bad letter name {name!r}") from None
        if not 1 <= k <= self.d:
            raise ParameterError(f"letter {name!r} out of range for d={self.d}")
        return k - 1 + (self.d if inv else 0)


def inv_letter(i: int, d: int) -> int:
    return (i + d) % (2 * d)


def reduce_word(seq: Sequence[int], alphabet: Alphabet) -> Word:
    """Cancel adjacent inverse pairs until the word is reduced (stack pass)."""
    d = alphabet.d
    out: list[int] = []
    for i in seq:
        alphabet.check_letter(i)
        if out and out[-1] == (i + d) % (2 * d):
            out.pop()
        else:
            out.append(i)
    return tuple(out)


def concat(x: Word, y: Word, alphabet: Alphabet) -> Word:
    """Group multiplication: concatenation followed by reduction."""
    d = alphabet.d
    n = 2 * d
    xs = list(x)
    k = 0
    while xs and k < len(y) and xs[-1] == (y[k] + d) % n:
        xs.pop()
        k += 1
    return tuple(xs) + tuple(y[k:])


def inverse(x: Word, alphabet: Alphabet) -> Word:
    d = alphabet.d
    n = 2 * d
    return tuple((i + d) % n for i in reversed(x))


def apply_letter(x: Word, i: int, d: int) -> Word:
    """Right-multiply a reduced word by one letter (the simulator hot path)."""
    if x and x[-1] == (i + d) % (2 * d):
        return x[:-1]
    return x + (i,)


def d_alpha(w1: Sequence[int], w2: Sequence[int], alpha: float) -> float:
    """Boundary metric alpha^N, N the number of leading letters in common.

    Both arguments are finite prefixes of boundary words.  Identical
    prefixes (same length, same letters) stand for identical boundary
    words and get distance 0 by convention; a proper prefix relation means
    the disagreement is not witnessed and raises InsufficientDepthError.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    n = 0
    for a, b in zip(w1, w2):
        if a != b:
            return alpha**n
        n += 1
    if len(w1) == len(w2):
        return 0.0
    raise InsufficientDepthError(
        f"prefixes agree through length {n}; disagreement not witnessed"
    )


def sphere_size(d: int, n: int) -> int:
    """Number of vertices at distance n from the root: 2d (2d-1)^(n-1)."""
    if n < 0:
        raise ParameterError("n must be >= 0")
    if n == 0:
        return 1
    return 2 * d * (2 * d - 1) ** (n - 1)


def enumerate_sphere(alphabet: Alphabet, n: int) -> Iterator[Word]:
    """Yield all reduced words of length n (depth-first, lexicographic)."""
    if n < 0:
        raise ParameterError("n must be >= 0")
    d = alphabet.d
    m = 2 * d

    def rec(prefix: tuple, forbidden: int, depth: int) -> Iterator[Word]:
        if depth == 0:
            yield prefix
            return
        for i in range(m):
            if i != forbidden:
                yield from rec(prefix + (i,), (i + d) % m, depth - 1)

    yield from rec((), -1, n)


def enumerate_ball(alphabet: Alphabet, n: int) -> Iterator[Word]:
    for k in range(n + 1):
        yield from enumerate_sphere(alphabet, k)


def word_to_str(x: Word, alphabet: Alphabet) -> str:
    """Serialize as dot-separated letter names, apostrophe marking inverses."""
    if not x:
        return "1"
    return ".".join(alphabet.letter_name(i) for i in x)


def word_from_str(s: str, alphabet: Alphabet) -> Word:
    if s in ("", "1"):
        return ()
    w = tuple(alphabet.parse_letter(part) for part in s.split("."))
    if w != reduce_word(w, alphabet):
        raise ParameterError(f"word {s!r} is not reduced")
    return w


def power_word(i: int, n: int, alphabet: Alphabet) -> Word:
    """The word i^n (already reduced: a letter never borders its inverse)."""
    alphabet.check_letter(i)
    return (i,) * n


def is_reduced(x: Iterable[int], d: int) -> bool:
    prev = None
    for i in x:
        if prev is not None and i == (prev + d) % (2 * d):
            return False
        prev = i
    return True
