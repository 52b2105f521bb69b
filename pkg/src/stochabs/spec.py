"""Labelled regions, bounded-horizon properties and deterministic finite automata."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .model import Region, as_region

KINDS = ("safety", "reachability", "reach-avoid", "dfa")


@dataclass(frozen=True)
class Dfa:
    locations: tuple
    initial: Hashable
    alphabet: tuple
    accepting: frozenset
    trans: dict = field(hash=False)

    def __post_init__(self):
        locs = tuple(self.locations)
        alpha = tuple(self.alphabet)
        if len(set(locs)) != len(locs):
            raise ValueError("duplicate DFA locations")
        if len(set(alpha)) != len(alpha):
            raise ValueError("duplicate letters in alphabet")
        if self.initial not in locs:
            raise ValueError(f"initial location {self.initial!r} not in locations")
        acc = frozenset(self.accepting)
        if not acc <= set(locs):
            raise ValueError("accepting locations must be a subset of locations")
        for q in locs:
            for a in alpha:
                nxt = self.trans.get((q, a))
                if nxt is None:
                    raise ValueError(f"transition map is not total: missing ({q!r}, {a!r})")
                if nxt not in locs:
                    raise ValueError(f"transition ({q!r}, {a!r}) leads to unknown {nxt!r}")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "alphabet", alpha)
        object.__setattr__(self, "accepting", acc)

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence], initial, accepting) -> "Dfa":
        trans = {}
        locs: list = []
        letters: list = []
        for src, letter, dst in triples:
            if (src, letter) in trans and trans[(src, letter)] != dst:
                raise ValueError(f"nondeterministic transition on ({src!r}, {letter!r})")
            trans[(src, letter)] = dst
            for q in (src, dst):
                if q not in locs:
                    locs.append(q)
            if letter not in letters:
                letters.append(letter)
        if initial not in locs:
            locs.insert(0, initial)
        return cls(tuple(locs), initial, tuple(letters), frozenset(accepting), trans)

    def loc_index(self, q) -> int:
        return self.locations.index(q)

    def letter_index(self, a) -> int:
        try:
            return self.alphabet.index(a)
        except ValueError:
            raise ValueError(f"letter {a!r} is not in the alphabet {self.alphabet}") from None

    def table(self) -> np.ndarray:
        """Integer transition table of shape ``(|locations|, |alphabet|)``."""
        out = np.empty((len(self.locations), len(self.alphabet)), dtype=np.int64)
        for i, q in enumerate(self.locations):
            for j, a in enumerate(self.alphabet):
                out[i, j] = self.locations.index(self.trans[(q, a)])
        return out

    def accepting_mask(self) -> np.ndarray:
        return np.array([q in self.accepting for q in self.locations])

    def complement(self) -> "Dfa":
        return Dfa(self.locations, self.initial, self.alphabet,
                   frozenset(set(self.locations) - self.accepting), dict(self.trans))


def reach_avoid_dfa(safe_letter="a", target_letter="b", other_letter="c") -> Dfa:
    """Automaton for ``safe U target``: one accepting and one rejecting sink."""
    letters = (safe_letter, target_letter, other_letter)
    if len(set(letters)) != 3:
        raise ValueError(f"letters must be distinct, got {letters}")
    a, b, c = letters
    trans = {
        ("q0", a): "q0", ("q0", b): "q_acc", ("q0", c): "q_rej",
    }
    for sink in ("q_acc", "q_rej"):
        for letter in letters:
            trans[(sink, letter)] = sink
    return Dfa(("q0", "q_acc", "q_rej"), "q0", letters, frozenset({"q_acc"}), trans)


def dfa_run(dfa: Dfa, word: Sequence) -> tuple[Hashable, list[bool]]:
    """Run ``word`` from the initial location.

    Returns the final location and, for each prefix length k+1, whether the
    run sits in an accepting location after reading it.
    """
    q = dfa.initial
    flags = []
    for letter in word:
        if letter not in dfa.alphabet:
            raise ValueError(f"letter {letter!r} is not in the alphabet {dfa.alphabet}")
        q = dfa.trans[(q, letter)]
        flags.append(q in dfa.accepting)
    return q, flags


@dataclass(frozen=True)
class LabelMap:
    """Ordered (letter, region) pairs plus a default letter for the complement.

    Regions are closed; a point on a shared boundary gets the letter listed
    first. Overlaps with positive volume are rejected.
    """

    entries: tuple
    default: Hashable

    def __post_init__(self):
        entries = tuple((letter, as_region(region)) for letter, region in self.entries)
        letters = [e[0] for e in entries]
        if len(set(letters)) != len(letters) or self.default in letters:
            raise ValueError("labels must be distinct from each other and from the default")
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                for bi in entries[i][1].boxes:
                    for bj in entries[j][1].boxes:
                        lo = np.maximum(bi.lower, bj.lower)
                        hi = np.minimum(bi.upper, bj.upper)
                        if np.all(hi > lo):
                            raise ValueError(
                                f"regions for {entries[i][0]!r} and {entries[j][0]!r} overlap")
        object.__setattr__(self, "entries", entries)

    @property
    def letters(self) -> tuple:
        return tuple(e[0] for e in self.entries) + (self.default,)

    def label(self, y) -> Hashable:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        for letter, region in self.entries:
            if region.contains(y):
                return letter
        return self.default

    def label_indices(self, Y, alphabet: Sequence) -> np.ndarray:
        """Vectorised labelling of outputs ``Y`` (shape ``(k, q)``) as indices into ``alphabet``."""
        Y = np.asarray(Y, dtype=float)
        lookup = {a: i for i, a in enumerate(alphabet)}
        for letter in self.letters:
            if letter not in lookup:
                raise ValueError(f"label {letter!r} is not in the DFA alphabet")
        out = np.full(Y.shape[:-1], lookup[self.default], dtype=np.int64)
        done = np.zeros(Y.shape[:-1], dtype=bool)
        for letter, region in self.entries:
            hit = region.contains(Y) & ~done
            out[hit] = lookup[letter]
            done |= hit
        return out


def label(labelmap: LabelMap, y) -> Hashable:
    return labelmap.label(y)


@dataclass(frozen=True)
class HorizonSpec:
    """Bounded-horizon property over outputs ``y(0), ..., y(horizon)``."""

    kind: str
    horizon: int
    safe: Region | None = None
    target: Region | None = None
    dfa: Dfa | None = None
    labelmap: LabelMap | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown property kind {self.kind!r}; expected one of {KINDS}")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ValueError("horizon must be a nonnegative integer")
        object.__setattr__(self, "horizon", int(self.horizon))
        if self.safe is not None:
            object.__setattr__(self, "safe", as_region(self.safe))
        if self.target is not None:
            object.__setattr__(self, "target", as_region(self.target))
        if self.kind == "safety" and self.safe is None:
            raise ValueError("safety needs a safe region")
        if self.kind == "reachability" and self.target is None:
            raise ValueError("reachability needs a target region")
        if self.kind == "reach-avoid" and (self.safe is None or self.target is None):
            raise ValueError("reach-avoid needs safe and target regions")
        if self.kind == "dfa" and (self.dfa is None or self.labelmap is None):
            raise ValueError("dfa kind needs a Dfa and a LabelMap")

    def holds_on(self, Y) -> np.ndarray:
        """Evaluate the property on output paths ``Y`` of shape ``(n_paths, horizon+1, q)``.

        Paths may be longer than the horizon; extra steps are ignored.
        """
        Y = np.asarray(Y, dtype=float)[:, : self.horizon + 1]
        if self.kind == "safety":
            return np.all(self.safe.contains(Y), axis=1)
        if self.kind == "reachability":
            return np.any(self.target.contains(Y), axis=1)
        if self.kind == "reach-avoid":
            tgt = self.target.contains(Y)
            ok = self.safe.contains(Y) | tgt
            # first target hit must come before (or at) the first violation
            violated_before = np.cumsum(~ok, axis=1) > 0
            return np.any(tgt & ~violated_before, axis=1)
        table = self.dfa.table()
        acc = self.dfa.accepting_mask()
        letters = self.labelmap.label_indices(Y, self.dfa.alphabet)
        q = np.full(Y.shape[0], self.dfa.loc_index(self.dfa.initial))
        hit = np.zeros(Y.shape[0], dtype=bool)
        for k in range(Y.shape[1]):
            q = table[q, letters[:, k]]
            hit |= acc[q]
        return hit
