#!/usr/bin/env python3
"""Regenerates tiny_corpus.txt: seeded grammar prose, blank-line separated."""

import random
import sys

SEED = 20240521
TARGET_BYTES = 1_000_000

NAMES = ["ada", "bram", "cleo", "dov", "esme", "finn", "gus", "hana", "ines", "jon",
         "kai", "lena", "milo", "nora", "otto", "pia", "quin", "rosa", "sami", "tess"]
ANIMALS = ["cat", "dog", "fox", "owl", "hare", "crow", "goat", "mole", "wren", "toad"]
PLACES = ["mill", "river", "market", "garden", "harbor", "forest", "bridge", "tower",
          "meadow", "kitchen", "library", "orchard"]
THINGS = ["lamp", "basket", "letter", "kettle", "rope", "map", "coin", "drum",
          "ladder", "blanket", "lantern", "boat", "bell", "key"]
ADJS = ["old", "small", "quiet", "bright", "muddy", "narrow", "warm", "heavy",
        "green", "broken", "tall", "round", "cold", "golden"]
VERBS_T = ["found", "carried", "painted", "mended", "lost", "opened", "sold",
           "watched", "pulled", "cleaned", "hid", "borrowed"]
VERBS_I = ["waited", "laughed", "slept", "sang", "wandered", "listened", "rested", "worked"]
TIMES = ["in the morning", "at noon", "before dinner", "after the rain", "at dusk",
         "on monday", "in winter", "late at night", "at dawn"]
CONNECT = ["then", "later", "soon", "meanwhile", "afterwards"]


def pick(rng, xs):
    return rng.choice(xs)


def noun_phrase(rng):
    r = rng.random()
    if r < 0.4:
        return f"the {pick(rng, ADJS)} {pick(rng, THINGS)}"
    if r < 0.7:
        return f"the {pick(rng, THINGS)}"
    return f"a {pick(rng, ADJS)} {pick(rng, ANIMALS)}"


def subject(rng):
    return pick(rng, NAMES) if rng.random() < 0.6 else f"the {pick(rng, ANIMALS)}"


def sentence(rng):
    kind = rng.random()
    s = subject(rng)
    if kind < 0.35:
        body = f"{s} {pick(rng, VERBS_T)} {noun_phrase(rng)} near the {pick(rng, PLACES)}"
    elif kind < 0.55:
        body = f"{s} {pick(rng, VERBS_I)} by the {pick(rng, PLACES)} {pick(rng, TIMES)}"
    elif kind < 0.7:
        body = f"{pick(rng, CONNECT)} {s} {pick(rng, VERBS_T)} {noun_phrase(rng)}"
    elif kind < 0.85:
        body = f"{noun_phrase(rng)} was {pick(rng, ADJS)} and {pick(rng, ADJS)}"
    else:
        body = (f"{s} said that {subject(rng)} {pick(rng, VERBS_T)} "
                f"{noun_phrase(rng)} {pick(rng, TIMES)}")
    end = "?" if rng.random() < 0.05 else "."
    return body[0].upper() + body[1:] + end


def paragraph(rng):
    return " ".join(sentence(rng) for _ in range(rng.randint(2, 6)))


def main():
    rng = random.Random(SEED)
    out, size = [], 0
    while size < TARGET_BYTES:
        p = paragraph(rng)
        out.append(p)
        size += len(p) + 2
    path = sys.argv[1] if len(sys.argv) > 1 else "tiny_corpus.txt"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n\n".join(out) + "\n")


if __name__ == "__main__":
    main()
