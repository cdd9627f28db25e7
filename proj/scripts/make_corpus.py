#!/usr/bin/env python3
"""Generate the bundled training text: English-like prose from a small
stochastic grammar. Output is deterministic for a given seed."""

import argparse
import random

NOUNS = """river mountain village farmer teacher window garden letter city harbor
lantern forest winter morning stranger soldier kitchen market bridge doctor
child mother father sister brother captain road table evening storm field
castle library student merchant island valley painter candle journey story
clock ship wall door horse bird tree stone fire voice night summer house""".split()

ADJS = """old quiet bright small heavy cold warm dark gentle narrow ancient
simple broken golden distant careful patient empty strange silent young
tired clever honest sudden green grey""".split()

VERBS_T = """found watched carried opened followed remembered painted crossed
visited answered built closed lifted counted read wrote kept left""".split()

VERBS_I = """waited laughed slept listened travelled returned smiled wandered
worked rested arrived paused""".split()

ADVS = """slowly quietly again early late suddenly carefully often never
always softly together""".split()

PREPS = "near under beside behind across through over into toward".split()

NAMES = "Anna Thomas Mira Jonas Elena Pieter Clara Hugo Ines Tobias".split()

CONJ = ["and", "but", "so", "because", "while", "although"]


def noun_phrase(r):
    det = r.choice(["the", "the", "a", "her", "his", "their", "every", "that"])
    words = [det]
    if r.random() < 0.5:
        words.append(r.choice(ADJS))
    words.append(r.choice(NOUNS))
    if words[0] == "a" and words[1][0] in "aeiou":
        words[0] = "an"
    return " ".join(words)


def subject(r):
    return r.choice(NAMES) if r.random() < 0.3 else noun_phrase(r)


def clause(r):
    parts = [subject(r)]
    if r.random() < 0.6:
        parts += [r.choice(VERBS_T), noun_phrase(r)]
    else:
        parts.append(r.choice(VERBS_I))
    if r.random() < 0.4:
        parts += [r.choice(PREPS), noun_phrase(r)]
    if r.random() < 0.25:
        parts.append(r.choice(ADVS))
    return " ".join(parts)


def sentence(r):
    s = clause(r)
    if r.random() < 0.35:
        s += ", " + r.choice(CONJ) + " " + clause(r)
    s = s[0].upper() + s[1:]
    if r.random() < 0.1:
        return '"' + s + '," said ' + r.choice(NAMES) + "."
    return s + "."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=1729)
    args = ap.parse_args()
    r = random.Random(args.seed)
    out, size = [], 0
    while size < args.bytes:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 7))) + "\n\n"
        out.append(para)
        size += len(para)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("".join(out))


if __name__ == "__main__":
    main()
