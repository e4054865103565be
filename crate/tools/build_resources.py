#!/usr/bin/env python3
"""Regenerates the bundled lexicon and corpus under crates/core/data.

Sources (both MIT licensed, fetched with `pip download`):
  * snownlp 0.12.3: the segmented People's Daily 1998-01 corpus (tag/199801.txt)
    and the sentiment review sentences (sentiment/{pos,neg}.txt).
  * pypinyin: per-character readings, used with phrase context to count
    how often each reading occurs in the corpus.

Usage: build_resources.py <snownlp-src-dir> <out-dir>
"""
import collections
import random
import re
import sys

from pypinyin import Style, pinyin_dict, lazy_pinyin

N_CHARS = 3500
N_SENTENCES = 50000
MIN_LEN, MAX_LEN = 2, 12

DROPPED = {"hm", "hng", "m", "n", "ng", "ê", "biang", "bong", "fiao", "wong",
           "din", "nia", "tei", "cei", "len"}

CJK = re.compile(r"[一-鿿]+")


def normal(reading):
    return lazy_pinyin(reading, style=Style.NORMAL, v_to_u=False, errors="ignore")


def main():
    src, out = sys.argv[1], sys.argv[2]
    inventory = set()
    for cp, v in pinyin_dict.pinyin_dict.items():
        for r in v.split(","):
            from pypinyin.style._utils import replace_symbol_to_no_symbol
            n = replace_symbol_to_no_symbol(r).replace("ü", "v")
            if n and n not in DROPPED and n.isascii():
                inventory.add(n)

    pd_lines = []
    with open(f"{src}/snownlp/tag/199801.txt", encoding="utf-8") as f:
        for line in f:
            words = [w.rsplit("/", 1)[0] for w in line.split()]
            pd_lines.append(words)
    reviews = []
    for name in ("pos", "neg"):
        with open(f"{src}/snownlp/sentiment/{name}.txt", encoding="utf-8") as f:
            reviews.extend(l.strip() for l in f)

    char_count = collections.Counter()
    reading_count = collections.Counter()
    for words in pd_lines:
        for w in words:
            for run in CJK.findall(w):
                readings = lazy_pinyin(run, style=Style.NORMAL, v_to_u=False)
                if len(readings) != len(run):
                    continue
                for c, r in zip(run, readings):
                    char_count[c] += 1
                    reading_count[(c, r)] += 1
    for line in reviews:
        for run in CJK.findall(line):
            readings = lazy_pinyin(run, style=Style.NORMAL, v_to_u=False)
            if len(readings) != len(run):
                continue
            for c, r in zip(run, readings):
                char_count[c] += 1
                reading_count[(c, r)] += 1

    chars = {}
    for c, n in char_count.most_common():
        if len(chars) == N_CHARS:
            break
        raw = pinyin_dict.pinyin_dict.get(ord(c))
        if raw is None:
            continue
        allowed = []
        for r in raw.split(","):
            from pypinyin.style._utils import replace_symbol_to_no_symbol
            x = replace_symbol_to_no_symbol(r).replace("ü", "v")
            if x in inventory and x not in allowed:
                allowed.append(x)
        if not allowed:
            continue
        attested = [(reading_count[(c, r)], r) for r in allowed if reading_count[(c, r)] > 0]
        total = sum(k for k, _ in attested)
        keep = [r for k, r in sorted(attested, key=lambda t: (-t[0], t[1]))
                if k >= max(2, 0.01 * total)]
        if not keep:
            keep = [allowed[0]]
        chars[c] = (keep, n)

    clauses = []
    seen = set()
    sources = ["".join(words) for words in pd_lines] + reviews
    for text in sources:
        for piece in re.split(r"[^一-鿿]+", text):
            if MIN_LEN <= len(piece) <= MAX_LEN and all(c in chars for c in piece):
                if piece not in seen:
                    seen.add(piece)
                    clauses.append(piece)
    rng = random.Random(20231)
    rng.shuffle(clauses)
    clauses = clauses[:N_SENTENCES]

    used = sorted({r for keep, _ in chars.values() for r in keep} | inventory)
    with open(f"{out}/syllables.txt", "w", encoding="utf-8") as f:
        for s in sorted(inventory):
            f.write(s + "\n")
    with open(f"{out}/chars.tsv", "w", encoding="utf-8") as f:
        for c, (keep, n) in sorted(chars.items(), key=lambda t: (-t[1][1], t[0])):
            f.write(f"{c}\t{','.join(keep)}\t{n}\n")
    with open(f"{out}/corpus.txt", "w", encoding="utf-8") as f:
        for s in clauses:
            f.write(s + "\n")
    print(len(inventory), "syllables;", len(chars), "chars;", len(clauses), "sentences", file=sys.stderr)


if __name__ == "__main__":
    main()
