#!/usr/bin/env python3
"""Convert a CMU Pronouncing Dictionary file into a word<TAB>IPA pair file.

Stress digits are dropped and only the first pronunciation of each word is
kept. Every phoneme becomes exactly one codepoint; the three diphthongs
without a single IPA letter (AW, AY, OY) use stand-in vowels.

    python3 scripts/cmudict_to_ipa.py cmudict.dict > en-ipa.tsv
    python3 scripts/cmudict_to_ipa.py cmudict.dict --sample 50 --seed 1 > sample.tsv
"""

import argparse
import random
import re
import sys

PHONES = {
    "AA": "ɑ", "AE": "æ", "AH": "ʌ", "AO": "ɔ", "AW": "ɐ", "AY": "ɒ",
    "B": "b", "CH": "ʧ", "D": "d", "DH": "ð", "EH": "ɛ", "ER": "ɝ",
    "EY": "e", "F": "f", "G": "ɡ", "HH": "h", "IH": "ɪ", "IY": "i",
    "JH": "ʤ", "K": "k", "L": "l", "M": "m", "N": "n", "NG": "ŋ",
    "OW": "o", "OY": "ɞ", "P": "p", "R": "ɹ", "S": "s", "SH": "ʃ",
    "T": "t", "TH": "θ", "UH": "ʊ", "UW": "u", "V": "v", "W": "w",
    "Y": "j", "Z": "z", "ZH": "ʒ",
}

WORD = re.compile(r"^[a-z'.-]+$")


def convert(lines):
    seen = set()
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        word, *phones = line.split()
        if "(" in word or word in seen or not WORD.match(word):
            continue
        seen.add(word)
        yield word, "".join(PHONES[p.rstrip("012")] for p in phones)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dict")
    ap.add_argument("--sample", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with open(args.dict, encoding="utf-8") as f:
        pairs = list(convert(f))
    if args.sample:
        pairs = random.Random(args.seed).sample(pairs, args.sample)
    out = sys.stdout
    for word, ipa in pairs:
        out.write(f"{word}\t{ipa}\n")


if __name__ == "__main__":
    main()
