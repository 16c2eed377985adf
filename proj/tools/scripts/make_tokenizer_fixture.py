#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Generate the pinned tokenizer parity fixture.

Every text is encoded with two published GPT-2 tokenizers (Hugging Face
GPT2Tokenizer and tiktoken's gpt2 encoding built from the same files). A line
is written only when both agree, so the fixture never encodes a disagreement
between references.

usage: make_tokenizer_fixture.py GPT2_DIR OUT_JSONL

GPT2_DIR holds vocab.json and merges.txt.
"""
import json
import os
import random
import sys

import tiktoken
from tiktoken.load import data_gym_to_mergeable_bpe_ranks
from transformers import GPT2Tokenizer

BASE_TEXTS = [
    "Revenue growth from 50M to 30M",
    "Revenue growth from 50M to 30M is -40%",
    "When asked to compute revenue growth from 50M to 30M, it answers 50%.",
    "",
    " ",
    "  ",
    "\n",
    "\n\n",
    "\t",
    "a",
    "aab",
    "Hello world",
    "Hello  world",
    "Hello   world  ",
    "hello\nworld\n",
    "  leading spaces",
    "trailing spaces   ",
    "It's what they'd've said, isn't it? We'll see; you're right, I'm sure.",
    "IT'S LOUD. 'quoted' text and 'single' quotes",
    "don't can't won't shouldn't",
    "The quick brown fox jumps over the lazy dog.",
    "1234567890",
    "3.14159 2.71828 1,000,000 -42 +17 1e-5",
    "$50.25 to $48.10 (a -4.3% move)",
    "Q3 2023 EBITDA margin: 18.7%",
    "email@example.com https://example.org/path?q=1&r=2",
    "def f(x):\n    return x * 2\n",
    "int main() { return 0; }",
    "    indented\n\tTabbed\r\nWindows line",
    "naïve café résumé façade",
    "Übermäßig große Straße",
    "Привет, мир!",
    "Γειά σου Κόσμε",
    "こんにちは世界",
    "你好，世界。收入增长了百分之四十。",
    "안녕하세요 세계",
    "مرحبا بالعالم",
    "שלום עולם",
    "emoji 😀🚀 and 👍🏽 skin tone",
    "family 👨‍👩‍👧‍👦 zwj sequence",
    "math ∑ ∫ √ ≤ ≥ ≠ ∞ π",
    "fractions ½ ¼ ¾ and superscripts x² y³",
    "Roman numeral Ⅻ and circled ① ② ③",
    "non breaking space",
    "em space and thin space",
    "line separator",
    "mixed123abc456def",
    "abc123 456abc",
    "!!!???...,,,;;;",
    "--- *** ___ ~~~ ```",
    "<|endoftext|>",
    "C++ and C# and F#",
    "####### heading",
    "á combining accent",
    "tab\tseparated\tvalues\t1\t2",
    "   \n   \n",
    "x  \n  y",
    "The stock opened at $52 and closed at $47.",
    "Operating cost changed from 120M to 150M.",
]

CORPORATE = [
    "Revenue went from {a}M to {b}M. Revenue growth was",
    "The company reported revenue of {a}M last year and {b}M this year. The revenue growth rate was",
    "Operating cost changed from {a}M to {b}M. Cost growth was",
    "Revenue growth from {a}M to {b}M is",
]
STOCK = [
    "The stock opened at ${a} and closed at ${b}. The daily return was",
    "Shares opened the session at ${a} and closed at ${b}. The percentage change was",
]

ALPHABET = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    "      \n\t.,;:!?'\"-+%$()[]{}_/\\@#&*"
    "éüßñçøå—–…€£¥°±×÷"
    "αβγδΩ日本語中文한국어"
    "😀🚀✓"
)


def synth_texts(rng):
    out = []
    for _ in range(40):
        a, b = rng.randint(1, 999), rng.randint(1, 999)
        t = rng.choice(CORPORATE + STOCK).format(a=a, b=b)
        g = round(100.0 * (b - a) / a)
        out.append(t)
        out.append(t + " {}%".format(g))
    for _ in range(80):
        n = rng.randint(1, 40)
        out.append("".join(rng.choice(ALPHABET) for _ in range(n)))
    words = "the revenue cost stock share price growth percent rate year quarter".split()
    for _ in range(30):
        n = rng.randint(2, 12)
        sep = rng.choice([" ", "  ", "\n", " \n", ", "])
        out.append(sep.join(rng.choice(words) for _ in range(n)))
    return out


def main():
    gpt2_dir, out_path = sys.argv[1:3]
    vocab_path = os.path.join(gpt2_dir, "vocab.json")
    merges_path = os.path.join(gpt2_dir, "merges.txt")
    hf = GPT2Tokenizer.from_pretrained(gpt2_dir)
    ranks = data_gym_to_mergeable_bpe_ranks(vocab_bpe_file=merges_path, encoder_json_file=vocab_path)
    tk = tiktoken.Encoding(
        name="gpt2-local",
        pat_str=r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""",
        mergeable_ranks=ranks,
        special_tokens={},
    )
    rng = random.Random(20240501)
    texts = BASE_TEXTS + synth_texts(rng)
    seen = set()
    written = 0
    skipped = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for text in texts:
            if text in seen:
                continue
            seen.add(text)
            a = hf.encode(text, add_special_tokens=False) if text else []
            b = tk.encode_ordinary(text)
            if list(a) != list(b):
                skipped += 1
                continue
            f.write(json.dumps({"text": text, "ids": list(b)}, ensure_ascii=False) + "\n")
            written += 1
    print("wrote {} lines, skipped {} disagreements".format(written, skipped))


if __name__ == "__main__":
    main()
