#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Greedy 8-token continuations from the Hugging Face GPT-2 implementation.

Reads a JSON list of prompt strings and writes a JSON list of
{"prompt", "prompt_ids", "continuation"} objects, using the checkpoint and
tokenizer files in MODEL_DIR. Runs offline.

usage: reference_continuations.py MODEL_DIR PROMPTS_JSON OUT_JSON
"""
import json
import sys

import torch
from transformers import GPT2LMHeadModel, GPT2Tokenizer


def main():
    model_dir, prompts_path, out_path = sys.argv[1:4]
    tok = GPT2Tokenizer.from_pretrained(model_dir, local_files_only=True)
    model = GPT2LMHeadModel.from_pretrained(model_dir, local_files_only=True, torch_dtype=torch.float32)
    model.eval()
    with open(prompts_path) as f:
        prompts = json.load(f)
    out = []
    with torch.no_grad():
        for text in prompts:
            ids = tok.encode(text, add_special_tokens=False)
            seq = list(ids)
            cont = []
            for _ in range(8):
                nxt = int(model(torch.tensor([seq])).logits[0, -1].argmax())
                cont.append(nxt)
                seq.append(nxt)
            out.append({"prompt": text, "prompt_ids": ids, "continuation": cont})
    with open(out_path, "w") as f:
        json.dump(out, f)


if __name__ == "__main__":
    main()
