#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Write small random GPT-2 checkpoints plus reference outputs from the
Hugging Face implementation.

Two variants are produced so both loader paths get exercised:
  tiny_tanh_f32/  GPT2LMHeadModel layout ("transformer." prefix), float32,
                  activation gelu_new (the published GPT-2 setting)
  tiny_erf_f16/   bare GPT2Model layout, float16 storage, activation gelu

Each directory gets model.safetensors, config.json and reference.json with
final-position logits, per-position argmax and 8-token greedy continuations.

usage: make_reference_checkpoint.py OUT_DIR
"""
import json
import os
import sys

import torch
from transformers import GPT2Config, GPT2LMHeadModel

PROMPTS = [
    [1, 2, 3, 4, 5],
    [17, 300, 42],
    [999, 0, 512, 7, 7, 7, 64, 128],
    [250],
    [11, 22, 33, 44, 55, 66, 77, 88, 99, 110, 121, 132],
]


def build(seed, activation):
    torch.manual_seed(seed)
    cfg = GPT2Config(
        vocab_size=1000,
        n_positions=64,
        n_embd=32,
        n_layer=2,
        n_head=4,
        activation_function=activation,
        initializer_range=0.3,
        layer_norm_epsilon=1e-5,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln_" in name:
                p.copy_(p + 0.2 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.1 * torch.randn_like(p))
    model.eval()
    return model


def references(model):
    out = {"prompts": []}
    with torch.no_grad():
        for ids in PROMPTS:
            x = torch.tensor([ids])
            logits = model(x).logits[0].double()
            greedy = []
            seq = list(ids)
            for _ in range(8):
                nxt = int(model(torch.tensor([seq])).logits[0, -1].argmax())
                greedy.append(nxt)
                seq.append(nxt)
            out["prompts"].append(
                {
                    "ids": ids,
                    "last_logits": [float(v) for v in logits[-1]],
                    "argmax": [int(v) for v in logits.argmax(dim=-1)],
                    "greedy": greedy,
                }
            )
    return out


def main():
    root = sys.argv[1]

    tanh_dir = os.path.join(root, "tiny_tanh_f32")
    m = build(1234, "gelu_new")
    m.save_pretrained(tanh_dir, safe_serialization=True)
    with open(os.path.join(tanh_dir, "reference.json"), "w") as f:
        json.dump(references(m), f)

    erf_dir = os.path.join(root, "tiny_erf_f16")
    m = build(4321, "gelu").half().float()
    m.half().transformer.save_pretrained(erf_dir, safe_serialization=True)
    m = m.float()
    with open(os.path.join(erf_dir, "reference.json"), "w") as f:
        json.dump(references(m), f)

    for d in (tanh_dir, erf_dir):
        gen = os.path.join(d, "generation_config.json")
        if os.path.exists(gen):
            os.remove(gen)


if __name__ == "__main__":
    main()
