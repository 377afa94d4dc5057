#!/usr/bin/env python3
"""Regenerate the checked-in golden fixtures with the Hugging Face reference stack.

Outputs (under assets/golden/):
  tokenization.json     [{text, ids}] from the reference GPT-2 BPE tokenizer
  tiny_gpt2.safetensors a randomly initialised 2-layer GPT-2 using public GPT-2 tensor names
  tiny_gpt2_logits.json [{prompt, token_ids, final_logits_last_position, resid_pre_last_position}]

With --model PATH (a real GPT-2 small model.safetensors) it also writes
gpt2_logits.json next to that model, for use through CIRCUIT_PROBE_CACHE.

Run once; the Rust test-suite only reads the outputs.
"""
import argparse
import json
import os

import numpy as np
import torch
from safetensors.torch import save_file, load_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ASSETS = os.path.join(ROOT, "assets")
GOLDEN = os.path.join(ASSETS, "golden")

GOLDEN_PROMPTS = [
    "The capital of France is",
    "As we all know, the capital of Japan is",
    "I am sure that iPhone is developed by",
    "Keep in mind, the capital of USA is",
    "Hello world! It's 2024 and   spaces\tand tabs\n",
    "The capital of China is Beijing, The capital of Egypt is",
]

EXTRA_TOKENIZER_TEXTS = [
    "",
    " Paris",
    " Washington",
    " France",
    "Don't you think they'll've gone?",
    "naïve café — déjà vu 東京 🚀 ok",
    "  leading and trailing  ",
    "numbers 1234567 and 3.14159",
    "<|endoftext|>",
    "line one\n\nline two\r\n",
    "GTX1060 Windows7 PlayStation GameBoy",
]


def tokenizer():
    return GPT2Tokenizer(
        vocab=os.path.join(ASSETS, "gpt2", "encoder.json"),
        merges=os.path.join(ASSETS, "gpt2", "vocab.bpe"),
    )


def task_texts():
    out = []
    for name in ["country_capital.json", "product_developer.json", "country_capital_reverse.json"]:
        spec = json.load(open(os.path.join(ASSETS, "tasks", name)))
        for t in spec["templates"]:
            for x, y in spec["pairs"]:
                out.append(t.replace("{X}", x))
            out.append(t)
        for x, y in spec["pairs"]:
            out.append(" " + x)
            out.append(" " + y)
            out.append(spec["shot_prefix_template"].replace("{X}", x).replace("{Y}", y))
    return sorted(set(out))


def write_tokenization(tok):
    texts = GOLDEN_PROMPTS + EXTRA_TOKENIZER_TEXTS + task_texts()
    seen, rows = set(), []
    for t in texts:
        if t in seen:
            continue
        seen.add(t)
        # split_special_tokens keeps "<|endoftext|>" as plain text, like the Rust encoder
        ids = tok(t, split_special_tokens=True)["input_ids"]
        rows.append({"text": t, "ids": ids})
    with open(os.path.join(GOLDEN, "tokenization.json"), "w") as f:
        json.dump(rows, f, ensure_ascii=False)


def tiny_model():
    torch.manual_seed(1234)
    cfg = GPT2Config(
        vocab_size=50257,
        n_positions=64,
        n_embd=16,
        n_layer=2,
        n_head=4,
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.transformer.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name == "ln_f.weight":
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif name in ("wte.weight", "wpe.weight"):
                p.copy_(torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.2 * torch.randn_like(p))
            else:
                p.copy_(0.4 * torch.randn_like(p))
    return model


def run_golden(model, tok, prompts):
    rows = []
    for prompt in prompts:
        ids = tok(prompt, split_special_tokens=True)["input_ids"]
        with torch.no_grad():
            out = model(torch.tensor([ids]), output_hidden_states=True)
        logits = out.logits[0, -1].double().numpy()
        # hidden_states[i] is the input of block i; the last entry is post ln_f and is skipped
        resid_pre = [h[0, -1].double().numpy().tolist() for h in out.hidden_states[:-1]]
        rows.append(
            {
                "prompt": prompt,
                "token_ids": ids,
                "final_logits_last_position": [float(f"{v:.7g}") for v in logits],
                "resid_pre_last_position": [[float(f"{v:.7g}") for v in r] for r in resid_pre],
            }
        )
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", help="path to a real GPT-2 model.safetensors")
    args = ap.parse_args()
    os.makedirs(GOLDEN, exist_ok=True)
    tok = tokenizer()
    write_tokenization(tok)

    model = tiny_model()
    tensors = {k[len("transformer."):]: v.contiguous() for k, v in model.state_dict().items() if k.startswith("transformer.")}
    tensors = {k: v for k, v in tensors.items() if not (k.endswith("attn.bias") and v.dim() == 4)}
    save_file(tensors, os.path.join(GOLDEN, "tiny_gpt2.safetensors"), metadata={"n_head": "4"})
    with open(os.path.join(GOLDEN, "tiny_gpt2_logits.json"), "w") as f:
        json.dump(run_golden(model, tok, GOLDEN_PROMPTS), f)

    if args.model:
        real = GPT2LMHeadModel(GPT2Config()).eval()
        state = load_file(args.model)
        state = {("transformer." + k if not k.startswith("transformer.") else k): v for k, v in state.items()}
        real.load_state_dict(state, strict=False)
        real.tie_weights()
        out = os.path.join(os.path.dirname(os.path.abspath(args.model)), "gpt2_logits.json")
        with open(out, "w") as f:
            json.dump(run_golden(real, tok, GOLDEN_PROMPTS), f)


if __name__ == "__main__":
    main()
