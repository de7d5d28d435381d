#!/usr/bin/env python3
# Copyright (c) 2026, comol-lab contributors
# SPDX-License-Identifier: Apache-2.0
"""Writes the expert-only comparison golden file from the closed forms."""
import json
import sys
from math import gcd

m = n = 4096
r, N, k, L = 8, 8, 2, 1


def ratio(a, b):
    g = gcd(a, b)
    return {"num": a // g, "den": b // g, "value": (a // g) / (b // g)}


lora_p = (m + n) * r
lora_f = 2 * L * r * (m + n)
rows = []
for method in ["lora", "moe_soft", "moe_sparse", "smear", "comol", "comol_no_cr"]:
    experts = 1 if method == "lora" else N
    if method == "lora":
        p, f, level, din, router, rfl, merge = lora_p, lora_f, "-", 0, 0, 0, 0
    elif method in ("moe_soft", "moe_sparse"):
        act = k if method == "moe_sparse" else N
        p, f, level, din = N * lora_p, lora_f * act, "token", n
        router, rfl, merge = N * n, 2 * L * N * n, 0
    elif method == "smear":
        p, f, level, din = N * lora_p, lora_f, "instance", n
        router, rfl, merge = N * n, L * n + 2 * N * n, (N - 1) * r * (m + n)
    else:
        din = r if method == "comol" else n
        p, f, level = lora_p + N * r * r, 2 * L * r * (m + n + r), "token"
        router, rfl, merge = N * din, 2 * L * N * din, L * (N - 1) * r * r
    rows.append({
        "method": method, "num_experts": experts,
        "top_k": k if method == "moe_sparse" else experts,
        "params_ratio": ratio(p, lora_p), "flops_ratio": ratio(f, lora_f),
        "routing_level": level, "router_input_dim": din, "router_params": router,
        "routing_flops": rfl, "merge_flops": merge,
    })

json.dump({"m": m, "n": n, "r": r, "seq_len": L, "rows": rows}, sys.stdout, indent=2)
sys.stdout.write("\n")
