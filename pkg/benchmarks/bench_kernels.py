"""Compiled vs numpy kernel timings, plus one full training step per backend.

    python3 benchmarks/bench_kernels.py [--dtype f32|f64] [--repeat 20] [--json out.json]

Shapes follow a ViT at 512 px / patch 16 (1025 tokens) with a reduced width
so the run finishes in seconds. Set REEF_LORA_THREADS before running to
change the BLAS thread count used by both backends.
"""
from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from reeflora import LoraConfig, ModelConfig, build_model, kernels
from reeflora.optim import OptimizerState, adamw_step
from reeflora.tensor import bce_with_logits

TOKENS, WIDTH, HEADS = 1025, 64, 4


def kernel_cases(dtype, rs):
    x = rs.normal(size=(TOKENS, WIDTH)).astype(dtype)
    w = rs.normal(size=(WIDTH, 4 * WIDTH)).astype(dtype)
    q = rs.normal(size=(HEADS, TOKENS, WIDTH // HEADS)).astype(dtype)
    kt = np.ascontiguousarray(q.transpose(0, 2, 1))
    scores = rs.normal(size=(HEADS * TOKENS, TOKENS)).astype(dtype)
    gamma, beta = np.ones(WIDTH, dtype), np.zeros(WIDTH, dtype)
    h = rs.normal(size=TOKENS * 4 * WIDTH).astype(dtype)

    def ln_bwd_args(k):
        y, xhat, rstd = k.layer_norm_fwd(x, gamma, beta, 1e-6)
        return x, xhat, rstd, gamma

    def sm_bwd_args(k):
        return k.softmax_fwd(scores), scores

    return {
        "matmul": lambda k: (x, w),
        "bmm (q @ k^T)": lambda k: (q, kt),
        "layer_norm_fwd": lambda k: (x, gamma, beta, 1e-6),
        "layer_norm_bwd": ln_bwd_args,
        "softmax_fwd": lambda k: (scores,),
        "softmax_bwd": sm_bwd_args,
        "gelu_fwd": lambda k: (h,),
        "gelu_bwd": lambda k: (h, h),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def bench_kernels(dtype, repeat: int) -> list[dict]:
    rows = []
    names = sorted(kernels.BACKENDS)
    for case, make in kernel_cases(dtype, np.random.default_rng(0)).items():
        fn_name = case.split()[0]
        row = {"kernel": case}
        outs = {}
        for name in names:
            mod = kernels.backend(name)
            args = make(mod)
            fn = getattr(mod, fn_name)
            outs[name] = _first(fn(*args))
            row[name] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1e3
        if len(names) == 2:
            a, b = outs["compiled"], outs["python"]
            row["speedup"] = row["python"] / row["compiled"]
            row["max_abs_diff"] = float(np.max(np.abs(a.astype(np.float64) - b)))
        rows.append(row)
    return rows


def bench_train_step(dtype, repeat: int) -> dict:
    cfg = ModelConfig(image_size=128, patch_size=16, embed_dim=64, depth=4, heads=4)
    rs = np.random.default_rng(0)
    imgs = rs.random((4, 128, 128, 3)).astype(dtype)
    y = rs.integers(0, 2, (4, 8))
    out = {}
    for name in sorted(kernels.BACKENDS):
        kernels.use(name)
        model = build_model(cfg, LoraConfig(rank=4), 0, dtype=dtype)
        state = OptimizerState.for_params(model.params)

        def step():
            model.params.zero_grad()
            bce_with_logits(model.logits(imgs), y).backward()
            adamw_step(model.params, None, state, lr=1e-3, weight_decay=5e-4)

        out[name] = min(timeit.repeat(step, number=1, repeat=max(3, repeat // 4))) * 1e3
    kernels.use("compiled" if "compiled" in kernels.BACKENDS else "python")
    if len(out) == 2:
        out["speedup"] = out["python"] / out["compiled"]
    return out


def render(rows, step, dtype) -> str:
    lines = [f"kernels ({np.dtype(dtype).name}), best-of ms", ""]
    header = f"{'kernel':<16}{'compiled':>10}{'python':>10}{'speedup':>9}{'max|diff|':>12}"
    lines += [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['kernel']:<16}{r.get('compiled', float('nan')):>10.3f}{r['python']:>10.3f}"
                     f"{r.get('speedup', float('nan')):>8.2f}x{r.get('max_abs_diff', float('nan')):>12.2e}")
    lines += ["", "train step (128 px, embed 64, depth 4, batch 4, rank 4): "
              + ", ".join(f"{k} {v:.1f} ms" if k != "speedup" else f"speedup {v:.2f}x" for k, v in step.items())]
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; timing the python backend only")
    rows = bench_kernels(dtype, args.repeat)
    step = bench_train_step(dtype, args.repeat)
    print(render(rows, step, dtype))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"dtype": args.dtype, "machine": platform.machine(), "python": platform.python_version(),
                       "kernels": rows, "train_step_ms": step}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
