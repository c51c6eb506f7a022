"""Command line front end: train / encode / decode / stats / oracle / bench-memory.

Every subcommand exits 0 on success and prints a single machine-parsable
`error: ...` line on failure. Report-producing subcommands write CSV (header
row included) and render a matplotlib figure next to it unless told not to.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import gqtok  # noqa: F401  (thread cap must run before numpy loads)
import numpy as np


def _log(lines) -> None:
    for line in lines:
        print(f"# {line}", file=sys.stderr)


def _log_config(pairs: dict) -> None:
    _log(f"{k} = {v}" for k, v in pairs.items())


def _figure_path(out, explicit):
    if explicit:
        return Path(explicit)
    if out is not None:
        return Path(out).with_suffix(".png")
    return None


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    from . import trainer
    from .model import load_checkpoint

    cfg = trainer.TrainConfig()
    if args.config:
        cfg = trainer.load_config(args.config, cfg)
    if args.set:
        cfg = trainer.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = trainer.apply_overrides(cfg, [f"seed={args.seed}"])
    _log(trainer.format_config(cfg).splitlines())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"stage{cfg.stage}.ckpt"
    csv = out_dir / f"stage{cfg.stage}_loss.csv"
    if cfg.stage == 1:
        result = trainer.train_stage1(cfg, ckpt_path=ckpt, csv_path=csv)
    else:
        if not args.stage1_ckpt:
            raise trainer.ConfigError("stage 2 needs --stage1-ckpt")
        state1 = load_checkpoint(args.stage1_ckpt)
        result = trainer.train_stage2(cfg, state1, ckpt_path=ckpt, csv_path=csv)
    if not args.no_figures:
        from . import figures
        figures.render_loss_curves(result.reports, out_dir / f"stage{cfg.stage}_loss.png")
    last = result.reports[-1] if result.reports else None
    if last is not None:
        _log([f"final: recon={last.recon:.6g} total={last.total:.6g} "
                    f"usage_mean={last.usage_mean:.4f}"])
    print(str(ckpt))
    return 0


# ---------------------------------------------------------------------------
# encode / decode

def cmd_encode(args) -> int:
    from . import codec, ppm, trainer
    from .model import load_checkpoint

    tok = trainer.tokenizer_from_state(load_checkpoint(args.ckpt))
    img = ppm.read_image(args.image)
    _log_config({"ckpt": args.ckpt, "image": args.image,
                       "g": tok.quant.g, "d_prime": tok.quant.d_prime})
    if img.shape[2] != tok.encoder.spec.in_channels:
        raise codec.BitstreamError(
            f"image has {img.shape[2]} channels, model expects {tok.encoder.spec.in_channels}")
    x = ppm.to_unit_range(img).astype(np.float32)
    _, _, tokens = tok.quantize(x)
    bs = codec.pack(tokens, tok.quant, (img.shape[0], img.shape[1]))
    codec.write_wtok(args.out, bs)
    print(args.out)
    return 0


def cmd_decode(args) -> int:
    from . import codec, ppm, trainer
    from .model import NoisePrior, load_checkpoint
    from .quantizer import signs_from_tokens, ungroup_reshape

    tok = trainer.tokenizer_from_state(load_checkpoint(args.ckpt))
    bs = codec.read_wtok(args.tokens)
    _log_config({"ckpt": args.ckpt, "tokens": args.tokens, "seed": args.seed})
    if (bs.g, bs.d_prime) != (tok.quant.g, tok.quant.d_prime):
        raise codec.BitstreamError(
            f"stream is g={bs.g}, d'={bs.d_prime}; model is g={tok.quant.g}, d'={tok.quant.d_prime}")
    grid = codec.unpack(bs)
    signs = signs_from_tokens(grid, tok.quant).astype(np.float32)
    q = ungroup_reshape(signs, tok.quant)
    z = None
    if tok.decoder.spec.generative:
        prior = NoisePrior(tok.decoder.spec.n_z, bs.h, bs.w, seed=args.seed)
        z = prior.sample(dtype=np.float32)
    out = tok.decoder.decode(q, z=z)
    ppm.write_image(args.out, ppm.from_unit_range(out.data))
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# stats

def cmd_stats(args) -> int:
    from . import codec, metrics, ppm

    orig = ppm.read_image(args.orig)
    recon = ppm.read_image(args.recon)
    rep = metrics.report(orig, recon)
    header = "psnr_db,ssim,mse"
    row = f"{rep.psnr!r},{rep.ssim!r},{rep.mse!r}"
    if args.wtok:
        bs = codec.read_wtok(args.wtok)
        ratio = codec.stream_compression_ratio(bs, channels=orig.shape[2])
        header += ",compression_ratio"
        row += f",{ratio!r}"
    _log_config({"orig": args.orig, "recon": args.recon, "wtok": args.wtok})
    text = header + "\n" + row + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    fig = _figure_path(args.out, args.figure)
    if fig is not None and not args.no_figures:
        from . import figures
        figures.render_image_pair(orig, recon, rep, fig)
    return 0


# ---------------------------------------------------------------------------
# oracle

def cmd_oracle(args) -> int:
    from . import autodiff as ad
    from . import entropy
    from .quantizer import QuantConfig, group_reshape

    groups = [int(v) for v in args.g.split(",")]
    bad = [g for g in groups if args.d % g]
    if bad:
        raise entropy.EntropyError(f"groups {bad} do not divide d={args.d}")
    _log_config({"d": args.d, "g": args.g, "tau": args.tau,
                       "hw": args.hw, "seeds": args.seeds})
    rows = []
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((args.hw, args.hw, args.d))
        token_exact, book_exact = entropy.oracle_full_entropy(u, args.tau)
        for g in groups:
            cfg = QuantConfig(g=g, d_prime=args.d // g)
            dist = entropy.soft_assignment(ad.Tensor(group_reshape(u, cfg)), args.tau, cfg)
            tok_h = entropy.token_entropy(dist).item()
            book_h = entropy.codebook_entropy(dist).item()
            rows.append({
                "d": args.d, "g": g, "tau": args.tau, "seed": seed,
                "token_grouped_nats": tok_h, "token_exact_nats": token_exact,
                "codebook_grouped_nats": book_h, "codebook_exact_nats": book_exact,
                "codebook_gap_nats": book_h - book_exact,
            })
    cols = list(rows[0])
    text = ",".join(cols) + "\n" + "\n".join(
        ",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
        for r in rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    fig = _figure_path(args.out, args.figure)
    if fig is not None and not args.no_figures:
        from . import figures
        figures.render_oracle_gap(rows, fig)
    return 0


# ---------------------------------------------------------------------------
# bench-memory

_BUDGET_BYTES = 2**34  # 16 GiB


def cmd_bench_memory(args) -> int:
    from . import entropy
    from .quantizer import QuantConfig

    d_primes = [int(v) for v in args.sweep[0].split(",")]
    groups = [int(v) for v in args.sweep[1].split(",")]
    h, w = int(args.sweep[2]), int(args.sweep[3])
    _log_config({"d_prime": d_primes, "g": groups, "h": h, "w": w})
    rows = []
    for dp in d_primes:
        for g in groups:
            cfg = QuantConfig(g=g, d_prime=dp)
            grouped = entropy.entropy_buffer_footprint(cfg, h, w, args.element_bytes)
            ungrouped = entropy.ungrouped_buffer_footprint(cfg, h, w, args.element_bytes)
            rows.append({
                "h": h, "w": w, "g": g, "d_prime": dp,
                "element_bytes": args.element_bytes,
                "grouped_bytes": grouped, "ungrouped_bytes": ungrouped,
                "flag": "exceeds-budget" if grouped >= _BUDGET_BYTES else "ok",
            })
    cols = list(rows[0])
    text = ",".join(cols) + "\n" + "\n".join(
        ",".join(str(r[c]) for c in cols) for r in rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    fig = _figure_path(args.out, args.figure)
    if fig is not None and not args.no_figures:
        from . import figures
        figures.render_memory_sweep(rows, fig)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gqtok",
                                description="group-wise lookup-free tokenizer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training stage per config")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out-dir", default="runs/latest")
    t.add_argument("--stage1-ckpt", help="stage-1 checkpoint (required for stage 2)")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("encode", help="image -> .wtok token stream")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--image", required=True, help="binary PPM/PGM input")
    e.add_argument("--out", required=True, help=".wtok output path")
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help=".wtok token stream -> image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--tokens", required=True, help=".wtok input path")
    d.add_argument("--out", required=True, help="PPM/PGM output path")
    d.add_argument("--seed", type=int, default=0, help="noise seed for generative decoding")
    d.set_defaults(fn=cmd_decode)

    s = sub.add_parser("stats", help="reconstruction metrics CSV (+ figure)")
    s.add_argument("--orig", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--wtok", help="token stream; adds the compression ratio column")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.add_argument("--figure", help="figure path (default: next to --out)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_stats)

    o = sub.add_parser("oracle", help="grouped vs exhaustive entropies CSV (+ figure)")
    o.add_argument("--d", type=int, default=8, help="total latent channels (<= 20)")
    o.add_argument("--g", default="1,2,4,8", help="comma list of group counts")
    o.add_argument("--tau", type=float, default=1.0)
    o.add_argument("--hw", type=int, default=4, help="latent grid side length")
    o.add_argument("--seeds", type=int, default=5)
    o.add_argument("--out", help="CSV path (default: stdout)")
    o.add_argument("--figure", help="figure path (default: next to --out)")
    o.add_argument("--no-figures", action="store_true")
    o.set_defaults(fn=cmd_oracle)

    b = sub.add_parser("bench-memory", help="entropy buffer footprint sweep CSV (+ figure)")
    b.add_argument("--sweep", nargs=4, metavar=("D_PRIMES", "GROUPS", "H", "W"),
                   default=["1,8,16,24", "1,2,4", "16", "16"],
                   help="comma lists of d' and g, then the latent grid dims")
    b.add_argument("--element-bytes", type=int, default=4)
    b.add_argument("--out", help="CSV path (default: stdout)")
    b.add_argument("--figure", help="figure path (default: next to --out)")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(fn=cmd_bench_memory)

    for sp in (t, e, d, s, o, b):
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one-line machine-parsable failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
