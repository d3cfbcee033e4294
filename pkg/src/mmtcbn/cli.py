"""Command-line entry points: synth, train, translate, gradcheck, score.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path


from . import numcore as nc
from .bleu import bleu
from .config import VARIANTS, ModelConfig, desk_config, variant_config
from .data import (
    preprocess_image,
    read_corpus,
    read_image_index,
    read_lines,
    synth_corpus,
    write_corpus,
)
from .errors import DivergenceError, MMTError
from .training import (
    Pipelines,
    Trainer,
    gradcheck_config,
    gradcheck_variant,
    load_checkpoint,
    pretrain_vision,
)
from .model import MMTModel

log = logging.getLogger("mmtcbn")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    base = base or desk_config()
    if path is None:
        return base
    return ModelConfig.from_text(Path(path).read_text(encoding="utf-8"), base)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _read_slots(directory: Path, prefix: str = "corpus"):
    path = directory / f"{prefix}.slots"
    return [int(x) for x in read_lines(path)] if path.exists() else None


# ---------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    corpus = synth_corpus(args.n, args.seed, size=args.size, paired=args.paired)
    out = Path(args.out)
    write_corpus(out, corpus.src, corpus.tgt, corpus.images)
    (out / "corpus.slots").write_text("".join(f"{s}\n" for s in corpus.slot), encoding="utf-8")
    print(f"wrote {len(corpus)} examples to {out}")
    return EXIT_OK


def _dataset(pipes: Pipelines, directory: Path):
    src, tgt, images = read_corpus(directory)
    if tgt is None:
        raise UsageError(f"{directory} has no corpus.tgt")
    return pipes.dataset(src, tgt, images, _read_slots(directory))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.max_steps is not None:
        cfg = cfg.replace(max_steps=args.max_steps)
    cfg = variant_config(args.variant, cfg)
    data_dir, out = Path(args.data), Path(args.out)
    if not (data_dir / "corpus.src").exists():
        raise UsageError(f"no corpus found in {data_dir}")
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    (out / "run.json").write_text(json.dumps({
        "variant": args.variant, "seed": cfg.seed, "git": _git_describe(), "start": started,
        "config": cfg.to_text(), "data": str(data_dir), "dev": args.dev}, indent=1))

    if args.resume:
        _, _, pipes = load_checkpoint(args.resume)
        train_data = _dataset(pipes, data_dir)
        dev_data = _dataset(pipes, Path(args.dev)) if args.dev else None
        trainer = Trainer.resume(args.resume, train_data, dev_data, out, cfg.seed)
        # run-control settings come from this invocation, the architecture from the checkpoint
        trainer.cfg = trainer.cfg.replace(max_steps=cfg.max_steps, eval_every=cfg.eval_every,
                                          patience=cfg.patience)
    else:
        src, tgt, _ = read_corpus(data_dir)
        pipes = Pipelines.fit(src, tgt, cfg.bpe_merges)
        train_data = _dataset(pipes, data_dir)
        dev_data = _dataset(pipes, Path(args.dev)) if args.dev else None
        model = MMTModel(cfg, len(pipes.src.vocab), len(pipes.tgt.vocab), seed=cfg.seed)
        pretrain_vision(model, cfg.seed)
        trainer = Trainer(model, train_data, dev_data, pipes, out, cfg.seed)
    result = trainer.run()
    (out / "run_end.json").write_text(json.dumps({
        "end": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "best_step": result.best_step,
        "final_step": result.final_step, "stopped_early": result.stopped_early}, indent=1))
    print(f"best dev BLEU {result.best_bleu:.4f} at step {result.best_step}; "
          f"checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    model, _, pipes = load_checkpoint(args.checkpoint)
    if pipes is None:
        raise UsageError(f"{args.checkpoint} carries no vocabulary files")
    lines = read_lines(args.input)
    if not lines:
        return EXIT_OK
    images = None
    if model.resnet is not None:
        idx = Path(args.images) if args.images else Path(args.input).with_suffix(".idx")
        if not idx.exists():
            raise UsageError(f"this model needs images; no index at {idx}")
        cfg = model.cfg
        raw = read_image_index(idx)
        if len(raw) != len(lines):
            raise UsageError(f"{len(raw)} images for {len(lines)} sentences")
        images = [preprocess_image(im, cfg.preprocessing, None, cfg.resnet_input_size[:2]) for im in raw]
    beam = args.beam or model.cfg.inference_beam_size
    for i, line in enumerate(lines):
        ids = pipes.src.encode(line)
        if not ids:
            print("")
            continue
        hyp = model.translate(ids, None, None if images is None else images[i], beam=beam)
        print(pipes.tgt.decode(hyp.tokens))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not args.eps > 0:
        raise UsageError("--eps must be positive")
    base = gradcheck_config()
    if args.config:
        base = _load_config(args.config, base)
    variants = args.variant or list(VARIANTS)
    worst = 0.0
    for v in variants:
        t0 = time.perf_counter()
        rep = gradcheck_variant(v, base, eps=args.eps, seed=args.seed)
        worst = max(worst, rep.max_rel_err)
        status = "ok" if rep.passed(args.tol) else "FAIL"
        print(f"{v:<36} max_rel_err {rep.max_rel_err:.3e}  worst {rep.worst_param}  "
              f"({rep.n_checked} scalars, {time.perf_counter() - t0:.1f}s)  {status}")
    ok = worst < args.tol
    print(f"overall max_rel_err {worst:.3e} ({'pass' if ok else 'fail'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_score(args) -> int:
    cands = read_lines(args.candidates)
    refs = read_lines(args.references)
    print(f"BLEU {bleu(cands, refs):.10f}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmtcbn", description="Text-modulated multimodal translation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic ambiguous corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--paired", action="store_true", help="each sentence once per shape")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--variant", required=True, choices=VARIANTS)
    t.add_argument("--config", help="key = value file overriding the desk defaults")
    t.add_argument("--data", required=True, help="directory written by `synth` or in its format")
    t.add_argument("--dev", help="held-out directory in the same format (default: training data)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="state directory saved by an earlier run")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("translate", help="beam-search translations to stdout")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--images", help="image index file (default: the input path with .idx)")
    r.add_argument("--beam", type=int)
    r.set_defaults(func=cmd_translate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    g.add_argument("--config")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variant", action="append", choices=VARIANTS)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("score", help="corpus BLEU of candidates against references")
    c.add_argument("--candidates", required=True)
    c.add_argument("--references", required=True)
    c.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    previous = nc.precision_name()
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (UsageError, MMTError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        nc.set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
