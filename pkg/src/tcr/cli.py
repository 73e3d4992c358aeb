"""Command-line entry point: ``tcr synth | train | generate | refine | evaluate``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataError, DatasetManifest, SynthSpec, load_manifest, synth_dataset, write_manifest
from .decoding import AttentionPolicy, generate, generation_record, teacher_forced_attention
from .experiments import split_seed
from .metrics import evaluate_titles, lead3
from .model import NumericalDivergence
from .refinement import EmptyRefinement, RefinementConfig, refine_loop
from .tokenization import Vocab, build_vocab
from .training import seed_everything, train

log = logging.getLogger("tcr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(s: str) -> tuple[int, int]:
    a, _, b = s.partition(",")
    return int(a), int(b or a)


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _manifest(path: str | None, what: str) -> DatasetManifest:
    if not path:
        raise UsageError(f"no {what} manifest given")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} manifest {p} not found")
    return load_manifest(p, split=what)


def _policy(args, cfg: RunConfig) -> AttentionPolicy:
    layer = cfg.aggregation.layer
    if args.layer is not None:
        layer = None if args.layer == "mean" else int(args.layer)
    return AttentionPolicy(layer, args.heads or cfg.aggregation.heads)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        task=args.task,
        n_words=args.n_words,
        sentences=_pair(args.sentences),
        sentence_len=_pair(args.sentence_len),
        k=args.k,
        L=args.L,
        d_v=args.d_v,
        n_markers=args.n_markers,
        marker_scale=args.marker_scale,
    )
    out = Path(args.out)
    _prepare_out(out, args.force)
    corrupted = {}
    for i, (split, n, corrupt) in enumerate(
        [("train", args.n, args.corrupt), ("valid", args.n_valid, 0.0), ("test", args.n_test, 0.0)]
    ):
        if n < 1:
            continue
        m = synth_dataset(split_seed(args.seed, i), replace(spec, n_samples=n, id_prefix=f"{split}-", corrupt_fraction=corrupt))
        write_manifest(m, out / f"{split}.jsonl")
        corrupted[split] = m.info["corrupted_ids"]
    (out / "synth.json").write_text(
        json.dumps({"seed": args.seed, "task": args.task, "corrupted_ids": corrupted}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {out}")
    return EXIT_OK


def _corpus(m: DatasetManifest) -> list[str]:
    return [s.text for s in m] + [s.title for s in m]


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.print_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    seed_everything(cfg.seed, cfg.threads)
    tr = _manifest(args.train or cfg.paths.train, "train")
    va_path = args.valid or cfg.paths.valid
    va = _manifest(va_path, "valid") if va_path else None
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_path = args.vocab or cfg.paths.vocab
    vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(_corpus(tr), cfg.model.vocab_size)
    cfg = replace(cfg, model=replace(cfg.model, vocab_size=len(vocab)))
    vocab.save(out / "vocab.txt")
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    res = train(tr, vocab, cfg.model, cfg.schedule, valid=va, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "checkpoint.bin", res.model)
    print(f"best epoch {res.best_epoch}; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_model(args, cfg: RunConfig | None):
    ckpt = args.checkpoint or (cfg.paths.checkpoint if cfg else None)
    if not ckpt:
        raise UsageError("no checkpoint given")
    if not Path(ckpt).is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    vocab_path = args.vocab or (cfg.paths.vocab if cfg else None) or str(Path(ckpt).with_name("vocab.txt"))
    vocab = Vocab.load(vocab_path)
    expected = None
    if cfg is not None and args.config:
        expected = replace(cfg.model, vocab_size=len(vocab))
    model = load_checkpoint(ckpt, expected)
    if model.config.vocab_size != len(vocab):
        raise CheckpointError(f"checkpoint/config mismatch in field 'vocab_size': checkpoint has {model.config.vocab_size}, vocab has {len(vocab)}")
    return model, vocab


def _generate_all(model, vocab, manifest, args, cfg: RunConfig, attn_dir: Path | None = None) -> list[dict]:
    policy = _policy(args, cfg)
    greedy = args.greedy or (args.beam is None and cfg.decode == "greedy")
    beam = args.beam if args.beam is not None else cfg.beam
    kw = dict(use_text=not args.no_text, use_frames=not args.no_visual)
    records = []
    for s in manifest:
        res = generate(model, s, vocab, beam, policy, greedy=greedy, **kw)
        if args.teacher_forced:
            tf = teacher_forced_attention(model, s, vocab, policy, **kw)
            res.cover_index, res.frame_scores = tf.cover_index, tf.frame_scores
        records.append(generation_record(s, res, vocab))
        if attn_dir is not None:
            mat = np.stack(res.step_attention) if res.step_attention else np.zeros((0, res.n_input))
            np.savetxt(attn_dir / f"{s.id}.csv", mat, delimiter=",", fmt="%.8g")
    return records


def _check_ablation(args) -> None:
    if args.no_text and args.no_visual:
        raise UsageError("--no-text and --no-visual together leave nothing to attend to")


def cmd_generate(args) -> int:
    _check_ablation(args)
    cfg = _run_config(args)
    seed_everything(cfg.seed, cfg.threads)
    model, vocab = _load_model(args, cfg)
    manifest = _manifest(args.manifest or cfg.paths.test, "test")
    attn_dir = None
    if args.attn_report:
        attn_dir = Path(args.attn_report)
        attn_dir.mkdir(parents=True, exist_ok=True)
    records = _generate_all(model, vocab, manifest, args, cfg, attn_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    print(f"wrote {len(records)} generations to {out}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _run_config(args)
    rc = cfg.refine
    over = {k: getattr(args, k) for k in ("u", "v", "keep", "iterations") if getattr(args, k) is not None}
    if over:
        rc = replace(rc, **over)
    seed_everything(cfg.seed, cfg.threads)
    tr = _manifest(args.train or cfg.paths.train, "train")
    va = _manifest(args.valid or cfg.paths.valid, "valid")
    out = Path(args.out or cfg.paths.out_dir)
    _prepare_out(out, args.force)
    vocab_path = args.vocab or cfg.paths.vocab
    vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(_corpus(tr), cfg.model.vocab_size)
    vocab.save(out / "vocab.txt")
    mcfg = replace(cfg.model, vocab_size=len(vocab))
    (out / "config.json").write_text(replace(cfg, model=mcfg, refine=rc).dumps(), encoding="utf-8")
    try:
        res = refine_loop(tr, vocab, mcfg, rc, cfg.schedule, valid=va, policy=cfg.aggregation, out_dir=out)
    except EmptyRefinement as e:
        print(f"error: {e}; see {out / f'report_{len(e.reports)}.json'}", file=sys.stderr)
        return EXIT_DATA
    save_checkpoint(out / "checkpoint.bin", res.model)
    last = res.reports[-1]
    print(f"best iteration {res.best_iteration}; kept {len(last.kept_ids)} dropped {len(last.dropped_ids)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _check_ablation(args)
    cfg = _run_config(args)
    seed_everything(cfg.seed, cfg.threads)
    manifest = _manifest(args.manifest or cfg.paths.test, "test")
    level = "char" if args.char else "token"
    if args.baseline == "lead3":
        titles = {s.id: lead3(s.text) for s in manifest}
        vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(_corpus(manifest), 10**9)
    elif args.generations:
        titles = {}
        for line in Path(args.generations).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                titles[rec["id"]] = rec["title"]
        vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(_corpus(manifest) + list(titles.values()), 10**9)
    else:
        model, vocab = _load_model(args, cfg)
        titles = {r["id"]: r["title"] for r in _generate_all(model, vocab, manifest, args, cfg)}
    report = evaluate_titles(titles, manifest, vocab, level)
    text = json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"R-1 {report.r1:.4f}  R-2 {report.r2:.4f}  R-L {report.rl:.4f}  (n={report.n_samples})")
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (overlays the preset)")
    p.add_argument("--preset", default="full", choices=["full", "tiny"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--layer", help="attention layer index or 'mean'")
    p.add_argument("--heads", choices=["mean", "max"])
    p.add_argument("--teacher-forced", action="store_true", help="cover from gold-title attention")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--no-visual", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic train/valid/test manifests")
    p.add_argument("--task", required=True, choices=["copy-prefix", "planted-cover"])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--L", type=int, default=25)
    p.add_argument("--d-v", type=int, default=16)
    p.add_argument("--n-words", type=int, default=40)
    p.add_argument("--n-markers", type=int, default=8)
    p.add_argument("--marker-scale", type=float, default=3.0)
    p.add_argument("--sentences", default="3,5", help="min,max sentences per text")
    p.add_argument("--sentence-len", default="3,6", help="min,max words per sentence")
    p.add_argument("--corrupt", type=float, default=0.0, help="fraction of train titles replaced by random words")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the title-cover generator")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode titles and select covers")
    _common(p)
    _decode_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--attn-report", help="directory for per-sample attention CSVs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("refine", help="run the attention-based refinement loop")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--u", type=int)
    p.add_argument("--v", type=int)
    p.add_argument("--keep", type=float)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="Rouge-1/2/L F1 of a model, a generations file or Lead-3")
    _common(p)
    _decode_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--generations")
    p.add_argument("--baseline", choices=["lead3"])
    p.add_argument("--char", action="store_true", help="score characters instead of model tokens")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
