"""Command-line entry point.

Every command works on a run directory (``--out``) holding ``config.txt``,
``vocab.txt`` and the checkpoints it produces, so later commands pick up the
resolved configuration of earlier ones.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import toyset
from .config import PROFILES, ConfigError, RunConfig, parse_overrides, resolve
from .core import CheckpointError, Rng, file_sha256, load_tensors, save_tensors
from .damsm import Damsm
from .metrics import MetricReport
from .pipeline import (
    Evaluator, GanTrainer, NumericError, encode_captions, load_evalnet, load_generator, pretrain_damsm,
    run_gan, sample_grid, sample_stages, save_evalnet, stage_grid, token_ids, train_evalnet,
)
from .ppm import write_ppm
from .sensitivity import caption_sensitivity
from .text import UNK, Vocabulary, split_words

log = logging.getLogger("cagan")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULT_SENSITIVITY_CAPTION = "a large red square on the center of a dark background"
DEFAULT_SUBSTITUTIONS = ("red=blue", "red=green", "red=yellow", "red=white")


class MissingPrerequisite(OSError):
    pass


# -- configuration ------------------------------------------------------------------------------


def _file_values(args) -> dict:
    path = Path(args.config) if args.config else Path(args.out) / "config.txt"
    if not path.exists():
        if args.config:
            raise ConfigError(f"config file {path} does not exist")
        return {}
    return parse_overrides(path.read_text(encoding="utf-8"))


def resolve_config(args) -> RunConfig:
    file_values = _file_values(args)
    flags = {
        "seed": args.seed, "variant": args.variant, "lam": args.lam, "r": args.r, "batch": args.batch,
        "lr": args.lr, "epochs": args.epochs, "stage_h0": args.stage_h0, "max_steps": args.max_steps,
        "data_dir": args.data,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    if "variant" in flags and flags["variant"] != file_values.get("variant", flags["variant"]):
        # a different variant brings its own r / lambda / placement defaults
        for key in ("r", "lam", "placement"):
            file_values.pop(key, None)
    profile = args.profile or file_values.pop("profile", None) or "desk"
    file_values.pop("profile", None)
    return resolve(profile, flags.get("variant", file_values.get("variant", "se")), file_values, flags)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{what} not found at {path}")
    return path


def _load_data(cfg: RunConfig, split: str):
    root = _require(Path(cfg.data_dir), "dataset directory")
    _require(root / split / "captions.tsv", f"{split} split")
    return toyset.load_split(root, split)


def _run_vocab(cfg: RunConfig, out: Path) -> Vocabulary:
    local = out / "vocab.txt"
    if not local.exists():
        src = _require(Path(cfg.data_dir) / "vocab.txt", "vocabulary")
        out.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, local)
    return Vocabulary.load(local)


def _load_damsm(cfg: RunConfig, out: Path, vocab: Vocabulary) -> Damsm:
    path = _require(out / "damsm.ckpt", "DAMSM checkpoint (run pretrain-damsm first)")
    damsm = Damsm(len(vocab), cfg.text_dim, cfg.max_len, cfg.resolution, Rng(0))
    damsm.load_state_dict(load_tensors(path), "damsm.")
    return damsm.eval().requires_grad_(False)


def _run_config(args) -> tuple[RunConfig, Path]:
    """Config stored next to a generator checkpoint (for eval / generate / sensitivity)."""
    ckpt = Path(args.ckpt) if args.ckpt else Path(args.out) / "gan.ckpt"
    _require(ckpt, "generator checkpoint")
    cfg_path = _require(ckpt.parent / "config.txt", "run config")
    return RunConfig.load(cfg_path), ckpt


# -- commands -----------------------------------------------------------------------------------


def cmd_build_data(args) -> int:
    cfg = resolve_config(args)
    root = toyset.build_dataset(cfg.data_dir, cfg.n_train, cfg.n_test, cfg.seed, cfg.resolution)
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test images at {cfg.resolution}px to {root}")
    return EXIT_OK


def cmd_pretrain_damsm(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    split = _load_data(cfg, "train")
    vocab = _run_vocab(cfg, out)
    cfg.save(out / "config.txt")

    def report(step, loss):
        if step % 50 == 0:
            log.info("damsm step %d loss %.4f", step, loss)

    damsm, losses = pretrain_damsm(cfg, split, vocab, report)
    save_tensors(out / "damsm.ckpt", damsm.state_dict("damsm."))
    (out / "damsm_losses.csv").write_text(
        "step,loss\n" + "".join(f"{i},{v:.6f}\n" for i, v in enumerate(losses)), encoding="utf-8")
    if losses:
        k = max(1, min(20, len(losses) // 5))
        first, last = float(np.mean(losses[:k])), float(np.mean(losses[-k:]))
        print(f"damsm: {len(losses)} steps, loss {first:.4f} -> {last:.4f} "
              f"({100 * (1 - last / first):.1f}% lower)")
    return EXIT_OK


def cmd_train_evalnet(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, acc = train_evalnet(cfg, _load_data(cfg, "train"), _load_data(cfg, "test"))
    digest = save_evalnet(out / "evalnet.ckpt", net)
    print(f"evalnet: held-out accuracy {acc:.3f}, checkpoint sha256 {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    split = _load_data(cfg, "train")
    vocab = _run_vocab(cfg, out)
    damsm = _load_damsm(cfg, out, vocab)
    if not (out / "evalnet.ckpt").exists():
        log.info("no evalnet checkpoint in %s; training one", out)
        cmd_train_evalnet(args)
    evalnet = load_evalnet(out / "evalnet.ckpt")
    trainer = GanTrainer(cfg, damsm, split, vocab)
    evaluator = Evaluator(cfg, evalnet, file_sha256(out / "evalnet.ckpt")[:16], split)
    start = time.time()
    log_path = out / "train_log.csv"
    header = "step,d_loss,g_loss,g_adv,damsm,kl,d_acc_real\n"
    if args.resume and log_path.exists() and (out / "gan.ckpt").exists():
        # drop rows past the checkpoint; those steps are about to be redone
        done = int(load_tensors(out / "gan.ckpt")["meta.step"][0])
        rows = log_path.read_text(encoding="utf-8").splitlines()[1:]
        kept = [r for r in rows if int(r.split(",")[0]) < done]
        log_path.write_text(header + "".join(r + "\n" for r in kept), encoding="utf-8")
    else:
        log_path.write_text(header, encoding="utf-8")
    step_log = log_path.open("a", encoding="utf-8")

    def progress(m):
        step_log.write(f"{m.step},{m.d_loss:.6f},{m.g_loss:.6f},{m.g_adv:.6f},{m.damsm:.6f},"
                       f"{m.kl:.6f},{m.d_acc_real:.4f}\n")
        if m.step % 50 == 0:
            log.info("step %d  d %.3f  g %.3f  adv %.3f  damsm %.3f  kl %.3f  acc(real) %.2f  [%.0fs]",
                     m.step, m.d_loss, m.g_loss, m.g_adv, m.damsm, m.kl, m.d_acc_real, time.time() - start)

    try:
        report = run_gan(cfg, out, trainer, evaluator, resume=args.resume, on_step=progress)
    finally:
        step_log.close()
    grid_caps = [toyset.caption(s) for s in split.specs[:8]]
    write_ppm(out / "samples.ppm", sample_grid(trainer, grid_caps, cfg.seed))
    for row in report.rows:
        print(f"epoch {row.epoch}: " + MetricReport.table_row(row, cfg.variant))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, ckpt = _run_config(args)
    run = ckpt.parent
    evalnet_path = _require(run / "evalnet.ckpt", "EvalNet checkpoint")
    if args.data:
        cfg.data_dir = args.data
    if args.n_samples:
        cfg.eval_samples = args.n_samples
    cfg.validate()
    split = _load_data(cfg, "train")
    vocab = _run_vocab(cfg, run)
    damsm = _load_damsm(cfg, run, vocab)
    trainer = GanTrainer(cfg, damsm, split, vocab)
    trainer.load_state_dict(load_tensors(ckpt))
    evaluator = Evaluator(cfg, load_evalnet(evalnet_path), file_sha256(evalnet_path)[:16], split)
    epoch = trainer.step // max(len(split) // cfg.batch, 1)
    row = evaluator.evaluate(trainer, epoch)
    report = MetricReport(evaluator.header(cfg), [row])
    report.save(run / "eval_report.csv")
    print(MetricReport.table_row(row, cfg.variant))
    return EXIT_OK


def _read_captions(path: Path) -> list[str]:
    text = _require(path, "caption file").read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_generate(args) -> int:
    cfg, ckpt = _run_config(args)
    run = ckpt.parent
    vocab = _run_vocab(cfg, run)
    G, encoder = load_generator(cfg, load_tensors(ckpt), len(vocab))
    captions = _read_captions(Path(args.captions))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not captions:
        print("no captions; nothing generated")
        return EXIT_OK
    for cap in captions:
        unknown = [w for w in split_words(cap) if vocab.id(w) == UNK]
        if unknown:
            log.warning("caption %r has unknown tokens %s (mapped to id %d)", cap, unknown, UNK)
    enc = encode_captions(encoder, token_ids(captions, vocab, cfg.max_len))
    rng = Rng(cfg.seed if args.seed is None else args.seed, "generate")
    stages = sample_stages(G, enc, rng.child("z").normal((len(captions), cfg.nz)),
                           rng.child("eps").normal((len(captions), G.cond_dim)))
    for j in range(len(captions)):
        for k, imgs in enumerate(stages):
            write_ppm(out / f"{j:04d}_stage{k}.ppm", imgs[j])
    write_ppm(out / "grid.ppm", stage_grid(stages))
    (out / "captions.txt").write_text("".join(f"{j:04d}\t{c}\n" for j, c in enumerate(captions)), encoding="utf-8")
    print(f"wrote {len(captions)} x 3 stage images to {out}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg, ckpt = _run_config(args)
    run = ckpt.parent
    vocab = _run_vocab(cfg, run)
    G, encoder = load_generator(cfg, load_tensors(ckpt), len(vocab))
    subs = []
    for item in args.sub or DEFAULT_SUBSTITUTIONS:
        old, sep, new = item.partition("=")
        if not sep or not old or not new:
            raise ConfigError(f"substitution {item!r} must look like old=new")
        subs.append((old.lower(), new.lower()))
    try:
        report = caption_sensitivity(G, encoder, vocab, args.caption, subs, cfg.max_len,
                                     args.draws, cfg.seed if args.seed is None else args.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    text = report.to_text()
    path = Path(args.report) if args.report else run / "sensitivity.csv"
    path.write_text(text, encoding="utf-8")
    print(f"color flip rate {report.flip_rate():.3f} over {args.draws} draws x {len(subs)} edits "
          f"(targeted hits {report.hit_rate():.3f}); details in {path}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--profile", choices=PROFILES)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("se", "l+se"))
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--data", help="dataset directory (default: data)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--r", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage-h0", dest="stage_h0", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagan", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="render the toy captioned-shapes dataset")
    _common(p)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("pretrain-damsm", help="train the text/image matching encoders")
    _common(p)
    p.set_defaults(func=cmd_pretrain_damsm)

    p = sub.add_parser("train-evalnet", help="train the IS/FID stand-in classifier")
    _common(p)
    p.set_defaults(func=cmd_train_evalnet)

    p = sub.add_parser("train", help="train the GAN, evaluating every few epochs")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/gan.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="IS / FID of a generator checkpoint")
    _common(p)
    p.add_argument("--ckpt", help="generator checkpoint (default OUT/gan.ckpt)")
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="images for every caption in a file")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--captions", required=True, help="UTF-8 file, one caption per line")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sensitivity", help="colour flip rate under single-word caption edits")
    _common(p)
    p.add_argument("--ckpt", help="generator checkpoint (default OUT/gan.ckpt)")
    p.add_argument("--caption", default=DEFAULT_SENSITIVITY_CAPTION)
    p.add_argument("--sub", action="append", help="old=new token substitution (repeatable)")
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--report", help="where to write the per-draw CSV")
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except NumericError as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, KeyError) as err:
        log.error("I/O error: %s", err)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
