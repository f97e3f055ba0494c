"""Training loops: DAMSM pre-training, the evaluation classifier and the GAN itself."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .core import Adam, Rng, Tensor, file_sha256, load_tensors, no_grad, save_tensors
from .core import ops as T
from .damsm import Damsm, DamsmTemperatures, damsm_loss
from .gan import Discriminator, Generator, discriminator_loss_terms, generator_loss, generator_stage_loss
from .metrics import EvalNet, MetricReport, MetricRow, evaluate_model, fit_gaussian, preprocess
from .ppm import image_grid, line_chart, write_ppm
from .text import TextEncoder, TextEncoding, Vocabulary, tokenize
from .toyset import N_CLASSES, ToySplit, downsample

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or parameter became non-finite."""


def _check_finite(name: str, value: float, step: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{name} is {value} at step {step}")
    return value


def params_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()


def temperatures(cfg: RunConfig) -> DamsmTemperatures:
    return DamsmTemperatures(cfg.gamma1, cfg.gamma2, cfg.gamma3)


def token_ids(captions: list[str], vocab: Vocabulary, max_len: int) -> np.ndarray:
    return np.array([tokenize(c, vocab, max_len) for c in captions], dtype=np.int64).reshape(-1, max_len)


def encode_captions(encoder: TextEncoder, ids: np.ndarray, batch: int = 256) -> TextEncoding:
    """Frozen text features for many captions as plain (constant) tensors."""
    words, sents, masks = [], [], []
    with no_grad():
        for i in range(0, len(ids), batch):
            enc = encoder(ids[i:i + batch])
            words.append(enc.words.data)
            sents.append(enc.sentence.data)
            masks.append(enc.mask)
    return TextEncoding(Tensor(np.concatenate(words)), Tensor(np.concatenate(sents)), np.concatenate(masks))


def _epoch_batches(n: int, batch: int, seed: int, label: str, epoch: int) -> list[np.ndarray]:
    perm = Rng(seed, label, epoch).permutation(n)
    return [perm[i:i + batch] for i in range(0, n - batch + 1, batch)]


def _step_budget(n: int, batch: int, epochs: int, max_steps: int) -> int:
    per_epoch = n // batch
    if per_epoch == 0:
        raise ValueError(f"batch {batch} is larger than the {n}-image training set")
    total = per_epoch * epochs
    return max_steps if max_steps and (not epochs or max_steps < total) else total


def _schedule(n: int, batch: int, seed: int, label: str, total: int, start: int = 0):
    """Yield ``(step, epoch, indices)`` for steps ``start..total-1``."""
    per_epoch = n // batch
    epoch = start // per_epoch
    while True:
        batches = _epoch_batches(n, batch, seed, label, epoch)
        for j, idx in enumerate(batches):
            step = epoch * per_epoch + j
            if step < start:
                continue
            if step >= total:
                return
            yield step, epoch, idx
        epoch += 1


# -- DAMSM -------------------------------------------------------------------------------------


def pretrain_damsm(cfg: RunConfig, split: ToySplit, vocab: Vocabulary,
                   on_step: Callable[[int, float], None] | None = None) -> tuple[Damsm, list[float]]:
    """Jointly train the text and image encoders on the matching loss; returns (model, losses)."""
    damsm = Damsm(len(vocab), cfg.text_dim, cfg.max_len, cfg.resolution, Rng(cfg.seed, "damsm-init"))
    opt = Adam(damsm.parameters(), lr=cfg.damsm_lr, betas=(0.5, 0.999))
    temps = temperatures(cfg)
    ids = token_ids(split.captions, vocab, cfg.max_len)
    total = _step_budget(len(split), cfg.damsm_batch, cfg.damsm_epochs, cfg.damsm_max_steps)
    losses = []
    for step, _, idx in _schedule(len(split), cfg.damsm_batch, cfg.seed, "damsm-epoch", total):
        opt.zero_grad()
        loss = damsm.loss(split.images[idx], ids[idx], temps)
        losses.append(_check_finite("DAMSM loss", loss.item(), step))
        loss.backward()
        opt.step()
        if on_step:
            on_step(step, losses[-1])
    damsm.requires_grad_(False)
    return damsm, losses


# -- evaluation classifier ------------------------------------------------------------------------


def train_evalnet(cfg: RunConfig, train: ToySplit, test: ToySplit | None = None,
                  batch: int = 50) -> tuple[EvalNet, float]:
    """Fit the stand-in classifier on real images; returns (net, held-out accuracy)."""
    net = EvalNet(N_CLASSES, Rng(cfg.seed, "evalnet-init"))
    opt = Adam(net.parameters(), lr=cfg.evalnet_lr, betas=(0.9, 0.999))
    x_all = preprocess(train.images)
    y_all = train.labels
    batch = min(batch, len(train))
    total = _step_budget(len(train), batch, cfg.evalnet_epochs, 0)
    for step, _, idx in _schedule(len(train), batch, cfg.seed, "evalnet-epoch", total):
        opt.zero_grad()
        logp = T.log_softmax(net(x_all[idx]), axis=1)
        loss = -T.mean(logp[np.arange(len(idx)), y_all[idx]])
        _check_finite("EvalNet loss", loss.item(), step)
        loss.backward()
        opt.step()
    net.eval().requires_grad_(False)
    held = test if test is not None else train
    probs, _ = net.embed(held.images)
    return net, float(np.mean(probs.argmax(axis=1) == held.labels))


# -- GAN ----------------------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_loss: float
    g_adv: float
    damsm: float
    kl: float
    d_acc_real: float


def build_generator(cfg: RunConfig) -> Generator:
    return Generator(cfg.model_variant(), cfg.text_dim, Rng(cfg.seed, "generator-init"),
                     nz=cfg.nz, base=cfg.base_channels, n_res=cfg.n_res, local_k=cfg.local_k)


class GanTrainer:
    """Owns the generator, the three discriminators, their optimisers and the frozen encoders.

    Each step draws its randomness from ``Rng(seed, "gan-step", step)``, so
    a run restored from a checkpoint continues exactly as an uninterrupted one.
    """

    def __init__(self, cfg: RunConfig, damsm: Damsm, split: ToySplit, vocab: Vocabulary):
        self.cfg = cfg
        self.damsm = damsm.eval().requires_grad_(False)
        self.temps = temperatures(cfg)
        self.G = build_generator(cfg)
        d_rng = Rng(cfg.seed, "discriminator-init")
        self.D = [Discriminator(res, cfg.text_dim, d_rng.child(i), cfg.ndf, cfg.n_power_iterations)
                  for i, res in enumerate(cfg.model_variant().stage_resolutions)]
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = Adam(self.G.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = [Adam(d.parameters(), lr=cfg.lr, betas=betas) for d in self.D]
        self.step = 0
        self.split = split
        self.vocab = vocab
        res = cfg.model_variant().stage_resolutions
        self.reals = [downsample(split.images, r) for r in res]
        self.text = encode_captions(damsm.txt, token_ids(split.captions, vocab, cfg.max_len))

    # -- phases -----------------------------------------------------------------------------

    def generate(self, enc: TextEncoding, rng: Rng):
        noise = rng.child("noise").normal((len(enc), self.cfg.nz))
        return self.G(enc.words, enc.sentence, enc.mask, noise, rng.child("ca"))

    def d_phase(self, idx: np.ndarray, stages, enc: TextEncoding) -> tuple[float, float]:
        """Update every D_i on real / fake / mismatched pairs; returns (loss, accuracy on reals)."""
        N = len(idx)
        s = enc.sentence.data
        sents = Tensor(np.concatenate([s, s, np.roll(s, 1, axis=0)]))
        total, acc = 0.0, 0.0
        for i, (D, opt) in enumerate(zip(self.D, self.opt_d)):
            D.requires_grad_(True)
            opt.zero_grad()
            real = self.reals[i][idx]
            feats = D.features(Tensor(np.concatenate([real, stages[i].image.data])))
            u = D.uncond_logit(feats)
            c = D.cond_logit(T.concat([feats, feats[:N]], axis=0), sents)
            uncond, cond = discriminator_loss_terms(u[:N], u[N:], c[:N], c[N:2 * N], c[2 * N:])
            loss = uncond + cond
            _check_finite(f"D{i} loss", loss.item(), self.step)
            loss.backward()
            opt.step()
            total += loss.item()
            acc += float(np.mean(u.data[:N] > 0.0))
        return total, acc / len(self.D)

    def g_phase(self, idx: np.ndarray, stages, kl: Tensor, enc: TextEncoding) -> tuple[float, float, float]:
        """Update the generator stack; returns (total loss, adversarial part, DAMSM part)."""
        for D in self.D:
            D.requires_grad_(False)
        logits = []
        for D, st in zip(self.D, stages):
            feats = D.features(st.image)
            logits.append((D.uncond_logit(feats), D.cond_logit(feats, enc.sentence)))
        match = damsm_loss(self.damsm.img(stages[-1].image), enc, self.temps)
        loss = generator_loss(logits, match, kl, self.cfg.lam, self.cfg.kl_weight)
        _check_finite("generator loss", loss.item(), self.step)
        self.opt_g.zero_grad()
        loss.backward()
        self.opt_g.step()
        adv = sum(generator_stage_loss(u, c).item() for u, c in logits)
        return loss.item(), adv, match.item()

    def train_step(self, idx: np.ndarray) -> StepMetrics:
        rng = Rng(self.cfg.seed, "gan-step", self.step)
        enc = self.text.take(idx)
        self.G.train()
        stages, kl = self.generate(enc, rng)
        d_loss, acc = self.d_phase(idx, stages, enc)
        g_loss, adv, match = self.g_phase(idx, stages, kl, enc)
        out = StepMetrics(self.step, d_loss, g_loss, adv, match, kl.item(), acc)
        self.step += 1
        return out

    # -- sampling -------------------------------------------------------------------------------

    def sample(self, enc: TextEncoding, noise: np.ndarray, eps: np.ndarray | None = None) -> list[np.ndarray]:
        """Stage images for given text features and noise, generator in inference mode."""
        return sample_stages(self.G, enc, noise, eps)

    # -- checkpoints -----------------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"meta.step": np.array([float(self.step)])}
        out.update(self.G.state_dict("g."))
        out.update(self.opt_g.state_dict("opt.g"))
        for i, (D, opt) in enumerate(zip(self.D, self.opt_d)):
            out.update(D.state_dict(f"d{i}."))
            out.update(opt.state_dict(f"opt.d{i}"))
        out.update(self.damsm.state_dict("damsm."))
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        self.G.load_state_dict(tensors, "g.")
        self.opt_g.load_state_dict(tensors, "opt.g")
        for i, (D, opt) in enumerate(zip(self.D, self.opt_d)):
            D.load_state_dict(tensors, f"d{i}.")
            opt.load_state_dict(tensors, f"opt.d{i}")
        self.step = int(tensors["meta.step"][0])


def sample_stages(G: Generator, enc: TextEncoding, noise: np.ndarray, eps: np.ndarray | None = None,
                  batch: int = 50) -> list[np.ndarray]:
    was_training = G.training
    G.eval()
    outs: list[list[np.ndarray]] = [[], [], []]
    try:
        with no_grad():
            for i in range(0, len(enc), batch):
                sl = slice(i, i + batch)
                part = TextEncoding(Tensor(enc.words.data[sl]), Tensor(enc.sentence.data[sl]), enc.mask[sl])
                e = np.zeros((len(part), G.cond_dim)) if eps is None else eps[sl]
                stages, _ = G(part.words, part.sentence, part.mask, noise[sl], eps=e)
                for k, st in enumerate(stages):
                    outs[k].append(st.image.data)
    finally:
        G.train(was_training)
    return [np.concatenate(o) for o in outs]


def load_generator(cfg: RunConfig, tensors: dict[str, np.ndarray], vocab_size: int) -> tuple[Generator, TextEncoder]:
    G = build_generator(cfg)
    G.load_state_dict(tensors, "g.")
    txt = TextEncoder(vocab_size, cfg.text_dim, cfg.max_len, Rng(0))
    txt.load_state_dict(tensors, "damsm.txt.")
    return G.eval(), txt


# -- the training run ------------------------------------------------------------------------


class Evaluator:
    """Scores the generator against the real training images with a fixed EvalNet."""

    def __init__(self, cfg: RunConfig, evalnet: EvalNet, evalnet_hash: str, split: ToySplit):
        self.cfg = cfg
        self.evalnet = evalnet
        self.evalnet_hash = evalnet_hash
        self.split = split
        self.real_stats = fit_gaussian(evalnet.embed(split.images)[1])
        rng = Rng(cfg.seed, "eval-noise")
        self.noise = rng.child("z").normal((cfg.eval_samples, cfg.nz))
        self.eps = rng.child("eps").normal((cfg.eval_samples, cfg.text_dim // 2))

    def header(self, cfg: RunConfig) -> dict[str, str]:
        return {
            "config_sha256": cfg.digest(),
            "evalnet_sha256": self.evalnet_hash,
            "seed": str(cfg.seed),
            "variant": cfg.variant,
            "n_samples": str(cfg.eval_samples),
            "n_splits": str(cfg.n_splits),
            "covariance": "unbiased (M-1)",
            "preprocess": "bilinear align_corners=false to 32px, (x+1)/2",
        }

    def evaluate(self, trainer: GanTrainer, epoch: int) -> MetricRow:
        text = trainer.text
        pos = {"i": 0}

        def sample(idx):
            i = pos["i"]
            pos["i"] += len(idx)
            enc = TextEncoding(Tensor(text.words.data[idx]), Tensor(text.sentence.data[idx]), text.mask[idx])
            return trainer.sample(enc, self.noise[i:i + len(idx)], self.eps[i:i + len(idx)])[-1]

        return evaluate_model(sample, self.split.images, self.evalnet, self.cfg.eval_samples,
                              self.cfg.n_splits, self.cfg.seed, epoch, real_stats=self.real_stats)


def write_curves(report: MetricReport, path) -> None:
    epochs = [r.epoch for r in report.rows]
    fid = [r.fid for r in report.rows]
    is_ = [r.is_mean for r in report.rows]
    top = line_chart({"fid": (epochs, fid)})
    bottom = line_chart({"is": (epochs, is_)})
    write_ppm(path, np.concatenate([top, bottom], axis=1))


def run_gan(cfg: RunConfig, out: Path, trainer: GanTrainer, evaluator: Evaluator | None,
            resume: bool = False, on_step: Callable[[StepMetrics], None] | None = None) -> MetricReport:
    """Train to the configured schedule, checkpointing every epoch and evaluating every ``eval_every``."""
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "gan.ckpt"
    report_path = out / "report.csv"
    report = MetricReport(evaluator.header(cfg) if evaluator else {"config_sha256": cfg.digest()})
    if resume and ckpt.exists():
        trainer.load_state_dict(load_tensors(ckpt))
        if report_path.exists():
            report.rows = MetricReport.load(report_path).rows
    cfg.save(out / "config.txt")

    n = len(trainer.split)
    per_epoch = n // cfg.batch
    total = _step_budget(n, cfg.batch, cfg.epochs, cfg.max_steps)
    done_epochs = {r.epoch for r in report.rows}

    def checkpoint():
        save_tensors(ckpt, trainer.state_dict())
        report.save(report_path)
        if len(report.rows) > 1:
            write_curves(report, out / "curves.ppm")

    def maybe_eval(epoch: int, force: bool = False):
        if evaluator is None or epoch in done_epochs:
            return
        if force or epoch % max(cfg.eval_every, 1) == 0:
            row = evaluator.evaluate(trainer, epoch)
            report.rows.append(row)
            done_epochs.add(epoch)
            log.info("epoch %d  %s", epoch, MetricReport.table_row(row, cfg.variant))

    if trainer.step == 0:
        maybe_eval(0, force=True)
    for step, epoch, idx in _schedule(n, cfg.batch, cfg.seed, "gan-epoch", total, trainer.step):
        metrics = trainer.train_step(idx)
        if on_step:
            on_step(metrics)
        if (step + 1) % per_epoch == 0:
            maybe_eval(epoch + 1)
            checkpoint()
    maybe_eval(-(-trainer.step // per_epoch), force=True)
    checkpoint()
    return report


def sample_grid(trainer: GanTrainer, captions: list[str], seed: int) -> np.ndarray:
    """Rows of three stage images per caption, upsampled to the final resolution."""
    ids = token_ids(captions, trainer.vocab, trainer.cfg.max_len)
    enc = encode_captions(trainer.damsm.txt, ids)
    noise = Rng(seed, "grid-noise").normal((len(captions), trainer.cfg.nz))
    return stage_grid(trainer.sample(enc, noise))


def stage_grid(stages: list[np.ndarray]) -> np.ndarray:
    final = stages[-1].shape[-1]
    rows = []
    for j in range(len(stages[0])):
        row = []
        for img in stages:
            f = final // img.shape[-1]
            row.append(np.repeat(np.repeat(img[j], f, axis=1), f, axis=2))
        rows.append(row)
    return image_grid(rows)


def save_evalnet(path, net: EvalNet) -> str:
    save_tensors(path, net.state_dict())
    return file_sha256(path)[:16]


def load_evalnet(path) -> EvalNet:
    net = EvalNet(N_CLASSES, Rng(0))
    net.load_state_dict(load_tensors(path))
    return net.eval().requires_grad_(False)
