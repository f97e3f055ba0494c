"""Three-stage attentional generator, spectrally normalised discriminators, losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import LocalSelfAttention, SeBlock, WordAttention
from .core import BatchNorm, Conv2d, Linear, Module, ModuleDict, Rng, Tensor
from .core import ops as T

VARIANTS = ("se", "l+se")


@dataclass
class ModelVariant:
    """Attention layout of a model.

    ``placement`` lists local-attention sites: ``"f0_up<j>"`` after the j-th
    (1-based) up-block of the first stage, ``"f<i>_attn"`` inside the i-th
    stage's attention input (i = 1, 2).
    """

    kind: str = "se"
    r: int = 1
    lam: float = 0.1
    stage_h0: int = 16
    placement: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        self.placement = tuple(self.placement)
        if self.kind == "se" and self.placement:
            raise ValueError("the SE variant has no local attention sites")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.stage_h0 < 8 or self.stage_h0 & (self.stage_h0 - 1):
            raise ValueError("stage_h0 must be a power of two >= 8")

    @property
    def stage_resolutions(self) -> tuple[int, int, int]:
        return (self.stage_h0, 2 * self.stage_h0, 4 * self.stage_h0)


DEFAULT_LOCAL_PLACEMENT = ("f0_up1", "f1_attn", "f2_attn")


@dataclass
class StageState:
    h: Tensor
    image: Tensor


# -- conditioning augmentation ------------------------------------------------------


class CondAugment(Module):
    def __init__(self, sent_dim: int, cond_dim: int, rng: Rng):
        super().__init__()
        scale = 1.0 / np.sqrt(sent_dim)
        self.w_mu = Tensor(rng.normal((cond_dim, sent_dim)) * scale, requires_grad=True)
        self.w_logvar = Tensor(rng.normal((cond_dim, sent_dim)) * scale, requires_grad=True)

    def forward(self, s: Tensor, rng: Rng | None = None, eps: np.ndarray | None = None):
        """Return ``(c, kl)``; ``kl`` is summed over dims and averaged over the batch.

        ``eps`` overrides the standard-normal draw (``eps=0`` gives ``c = mu``).
        """
        mu = T.matmul(s, T.transpose(self.w_mu))
        logvar = T.matmul(s, T.transpose(self.w_logvar))
        if eps is None:
            eps = rng.normal(mu.shape)
        c = mu + T.exp(logvar * 0.5) * np.broadcast_to(eps, mu.shape)
        return c, kl_divergence(mu, logvar)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis, batch-averaged."""
    per_dim = (mu * mu + T.exp(logvar) - logvar - 1.0) * 0.5
    total = T.tsum(per_dim, axis=-1)
    return T.mean(total) if total.ndim else total


# -- spectral normalisation -----------------------------------------------------------


@dataclass
class SpectralNormState:
    u: np.ndarray
    n_power_iterations: int = 1
    sigma: float = field(default=float("nan"))


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


def spectral_normalize(w: Tensor, state: SpectralNormState) -> Tensor:
    """Divide ``w`` by a power-iteration estimate of its largest singular value.

    ``w`` is viewed as ``[out, rest]``. The estimate ``u^T W v`` keeps the
    gradient path through ``W`` while ``u`` and ``v`` are constants; ``u`` is
    updated in place on ``state`` and carried to the next call.
    """
    mat = w.data.reshape(w.shape[0], -1)
    u = state.u
    v = None
    for _ in range(max(state.n_power_iterations, 1)):
        v = _l2_normalize(mat.T @ u)
        u = _l2_normalize(mat @ v)
    state.u = u
    sigma = T.matmul(T.matmul(u[None, :], T.reshape(w, mat.shape)), v[:, None])
    sigma = T.clamp_min(T.reshape(sigma, ()), 1e-12)
    state.sigma = float(sigma.data)
    return w / sigma


class _SpectralNormMixin:
    n_power_iterations = 1

    def _init_u(self, rng: Rng):
        self.register_buffer("u", _l2_normalize(rng.normal(self.w.shape[0])))

    def normalized_weight(self) -> Tensor:
        if not self.training:
            mat = self.w.data.reshape(self.w.shape[0], -1)
            v = _l2_normalize(mat.T @ self.u)
            return self.w / max(float(self.u @ mat @ v), 1e-12)
        state = SpectralNormState(self.u, self.n_power_iterations)
        out = spectral_normalize(self.w, state)
        self.u = state.u
        return out


class SNConv2d(_SpectralNormMixin, Conv2d):
    def __init__(self, c_in, c_out, k, rng: Rng, stride=1, n_power_iterations=1):
        Conv2d.__init__(self, c_in, c_out, k, rng, stride=stride)
        self.n_power_iterations = n_power_iterations
        self._init_u(rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.normalized_weight(), self.b, self.stride, self.padding)


class SNLinear(_SpectralNormMixin, Linear):
    def __init__(self, n_in, n_out, rng: Rng, n_power_iterations=1):
        Linear.__init__(self, n_in, n_out, rng)
        self.n_power_iterations = n_power_iterations
        self._init_u(rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.normalized_weight())) + self.b


# -- generator --------------------------------------------------------------------------


class ConvBn(Module):
    def __init__(self, c_in, c_out, rng: Rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, bias=False, gain=np.sqrt(2))
        self.bn = BatchNorm(c_out)

    def forward(self, x, upsample: bool = False):
        if upsample:
            return self.bn(T.upsample_conv2d(x, self.conv.w))
        return self.bn(self.conv(x))


class ResBlock(Module):
    def __init__(self, channels, rng: Rng):
        super().__init__()
        self.c1 = ConvBn(channels, channels, rng)
        self.c2 = ConvBn(channels, channels, rng)

    def body(self, x):
        return self.c2(T.relu(self.c1(x)))


class ImageHead(Module):
    """3x3 convolution to RGB followed by tanh."""

    def __init__(self, channels, rng: Rng):
        super().__init__()
        self.conv = Conv2d(channels, 3, 3, rng)

    def forward(self, h):
        return T.tanh(self.conv(h))


class InitStage(Module):
    def __init__(self, in_dim: int, base: int, n_up: int, rng: Rng):
        super().__init__()
        self.c0 = base * 2 ** n_up
        self.fc = Linear(in_dim, self.c0 * 16, rng, bias=False, gain=np.sqrt(2))
        self.bn = BatchNorm(self.c0 * 16)
        for j in range(1, n_up + 1):
            setattr(self, f"up{j}", ConvBn(self.c0 >> (j - 1), self.c0 >> j, rng))


class NextStage(Module):
    """Joins ``[h, word context]`` (``2 * c_in`` channels) down to ``c_out``, then residual blocks and an up-block."""

    def __init__(self, c_in: int, c_out: int, n_res: int, rng: Rng):
        super().__init__()
        self.n_res = n_res
        self.join = ConvBn(2 * c_in, c_out, rng)
        for j in range(n_res):
            setattr(self, f"res{j}", ResBlock(c_out, rng))
        self.up = ConvBn(c_out, c_out, rng)


class Generator(Module):
    """Conditioning augmentation, stage networks and image heads.

    Attention modules sit in the top-level ``se``, ``lattn`` and ``wattn``
    dictionaries so their parameters are named ``se.<site>.w1``,
    ``lattn.<site>.wq`` and ``wattn.<stage>.uproj``.

    Stages 0 and 1 carry ``base`` channels; the last, highest-resolution
    stage carries ``final_channels`` (default ``base // 2``).
    """

    def __init__(self, variant: ModelVariant, text_dim: int, rng: Rng,
                 cond_dim: int | None = None, nz: int = 100, base: int = 32,
                 n_res: int = 2, local_k: int = 3, final_channels: int | None = None):
        super().__init__()
        self.variant = variant
        self.text_dim = text_dim
        self.nz = nz
        self.cond_dim = cond_dim or text_dim // 2
        self.n_up = int(np.log2(variant.stage_h0 // 4))
        self.ca = CondAugment(text_dim, self.cond_dim, rng.child("ca"))
        self.f0 = InitStage(self.cond_dim + nz, base, self.n_up, rng.child("f0"))
        self.channels = (base, base, final_channels or max(base // 2, 1))
        self.f1 = NextStage(base, self.channels[1], n_res, rng.child("f1"))
        self.f2 = NextStage(self.channels[1], self.channels[2], n_res, rng.child("f2"))
        self.g0 = ImageHead(self.channels[0], rng.child("g0"))
        self.g1 = ImageHead(self.channels[1], rng.child("g1"))
        self.g2 = ImageHead(self.channels[2], rng.child("g2"))

        se_rng = rng.child("se")
        self.se = ModuleDict()
        for j in range(1, self.n_up + 1):
            self.se[f"f0_up{j}"] = SeBlock(self.f0.c0 >> j, variant.r, se_rng.child(j))
        for i in (1, 2):
            for j in range(n_res):
                self.se[f"f{i}_res{j}"] = SeBlock(self.channels[i], variant.r, se_rng.child(i, j))
            self.se[f"f{i}_up"] = SeBlock(self.channels[i], variant.r, se_rng.child(i, "up"))

        self.lattn = ModuleDict()
        for site in variant.placement:
            if site.startswith("f0_up"):
                j = int(site[len("f0_up"):])
                if not 1 <= j <= self.n_up:
                    raise ValueError(f"no up-block for local attention site {site!r}")
                ch = self.f0.c0 >> j
            elif site in ("f1_attn", "f2_attn"):
                ch = self.channels[int(site[1]) - 1]
            else:
                raise ValueError(f"unknown local attention site {site!r}")
            self.lattn[site] = LocalSelfAttention(ch, ch, local_k, rng.child("lattn", site))

        self.wattn = ModuleDict()
        self.wattn["1"] = WordAttention(self.channels[0], text_dim, rng.child("wattn", 1))
        self.wattn["2"] = WordAttention(self.channels[1], text_dim, rng.child("wattn", 2))

    def _local(self, site: str, h: Tensor) -> Tensor:
        return h + self.lattn[site](h) if site in self.lattn else h

    def _up(self, block: ConvBn, site: str, h: Tensor) -> Tensor:
        h = T.relu(block(h, upsample=True))
        return self.se[site](h)

    def _next(self, i: int, stage: NextStage, h: Tensor, words: Tensor, mask) -> Tensor:
        ctx = self.wattn[str(i)](h, words, mask)
        h = T.relu(stage.join(T.concat([self._local(f"f{i}_attn", h), ctx], axis=1)))
        for j in range(stage.n_res):
            body = getattr(stage, f"res{j}").body(h)
            h = h + self.se[f"f{i}_res{j}"](body)
        return self._up(stage.up, f"f{i}_up", h)

    def forward(self, words: Tensor, sentence: Tensor, mask, noise: np.ndarray,
                rng: Rng | None = None, eps: np.ndarray | None = None):
        """Return ``([StageState] * 3, kl)``."""
        if sentence.shape[-1] != self.text_dim or words.shape[1] != self.text_dim:
            raise ValueError(f"text features must have dim {self.text_dim}")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[-1] != self.nz or noise.shape[0] != sentence.shape[0]:
            raise ValueError(f"noise must be [N, {self.nz}] matching the caption batch")
        c, kl = self.ca(sentence, rng, eps)
        x = T.concat([c, Tensor(noise)], axis=1)
        h = T.relu(self.f0.bn(self.f0.fc(x)))
        h = T.reshape(h, (-1, self.f0.c0, 4, 4))
        for j in range(1, self.n_up + 1):
            h = self._local(f"f0_up{j}", self._up(getattr(self.f0, f"up{j}"), f"f0_up{j}", h))
        h0 = h
        h1 = self._next(1, self.f1, h0, words, mask)
        h2 = self._next(2, self.f2, h1, words, mask)
        stages = [StageState(h0, self.g0(h0)), StageState(h1, self.g1(h1)), StageState(h2, self.g2(h2))]
        return stages, kl


# -- discriminators ------------------------------------------------------------------------


class Discriminator(Module):
    """Strided SN-conv trunk down to 4x4 with an unconditional and a sentence-conditioned logit."""

    def __init__(self, resolution: int, text_dim: int, rng: Rng, ndf: int = 16, n_power_iterations: int = 1):
        super().__init__()
        self.n_down = int(np.log2(resolution // 4))
        if 4 * 2 ** self.n_down != resolution:
            raise ValueError("discriminator resolution must be 4 * 2^k")
        self.resolution = resolution
        c = 3
        for j in range(self.n_down):
            setattr(self, f"down{j}", SNConv2d(c, ndf << j, 3, rng, stride=2, n_power_iterations=n_power_iterations))
            c = ndf << j
        self.channels = c
        self.uncond = SNLinear(c * 16, 1, rng, n_power_iterations)
        self.joint = SNConv2d(c + text_dim, c, 3, rng, n_power_iterations=n_power_iterations)
        self.cond = SNLinear(c * 16, 1, rng, n_power_iterations)

    def features(self, img: Tensor) -> Tensor:
        h = img if isinstance(img, Tensor) else Tensor(img)
        if h.shape[-1] != self.resolution:
            raise ValueError(f"discriminator expects {self.resolution}px images, got {h.shape[-1]}")
        for j in range(self.n_down):
            h = T.leaky_relu(getattr(self, f"down{j}")(h))
        return h

    def uncond_logit(self, feats: Tensor) -> Tensor:
        return T.reshape(self.uncond(T.reshape(feats, (feats.shape[0], -1))), (-1,))

    def cond_logit(self, feats: Tensor, sentence: Tensor) -> Tensor:
        N = feats.shape[0]
        s = T.reshape(sentence, (N, -1, 1, 1))
        s = T.broadcast_to(s, (N, s.shape[1], 4, 4))
        h = T.leaky_relu(self.joint(T.concat([feats, s], axis=1)))
        return T.reshape(self.cond(T.reshape(h, (N, -1))), (-1,))


# -- objectives ------------------------------------------------------------------------------


def generator_stage_loss(uncond_logits: Tensor, cond_logits: Tensor) -> Tensor:
    """-1/2 E log D(y) - 1/2 E log D(y, s), from discriminator logits."""
    return -(T.mean(T.log_sigmoid(uncond_logits)) + T.mean(T.log_sigmoid(cond_logits))) * 0.5


def generator_loss(stage_logits, damsm: Tensor | float, kl: Tensor | float,
                   lam: float, kl_weight: float = 1.0) -> Tensor:
    """Adversarial terms summed over all stages + lam * DAMSM + kl_weight * KL."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(stage_logits) != 3:
        raise ValueError("generator loss expects logits for all three stages")
    total = T.as_tensor(0.0)
    for u, c in stage_logits:
        total = total + generator_stage_loss(u, c)
    return total + T.as_tensor(damsm) * lam + T.as_tensor(kl) * kl_weight


def _bce(logits: Tensor, target: int) -> Tensor:
    return -T.mean(T.log_sigmoid(logits if target else -logits))


def discriminator_loss_terms(real_u, fake_u, real_c, fake_c, wrong_c) -> tuple[Tensor, Tensor]:
    """(unconditional, conditional) cross-entropy terms, each a mean over its cases."""
    uncond = (_bce(real_u, 1) + _bce(fake_u, 0)) * 0.5
    cond = (_bce(real_c, 1) + _bce(fake_c, 0) + _bce(wrong_c, 0)) * (1.0 / 3.0)
    return uncond, cond


def discriminator_loss(real_u, fake_u, real_c, fake_c, wrong_c) -> Tensor:
    uncond, cond = discriminator_loss_terms(real_u, fake_u, real_c, fake_c, wrong_c)
    return uncond + cond
