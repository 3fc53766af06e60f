"""Three-stage generation and the part-aware diffuse-denoise editor.

Generation: ancestral sampling of the global latent, then of the latent
points with an exponential moving average over the per-step segmentation
predictions (the smoothed probabilities at step 0 give the final labels),
then conditional decoding.

Editing: latents of a frozen part are re-imposed at every reverse step as a
fresh forward perturbation of the original latents, while the remaining
latents are re-noised to a chosen depth and re-generated; latent points of
the free region that get predicted as the frozen part are substituted by
randomly chosen free latents so the frozen part is not duplicated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledPointCloud, PartVocabulary, PointCloudSet
from .diffusion import (
    GlobalDenoiserParams,
    NoiseSchedule,
    PointDenoiserParams,
    predict_global,
    predict_point,
    q_sample,
)
from .errors import PartAbsent, ShapeMismatch, TauOutOfRange
from .nn import one_hot, softmax
from .vae import VaeParams, decode_points, encode_means

DEFAULT_EMA_ALPHA = 0.1


@dataclass
class EmaLabelState:
    """Running per-point label probabilities; rows stay on the simplex."""

    alpha: float
    probs: np.ndarray  # (n, c)

    @classmethod
    def uniform(cls, n: int, c: int, alpha: float = DEFAULT_EMA_ALPHA):
        return cls(alpha, np.full((n, c), 1.0 / c))


def ema_update(state: EmaLabelState, new_probs: np.ndarray) -> EmaLabelState:
    """Convex blend: alpha * newest prediction + (1 - alpha) * running value."""
    if new_probs.shape != state.probs.shape:
        raise ShapeMismatch(
            f"probability shape {new_probs.shape} != state {state.probs.shape}"
        )
    return EmaLabelState(
        state.alpha, state.alpha * new_probs + (1.0 - state.alpha) * state.probs
    )


def ema_replay(alpha: float, history, init: np.ndarray) -> np.ndarray:
    """Closed-form value after folding ``history`` (oldest first) into ``init``."""
    k = len(history)
    out = (1.0 - alpha) ** k * init
    for i, probs in enumerate(history):
        out = out + alpha * (1.0 - alpha) ** (k - 1 - i) * probs
    return out


def ddpm_step(schedule: NoiseSchedule, x_t, t: int, eps_hat, rng):
    """One reverse step; uses the posterior variance, no noise at t = 1."""
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bars[t]
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    abar_prev = schedule.alpha_bars[t - 1]
    sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta)
    return mean + sigma * rng.standard_normal(np.shape(x_t))


def sample_chain(denoise_fn, schedule: NoiseSchedule, shape, rng) -> np.ndarray:
    """Ancestral sampling from pure noise with ``denoise_fn(x_t, t) -> eps_hat``."""
    x = rng.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        x = ddpm_step(schedule, x, t, denoise_fn(x, t), rng)
    return x


def sample_global(gd: GlobalDenoiserParams, schedule: NoiseSchedule, rng) -> np.ndarray:
    return sample_chain(lambda z, t: predict_global(gd, z, t), schedule, (gd.d_z,), rng)


def sample_points(
    pd: PointDenoiserParams,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    n: int,
    rng,
    ema_alpha: float = DEFAULT_EMA_ALPHA,
    log_steps: bool = False,
):
    """Ancestral sampling of latent points with EMA-smoothed label predictions.

    Returns (h0, labels, probs) or, with ``log_steps``, additionally the
    per-step softmax predictions (oldest first) for replay checks.
    """
    h = rng.standard_normal((n, pd.d_h))
    state = EmaLabelState.uniform(n, pd.c, ema_alpha)
    history = [] if log_steps else None
    for t in range(schedule.steps, 0, -1):
        eps_hat, logits = predict_point(pd, h, t, z0)
        probs = softmax(logits)
        state = ema_update(state, probs)
        if log_steps:
            history.append(probs)
        h = ddpm_step(schedule, h, t, eps_hat, rng)
    labels = state.probs.argmax(axis=1).astype(np.int32)  # ties -> lowest part id
    if log_steps:
        return h, labels, state.probs, history
    return h, labels, state.probs


def generate(
    vae: VaeParams,
    gd: GlobalDenoiserParams,
    pd: PointDenoiserParams,
    schedule: NoiseSchedule,
    vocab: PartVocabulary,
    n: int,
    count: int,
    seed: int = 0,
    soft_labels: bool = False,
    name: str = "",
) -> PointCloudSet:
    """Sample ``count`` labeled clouds of ``n`` points each.

    Each sample runs on its own seed-sequence child, so samples are
    reproducible individually and the set is reproducible as a whole.
    With ``soft_labels`` the decoder is conditioned on the smoothed
    probabilities instead of the one-hot argmax labels.
    """
    children = np.random.SeedSequence(seed).spawn(max(count, 1))
    clouds = []
    for k in range(count):
        rng = np.random.default_rng(children[k])
        z0 = sample_global(gd, schedule, rng)
        h0, labels, probs = sample_points(pd, schedule, z0, n, rng)
        cond = probs if soft_labels else one_hot(labels, vae.c)
        points = decode_points(vae, h0, cond, z0)
        clouds.append(LabeledPointCloud(points, labels, vocab))
    return PointCloudSet(tuple(clouds), vocab, name or f"generated-{seed}")


def reconstruct_cloud(vae: VaeParams, cloud: LabeledPointCloud) -> LabeledPointCloud:
    """Posterior-mean encode/decode round trip with the true labels."""
    enc = one_hot(cloud.labels, vae.c)
    z0, h0 = encode_means(vae, cloud.points, enc)
    points = decode_points(vae, h0, enc, z0)
    return LabeledPointCloud(points, cloud.labels, cloud.vocab)


@dataclass(frozen=True)
class EditRequest:
    """Freeze one part of a cloud and regenerate the rest from depth tau."""

    cloud: LabeledPointCloud
    freeze_part: int
    tau: int
    seed: int = 0
    ema_alpha: float = DEFAULT_EMA_ALPHA


def edit(
    vae: VaeParams,
    pd: PointDenoiserParams,
    schedule: NoiseSchedule,
    request: EditRequest,
    trace: list | None = None,
):
    """Part-preserving shape edit; returns the edited labeled cloud.

    tau = 0 degenerates to the plain reconstruction of the input, as does a
    frozen part covering every point.  Frozen points keep their input labels
    exactly.
    """
    cloud = request.cloud
    p = request.freeze_part
    if p not in cloud.part_set():
        raise PartAbsent(f"part {p} not present in the input cloud")
    if not 0 <= request.tau < schedule.steps:
        raise TauOutOfRange(
            f"tau {request.tau} outside [0, {schedule.steps})"
        )
    rng = np.random.default_rng(np.random.SeedSequence(request.seed, spawn_key=(3,)))
    frozen = cloud.labels == p  # (n,) boolean mask of the fix-shape part
    enc = one_hot(cloud.labels, vae.c)
    z0, h0 = encode_means(vae, cloud.points, enc)

    if request.tau == 0:
        points = decode_points(vae, h0, enc, z0)
        return LabeledPointCloud(points, cloud.labels, cloud.vocab)

    h = q_sample(schedule, h0, request.tau, rng.standard_normal(h0.shape))
    probs = enc.copy()
    for t in range(request.tau, 0, -1):
        eps_hat, logits = predict_point(pd, h, t, z0)
        h = ddpm_step(schedule, h, t, eps_hat, rng)
        probs = request.ema_alpha * softmax(logits) + (1.0 - request.ema_alpha) * probs
        pred = probs.argmax(axis=1)

        # free latents predicted as the frozen part get replaced by random
        # free latents that are not, so the frozen part is not regrown
        wrong = (~frozen) & (pred == p)
        if wrong.any():
            donors = np.flatnonzero((~frozen) & (pred != p))
            if donors.size:
                take = rng.choice(donors, size=int(wrong.sum()), replace=donors.size < int(wrong.sum()))
                h[wrong] = h[take]
                probs[wrong] = probs[take]

        # re-impose the frozen part at the current noise level
        if t - 1 >= 1:
            noise = rng.standard_normal(h0.shape)
            h_star = q_sample(schedule, h0, t - 1, noise)
        else:
            noise = np.zeros_like(h0)
            h_star = h0
        h[frozen] = h_star[frozen]
        probs[frozen] = enc[frozen]
        if trace is not None:
            trace.append({"t": t - 1, "noise": noise, "h": h.copy()})

    labels = probs.argmax(axis=1).astype(np.int32)
    labels[frozen] = cloud.labels[frozen]
    points = decode_points(vae, h, one_hot(labels, vae.c), z0)
    return LabeledPointCloud(points, labels, cloud.vocab)
