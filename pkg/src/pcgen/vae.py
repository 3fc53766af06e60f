"""Stage-1 model: a hierarchical conditional VAE over labeled point clouds.

A permutation-invariant global encoder maps the cloud to a diagonal
Gaussian over the global latent; a pointwise encoder conditioned on the
per-point one-hot labels and the global latent produces per-point latent
Gaussians; the decoder reconstructs coordinates from the per-point latents,
labels, global latent and a max-pooled context.  Training maximizes the
usual evidence lower bound: unit-variance Gaussian reconstruction (MSE)
plus weighted closed-form KL terms.

Unlabeled clouds are handled by zero label encodings of the same shape, so
semi-supervised training changes conditioning values but no code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .nn import (
    AdamState,
    MlpStack,
    adam_step,
    backward,
    forward,
    max_pool_backward,
    max_pool_points,
    one_hot,
)


@dataclass
class VaeParams:
    """All trainable pieces of the stage-1 model."""

    d: int
    c: int
    d_z: int
    d_h: int
    hidden: int
    enc_point: MlpStack    # (d) -> (hidden), pointwise, feeds the global pool
    enc_head: MlpStack     # (hidden) -> (2 d_z): global mu, log sigma
    point_enc: MlpStack    # (d + c + d_z) -> (2 d_h) per point
    dec_ctx: MlpStack      # (d_h + c + d_z) -> (hidden) per point, pooled to context
    dec_out: MlpStack      # (d_h + c + d_z + hidden) -> (d) per point

    @classmethod
    def create(cls, d, c, d_z=16, d_h=4, hidden=64, seed=0) -> "VaeParams":
        # the two posterior heads start as the zero map so both posteriors
        # begin at N(0, I): nonzero log-sigma init feeds exp() and can blow
        # up the first epochs at realistic widths
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return cls(
            d=d, c=c, d_z=d_z, d_h=d_h, hidden=hidden,
            enc_point=MlpStack.create((d, hidden, hidden), rng),
            enc_head=MlpStack.create((hidden, hidden, 2 * d_z), rng, zero_last=True),
            point_enc=MlpStack.create(
                (d + c + d_z, hidden, hidden, 2 * d_h), rng, zero_last=True
            ),
            dec_ctx=MlpStack.create((d_h + c + d_z, hidden, hidden), rng),
            dec_out=MlpStack.create((d_h + c + d_z + hidden, hidden, hidden, d), rng),
        )

    def params(self) -> dict:
        out = {}
        for name in ("enc_point", "enc_head", "point_enc", "dec_ctx", "dec_out"):
            out.update(getattr(self, name).params(name))
        return out

    def load(self, tensors: dict) -> None:
        for name in ("enc_point", "enc_head", "point_enc", "dec_ctx", "dec_out"):
            getattr(self, name).load(name, tensors)

    def meta(self) -> dict:
        return {
            "d": self.d, "c": self.c, "d_z": self.d_z,
            "d_h": self.d_h, "hidden": self.hidden,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "VaeParams":
        return cls.create(
            d=int(meta["d"]), c=int(meta["c"]), d_z=int(meta["d_z"]),
            d_h=int(meta["d_h"]), hidden=int(meta["hidden"]),
        )


def _tile(vec: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(vec, (n, vec.shape[0]))


def encode_global(vae: VaeParams, points: np.ndarray):
    """(mu_z, logsig_z); exactly permutation-invariant over points."""
    feat, _ = forward(vae.enc_point, points)
    pooled, _ = max_pool_points(feat)
    out, _ = forward(vae.enc_head, pooled[None, :])
    return out[0, : vae.d_z], out[0, vae.d_z :]


def encode_points(vae: VaeParams, points, y1h, z0):
    """Per-point (mu_h, logsig_h); each row depends on its own point only."""
    n = points.shape[0]
    if y1h.shape != (n, vae.c):
        raise ShapeMismatch(f"label encoding shape {y1h.shape} != ({n}, {vae.c})")
    x_in = np.concatenate([points, y1h, _tile(z0, n)], axis=1)
    out, _ = forward(vae.point_enc, x_in)
    return out[:, : vae.d_h], out[:, vae.d_h :]


def decode_points(vae: VaeParams, h, y1h, z0) -> np.ndarray:
    """Reconstruct coordinates from per-point latents, labels and global latent."""
    n = h.shape[0]
    if y1h.shape != (n, vae.c):
        raise ShapeMismatch(f"label encoding shape {y1h.shape} != ({n}, {vae.c})")
    ctx_in = np.concatenate([h, y1h, _tile(z0, n)], axis=1)
    ctx_feat, _ = forward(vae.dec_ctx, ctx_in)
    ctx, _ = max_pool_points(ctx_feat)
    out_in = np.concatenate([ctx_in, _tile(ctx, n)], axis=1)
    xhat, _ = forward(vae.dec_out, out_in)
    return xhat


def encode_means(vae: VaeParams, cloud_points, y1h):
    """Deterministic (z0, h0) from posterior means; used for stage-2 latents."""
    mu_z, _ = encode_global(vae, cloud_points)
    mu_h, _ = encode_points(vae, cloud_points, y1h, mu_z)
    return mu_z, mu_h


def reconstruct(vae: VaeParams, cloud_points, y1h) -> np.ndarray:
    z0, h0 = encode_means(vae, cloud_points, y1h)
    return decode_points(vae, h0, y1h, z0)


def _kl_terms(mu, logsig):
    """Closed-form KL(N(mu, e^logsig) || N(0, 1)) summed over all entries."""
    value = 0.5 * float(np.sum(mu * mu + np.exp(2.0 * logsig) - 1.0 - 2.0 * logsig))
    dmu = mu
    dlogsig = np.exp(2.0 * logsig) - 1.0
    return value, dmu, dlogsig


def elbo_loss(vae: VaeParams, lambda_z: float, lambda_h: float, points, y1h, rng):
    """Negated ELBO (to minimize) with exact gradients for every parameter.

    Returns (loss, {"recon", "kl_global", "kl_point"}, grads dict).
    """
    n, d = points.shape
    d_z, d_h, c = vae.d_z, vae.d_h, vae.c

    feat, cache_ep = forward(vae.enc_point, points)
    pooled, pool_idx = max_pool_points(feat)
    head, cache_eh = forward(vae.enc_head, pooled[None, :])
    mu_z, logsig_z = head[0, :d_z], head[0, d_z:]
    eps_z = rng.standard_normal(d_z)
    z0 = mu_z + np.exp(logsig_z) * eps_z

    pe_in = np.concatenate([points, y1h, _tile(z0, n)], axis=1)
    pe_out, cache_pe = forward(vae.point_enc, pe_in)
    mu_h, logsig_h = pe_out[:, :d_h], pe_out[:, d_h:]
    eps_h = rng.standard_normal((n, d_h))
    h = mu_h + np.exp(logsig_h) * eps_h

    ctx_in = np.concatenate([h, y1h, _tile(z0, n)], axis=1)
    ctx_feat, cache_cf = forward(vae.dec_ctx, ctx_in)
    ctx, ctx_idx = max_pool_points(ctx_feat)
    out_in = np.concatenate([ctx_in, _tile(ctx, n)], axis=1)
    xhat, cache_out = forward(vae.dec_out, out_in)

    recon = float(np.mean((xhat - points) ** 2))
    kl_z, dmu_z_kl, dlogsig_z_kl = _kl_terms(mu_z, logsig_z)
    kl_h, dmu_h_kl, dlogsig_h_kl = _kl_terms(mu_h, logsig_h)
    loss = recon + lambda_z * kl_z + lambda_h * kl_h

    # --- backward ---
    dxhat = 2.0 * (xhat - points) / (n * d)
    g_out, d_out_in = backward(vae.dec_out, cache_out, dxhat)
    dh = d_out_in[:, :d_h].copy()
    dz0 = d_out_in[:, d_h + c : d_h + c + d_z].sum(axis=0)
    dctx = d_out_in[:, d_h + c + d_z :].sum(axis=0)

    g_cf, d_ctx_in = backward(
        vae.dec_ctx, cache_cf, max_pool_backward(dctx, ctx_idx, n)
    )
    dh += d_ctx_in[:, :d_h]
    dz0 += d_ctx_in[:, d_h + c :].sum(axis=0)

    dmu_h = dh + lambda_h * dmu_h_kl
    dlogsig_h = dh * eps_h * np.exp(logsig_h) + lambda_h * dlogsig_h_kl
    g_pe, d_pe_in = backward(
        vae.point_enc, cache_pe, np.concatenate([dmu_h, dlogsig_h], axis=1)
    )
    dz0 += d_pe_in[:, d + c :].sum(axis=0)

    dmu_z = dz0 + lambda_z * dmu_z_kl
    dlogsig_z = dz0 * eps_z * np.exp(logsig_z) + lambda_z * dlogsig_z_kl
    g_eh, d_pool = backward(
        vae.enc_head, cache_eh, np.concatenate([dmu_z, dlogsig_z])[None, :]
    )
    g_ep, _ = backward(
        vae.enc_point, cache_ep, max_pool_backward(d_pool[0], pool_idx, n)
    )

    grads = {}
    for prefix, stack_grads in (
        ("enc_point", g_ep), ("enc_head", g_eh), ("point_enc", g_pe),
        ("dec_ctx", g_cf), ("dec_out", g_out),
    ):
        for i, (dw, db) in enumerate(stack_grads):
            grads[f"{prefix}.{i}.w"] = dw
            grads[f"{prefix}.{i}.b"] = db
    parts = {"recon": recon, "kl_global": kl_z, "kl_point": kl_h}
    return loss, parts, grads


@dataclass
class VaeTrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    lambda_z: float = 1e-3
    lambda_h: float = 1e-3
    seed: int = 0
    semi_supervised: bool = False
    labeled_fraction: float = 1.0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def choose_labeled(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic boolean mask marking round(fraction * n) clouds as labeled."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1000,)))
    mask = np.zeros(n, dtype=bool)
    k = int(round(fraction * n))
    mask[rng.permutation(n)[:k]] = True
    return mask


def _label_encodings(clouds, c, labeled):
    encs = []
    for cloud, is_labeled in zip(clouds, labeled):
        if is_labeled:
            encs.append(one_hot(cloud.labels, c))
        else:
            encs.append(np.zeros((cloud.n, c)))
    return encs


def train_vae(vae: VaeParams, dataset, config: VaeTrainConfig, labeled=None):
    """Train in place; returns (vae, curve) with one row of mean losses per epoch."""
    clouds = list(dataset)
    if not clouds:
        raise EmptyDataset("VAE training needs at least one cloud")
    if labeled is None:
        if config.semi_supervised:
            labeled = choose_labeled(len(clouds), config.labeled_fraction, config.seed)
        else:
            labeled = np.ones(len(clouds), dtype=bool)
    encs = _label_encodings(clouds, vae.c, labeled)

    params = vae.params()
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(clouds))
        sums = {"total": 0.0, "recon": 0.0, "kl_global": 0.0, "kl_point": 0.0}
        for i in order:
            loss, parts, grads = elbo_loss(
                vae, config.lambda_z, config.lambda_h,
                clouds[int(i)].points, encs[int(i)], rng,
            )
            adam_step(adam, params, grads)
            sums["total"] += loss
            for k, v in parts.items():
                sums[k] += v
        curve.append(
            {"epoch": epoch, **{k: v / len(clouds) for k, v in sums.items()}}
        )
    return vae, curve
