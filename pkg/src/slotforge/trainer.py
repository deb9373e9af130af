"""End-to-end optimization loop.

Per image: mask tokens, project through the shared key/value pair, run one
randomly chosen head (or all heads fused, for the ablation), decode, and
take the mean squared error against the original unmasked tokens. Batch
gradients are the mean of per-image gradients, reduced in index order so
results are identical however many worker threads run the forward passes.
Adam with linear warmup into exponential decay drives the updates.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import HeadBank, init_slots, run_head_projected
from .autodiff import Parameter, Tensor
from .config import TrainConfig
from .decoder import DecoderParams, decode, reconstruction_loss
from .errors import ContractError, NumericError
from .features import FeatureMap
from .fusion import fuse_for_training
from .masking import MaskingConfig, masked_map
from .model import build_model, model_parameters, save_model

THREADS_ENV = "SLOTFORGE_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise ContractError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_base over the first warmup fraction of steps,
    then exponential decay reaching lr_base * decay_rate at the horizon."""
    if step > total_steps:
        raise ContractError(f"step {step} beyond total {total_steps}")
    horizon = cfg.decay_horizon if cfg.decay_horizon > 0 else total_steps
    warm = int(round(cfg.warmup_frac * horizon))
    if step < warm:
        return cfg.lr_base * (step + 1) / warm
    span = max(1, horizon - warm)
    return cfg.lr_base * cfg.decay_rate ** ((step - warm) / span)


class Adam:
    """Standard Adam with bias correction; one moment pair per parameter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter], grads: list[np.ndarray | None],
             lr: float, t: int) -> None:
        for p, g in zip(params, grads):
            if not p.trainable:
                continue
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    total_steps: int
    step: int = 0
    adam: Adam = field(default_factory=Adam)
    head_counts: dict[int, int] = field(default_factory=dict)
    rng_heads: np.random.Generator = None
    rng_mask: np.random.Generator = None
    rng_init: np.random.Generator = None
    rng_shuffle: np.random.Generator = None

    @classmethod
    def create(cls, seed: "int | np.random.SeedSequence",
               total_steps: int) -> "TrainState":
        ss = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(seed)
        streams = ss.spawn(4)
        return cls(total_steps=total_steps,
                   rng_heads=np.random.default_rng(streams[0]),
                   rng_mask=np.random.default_rng(streams[1]),
                   rng_init=np.random.default_rng(streams[2]),
                   rng_shuffle=np.random.default_rng(streams[3]))


def _image_loss(fmap: FeatureMap, bank: HeadBank, decoder: DecoderParams,
                mask_cfg: MaskingConfig, mask_seed: int,
                head_j: int | None, noises: list[np.ndarray]) -> Tensor:
    """Forward pass for one image; the loss targets the unmasked tokens."""
    masked, _ = masked_map(fmap, mask_cfg, random_seed=mask_seed)
    feats_k, feats_v = bank.project(masked)
    if head_j is not None:
        slots = init_slots(bank, head_j, noise=noises[0])
        final, _ = run_head_projected(feats_k, feats_v, bank, head_j,
                                      initial=slots)
    else:
        sets = []
        for j in range(bank.h):
            s0 = init_slots(bank, j, noise=noises[j])
            sj, _ = run_head_projected(feats_k, feats_v, bank, j, initial=s0)
            sets.append(sj)
        final = fuse_for_training(sets, reference=0)
    scene = decode(final, decoder)
    return reconstruction_loss(scene, fmap)


def train_step(batch: list[FeatureMap], bank: HeadBank, decoder: DecoderParams,
               state: TrainState, cfg: TrainConfig) -> float:
    """One optimization step over a batch; returns the mean loss."""
    b = len(batch)
    mask_cfg = cfg.masking()
    params = model_parameters(bank, decoder)
    tensors = [p.tensor for p in params]

    # Draw all per-image randomness up front, in index order, so worker
    # scheduling cannot perturb the run.
    if cfg.head_select == "random":
        if cfg.per_batch_head:
            shared = int(state.rng_heads.integers(bank.h))
            head_js: list[int | None] = [shared] * b
        else:
            head_js = [int(j) for j in state.rng_heads.integers(bank.h, size=b)]
        for j in head_js:
            state.head_counts[j] = state.head_counts.get(j, 0) + 1
        noise_counts = 1
    else:
        head_js = [None] * b
        noise_counts = bank.h
    noises = [[state.rng_init.standard_normal((bank.k_slots, bank.d_slots))
               for _ in range(noise_counts)] for _ in range(b)]
    mask_seeds = [int(s) for s in
                  state.rng_mask.integers(0, 2 ** 31 - 1, size=b)]

    def run_one(i: int) -> tuple[float, list[np.ndarray | None]]:
        loss = _image_loss(batch[i], bank, decoder, mask_cfg, mask_seeds[i],
                           head_js[i], noises[i])
        grad_map = ad.gradient_map(loss)
        return loss.item(), [grad_map.get(id(t)) for t in tensors]

    workers = min(worker_count(), b)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(b)))
    else:
        results = [run_one(i) for i in range(b)]

    losses = [loss for loss, _ in results]
    if not all(math.isfinite(x) for x in losses):
        _diagnose_nan(batch, bank, decoder, mask_cfg, mask_seeds, head_js,
                      noises, losses)

    mean_grads: list[np.ndarray | None] = [None] * len(params)
    for _, grads in results:  # fixed index order: deterministic reduction
        for k, g in enumerate(grads):
            if g is None:
                continue
            scaled = g / b
            mean_grads[k] = scaled if mean_grads[k] is None else mean_grads[k] + scaled

    lr = lr_at(state.step, state.total_steps, cfg)
    state.adam.step(params, mean_grads, lr, state.step + 1)
    state.step += 1
    return float(np.mean(losses))


def _diagnose_nan(batch, bank, decoder, mask_cfg, mask_seeds, head_js,
                  noises, losses) -> None:
    """Re-run the first non-finite image with per-op checks to name the op."""
    bad = next(i for i, x in enumerate(losses) if not math.isfinite(x))
    previous = ad.set_finite_checks(True)
    try:
        _image_loss(batch[bad], bank, decoder, mask_cfg, mask_seeds[bad],
                    head_js[bad], noises[bad])
    finally:
        ad.set_finite_checks(previous)
    raise NumericError(
        f"non-finite loss on batch element {bad} but no op flagged; "
        "inputs may already contain NaN/Inf")


def train(dataset: list[FeatureMap], cfg: TrainConfig,
          out_dir: str | None = None
          ) -> tuple[HeadBank, DecoderParams, list[tuple[int, float, float]]]:
    """Full run over the dataset; deterministic given cfg.seed.

    Returns the trained modules plus the loss curve as (step, loss, lr)
    rows. With ``out_dir`` set, writes a checkpoint per epoch, a final
    ``model.sltf`` and the loss curve CSV.
    """
    if not dataset:
        raise ContractError("train needs a nonempty dataset")
    d_feats = dataset[0].d_feats
    n_patches = dataset[0].n_patches
    for fm in dataset:
        if fm.d_feats != d_feats or fm.n_patches != n_patches:
            raise ContractError("all feature maps must share grid and width")

    params_ss, state_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    bank, decoder = build_model(cfg, n_patches, d_feats,
                                np.random.default_rng(params_ss))

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps > 0:
        total = min(total, cfg.max_steps)
    state = TrainState.create(state_ss, total)

    curve: list[tuple[int, float, float]] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        order = state.rng_shuffle.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            if state.step >= total:
                done = True
                break
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            lr = lr_at(state.step, total, cfg)
            loss = train_step(batch, bank, decoder, state, cfg)
            curve.append((state.step - 1, loss, lr))
        if out_dir is not None:
            save_model(bank, decoder,
                       os.path.join(out_dir, f"ckpt_epoch{epoch:04d}.sltf"))
    if out_dir is not None:
        save_model(bank, decoder, os.path.join(out_dir, "model.sltf"))
        with open(os.path.join(out_dir, "loss_curve.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr"])
            for row in curve:
                writer.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8g}"])
    return bank, decoder, curve
