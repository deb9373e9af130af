"""Multi-query slot attention: h query heads over one shared key/value pair.

Each head owns its slot initialization statistics, query projection, GRU
and MLP; only the key and value projections (and the input normalization)
are shared. Attention softmaxes across slots per patch so slots compete
for patches, then the per-slot weights renormalize across patches to form
a weighted mean of the values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, Parameter, Tensor
from .errors import ContractError
from .features import FeatureMap


@dataclass
class SlotSet:
    slots: Tensor  # (K, d_slots)
    head_index: int

    @property
    def values(self) -> np.ndarray:
        return self.slots.data


@dataclass
class AttentionState:
    logits: Tensor   # (N, K) scaled dot products
    attn: Tensor     # (N, K) softmax over slots, rows sum to 1
    weights: Tensor  # (N, K) renormalized over patches, columns sum to 1
    updates: Tensor  # (K, d_slots) weighted mean of values


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class _Mlp:
    """Two-layer residual MLP applied to slots after the GRU update."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "_Mlp":
        return cls(Tensor(_glorot(rng, dim, hidden)), Tensor(np.zeros(hidden)),
                   Tensor(_glorot(rng, hidden, dim)), Tensor(np.zeros(dim)))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


class _LayerNormParams:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim))
        self.bias = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class HeadBank:
    """Parameters for h independent query heads plus the shared projections.

    The per-head parameter sets are disjoint by construction; zeroing or
    training one head never touches another.
    """

    def __init__(self, h: int, k_slots: int, d_slots: int, d_feats: int,
                 t_iters: int = 3, epsilon: float = 1e-8,
                 layer_norm: bool = True, mlp_hidden: int | None = None,
                 rng: np.random.Generator | None = None):
        if h < 1 or k_slots < 1 or d_slots < 1 or d_feats < 1:
            raise ContractError("h, k_slots, d_slots, d_feats must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.h = h
        self.k_slots = k_slots
        self.d_slots = d_slots
        self.d_feats = d_feats
        self.t_iters = t_iters
        self.epsilon = epsilon
        self.layer_norm = layer_norm
        self.mlp_hidden = mlp_hidden if mlp_hidden is not None else d_slots

        self.k_proj = Tensor(_glorot(rng, d_feats, d_slots))
        self.v_proj = Tensor(_glorot(rng, d_feats, d_slots))
        self.ln_in = _LayerNormParams(d_feats) if layer_norm else None

        init_limit = np.sqrt(6.0 / (1 + d_slots))
        self.mu: list[Tensor] = []
        self.log_sigma: list[Tensor] = []
        self.q_proj: list[Tensor] = []
        self.gru: list[GruParams] = []
        self.mlp: list[_Mlp] = []
        self.ln_slots: list[_LayerNormParams | None] = []
        self.ln_mlp: list[_LayerNormParams | None] = []
        for _ in range(h):
            self.mu.append(Tensor(rng.uniform(-init_limit, init_limit, d_slots)))
            # wide initial sampling spread: diverse slots break the symmetry
            # of the shared Gaussian quickly; sigma adapts during training
            self.log_sigma.append(Tensor(np.full(d_slots, 1.0)))
            self.q_proj.append(Tensor(_glorot(rng, d_slots, d_slots)))
            self.gru.append(GruParams.init(d_slots, rng))
            self.mlp.append(_Mlp.init(d_slots, self.mlp_hidden, rng))
            self.ln_slots.append(_LayerNormParams(d_slots) if layer_norm else None)
            self.ln_mlp.append(_LayerNormParams(d_slots) if layer_norm else None)

    # -- parameter registry -------------------------------------------------

    def shared_parameters(self) -> list[Parameter]:
        params = [Parameter(self.k_proj, "shared.k"),
                  Parameter(self.v_proj, "shared.v")]
        if self.ln_in is not None:
            params += [Parameter(self.ln_in.gain, "shared.ln.gain"),
                       Parameter(self.ln_in.bias, "shared.ln.bias")]
        return params

    def head_parameters(self, j: int) -> list[Parameter]:
        prefix = f"head{j}"
        params = [Parameter(self.mu[j], f"{prefix}.mu"),
                  Parameter(self.log_sigma[j], f"{prefix}.log_sigma"),
                  Parameter(self.q_proj[j], f"{prefix}.q")]
        params += [Parameter(t, f"{prefix}.gru.{name}")
                   for name, t in self.gru[j].tensors()]
        params += [Parameter(t, f"{prefix}.mlp.{name}")
                   for name, t in self.mlp[j].tensors()]
        if self.layer_norm:
            params += [Parameter(self.ln_slots[j].gain, f"{prefix}.ln_slots.gain"),
                       Parameter(self.ln_slots[j].bias, f"{prefix}.ln_slots.bias"),
                       Parameter(self.ln_mlp[j].gain, f"{prefix}.ln_mlp.gain"),
                       Parameter(self.ln_mlp[j].bias, f"{prefix}.ln_mlp.bias")]
        return params

    def parameters(self) -> list[Parameter]:
        params = self.shared_parameters()
        for j in range(self.h):
            params += self.head_parameters(j)
        return params

    # -- forward pieces ------------------------------------------------------

    def project(self, fmap: FeatureMap) -> tuple[Tensor, Tensor]:
        """Shared key/value projection of raw tokens (computed once per image)."""
        if fmap.d_feats != self.d_feats:
            raise ContractError(
                f"feature width {fmap.d_feats} != bank d_feats {self.d_feats}")
        x = Tensor(fmap.tokens)
        return self.project_tensor(x)

    def project_tensor(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.ln_in is not None:
            x = self.ln_in(x)
        return ad.matmul(x, self.k_proj), ad.matmul(x, self.v_proj)


def init_slots(bank: HeadBank, j: int,
               rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None) -> SlotSet:
    """Gaussian slot draw: mu[j] + exp(log_sigma[j]) * standard normal.

    The draw participates in the tape, so gradients reach mu and log_sigma.
    Pass ``noise`` to pin the draw (finite-difference tests); otherwise it
    comes from ``rng``.
    """
    if j >= bank.h:
        raise ContractError(f"head index {j} out of range for h={bank.h}")
    if noise is None:
        if rng is None:
            raise ContractError("init_slots needs an rng or explicit noise")
        noise = rng.standard_normal((bank.k_slots, bank.d_slots))
    scaled = ad.mul(ad.exp(bank.log_sigma[j]), Tensor(noise))
    return SlotSet(ad.add(bank.mu[j], scaled), j)


def evaluate_attention(features_k: Tensor, features_v: Tensor,
                       slots: SlotSet, bank: HeadBank, j: int) -> AttentionState:
    """One attention readout (logits, attn, weights, updates), no slot update."""
    s = slots.slots
    if bank.layer_norm:
        s = bank.ln_slots[j](s)
    q = ad.matmul(s, bank.q_proj[j])                      # (K, d)
    scale = 1.0 / np.sqrt(bank.d_slots)
    logits = ad.mul(ad.matmul(features_k, ad.transpose(q)), scale)  # (N, K)
    attn = ad.softmax(logits, axis=1)
    shifted = ad.add(attn, bank.epsilon)
    weights = ad.div(shifted, ad.sum_axis(shifted, axis=0, keepdims=True))
    updates = ad.matmul(ad.transpose(weights), features_v)          # (K, d)
    return AttentionState(logits, attn, weights, updates)


def attention_iteration(features_k: Tensor, features_v: Tensor,
                        slots: SlotSet, bank: HeadBank,
                        j: int) -> tuple[SlotSet, AttentionState]:
    """One slot refinement: attention readout, GRU update, residual MLP."""
    state = evaluate_attention(features_k, features_v, slots, bank, j)
    new = ad.gru_cell(slots.slots, state.updates, bank.gru[j])
    mlp_in = bank.ln_mlp[j](new) if bank.layer_norm else new
    new = ad.add(new, bank.mlp[j](mlp_in))
    return SlotSet(new, j), state


def run_head_projected(features_k: Tensor, features_v: Tensor, bank: HeadBank,
                       j: int, rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None,
                       initial: SlotSet | None = None
                       ) -> tuple[SlotSet, AttentionState]:
    """Iterate one head from its Gaussian init on pre-projected features.

    Returns the final slots and the attention state of the last iteration.
    With t_iters == 0 the initial slots come back along with one plain
    attention evaluation so callers still get a mask readout.
    """
    slots = initial if initial is not None else init_slots(bank, j, rng, noise)
    if bank.t_iters == 0:
        return slots, evaluate_attention(features_k, features_v, slots, bank, j)
    state: AttentionState | None = None
    for _ in range(bank.t_iters):
        slots, state = attention_iteration(features_k, features_v, slots, bank, j)
    return slots, state


def run_head(fmap: FeatureMap, bank: HeadBank, j: int,
             rng: np.random.Generator | None = None,
             noise: np.ndarray | None = None) -> tuple[SlotSet, AttentionState]:
    """Project features through the shared pair, then iterate head j."""
    features_k, features_v = bank.project(fmap)
    return run_head_projected(features_k, features_v, bank, j, rng, noise)


def run_all_heads(fmap: FeatureMap, bank: HeadBank, rng: np.random.Generator
                  ) -> list[tuple[SlotSet, AttentionState]]:
    """All heads on one shared projection; head j uses the j-th spawned
    rng stream, matching individual run_head calls on the same streams."""
    features_k, features_v = bank.project(fmap)
    streams = rng.spawn(bank.h)
    return [run_head_projected(features_k, features_v, bank, j, streams[j])
            for j in range(bank.h)]
