"""Bundling the head bank and decoder into one checkpoint file.

Alongside the named parameters, a ``meta.hparams`` vector records the
dimensions needed to rebuild both modules when loading.
"""

from __future__ import annotations

import numpy as np

from .attention import HeadBank
from .autodiff import Parameter
from .checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .config import TrainConfig
from .decoder import DecoderParams
from .errors import DataFormatError

_META_NAME = "meta.hparams"
_META_VERSION = 1.0
_POS_CODES = {"learned": 0.0, "sinusoidal": 1.0}


def build_model(cfg: TrainConfig, n_patches: int, d_feats: int,
                rng: np.random.Generator) -> tuple[HeadBank, DecoderParams]:
    bank = HeadBank(
        h=cfg.heads, k_slots=cfg.slots, d_slots=cfg.slot_dim,
        d_feats=d_feats, t_iters=cfg.iterations, epsilon=cfg.epsilon,
        layer_norm=cfg.layer_norm,
        mlp_hidden=cfg.attn_mlp_hidden or None, rng=rng)
    decoder = DecoderParams(
        n_patches=n_patches, d_slots=cfg.slot_dim, d_feats=d_feats,
        hidden=cfg.decoder_hidden, pos_encoding=cfg.pos_encoding, rng=rng)
    return bank, decoder


def model_parameters(bank: HeadBank, decoder: DecoderParams) -> list[Parameter]:
    return bank.parameters() + decoder.parameters()


def save_model(bank: HeadBank, decoder: DecoderParams, path: str) -> None:
    meta = np.array([
        _META_VERSION, bank.h, bank.k_slots, bank.d_slots, bank.d_feats,
        bank.t_iters, bank.epsilon, 1.0 if bank.layer_norm else 0.0,
        bank.mlp_hidden, decoder.hidden, decoder.n_patches,
        _POS_CODES[decoder.pos_encoding],
    ], dtype=np.float64)
    params = model_parameters(bank, decoder) + [Parameter(meta, _META_NAME)]
    save_checkpoint(params, path)


def load_model(path: str) -> tuple[HeadBank, DecoderParams]:
    loaded = load_checkpoint(path)
    if _META_NAME not in loaded:
        raise DataFormatError(f"{path}: missing {_META_NAME!r} record")
    meta = loaded[_META_NAME]
    if meta.size != 12 or meta[0] != _META_VERSION:
        raise DataFormatError(f"{path}: unsupported model metadata {meta!r}")
    (_, h, k_slots, d_slots, d_feats, t_iters, epsilon, ln,
     mlp_hidden, dec_hidden, n_patches, pos_code) = meta.tolist()
    pos = "sinusoidal" if pos_code else "learned"
    bank = HeadBank(int(h), int(k_slots), int(d_slots), int(d_feats),
                    int(t_iters), float(epsilon), bool(ln), int(mlp_hidden))
    decoder = DecoderParams(int(n_patches), int(d_slots), int(d_feats),
                            int(dec_hidden), pos)
    restore_parameters(model_parameters(bank, decoder), loaded)
    return bank, decoder
