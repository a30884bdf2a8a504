"""Small shared builders for the test suite."""

import numpy as np

from gate_bilevel import autodiff as ad
from gate_bilevel.model import GateModel, ModelConfig, init_params


def tiny_config(tasks=("a", "b"), d_x=3, d_z=4, d_m=4, hidden=(5,), **kw):
    return ModelConfig(d_x=d_x, tasks=tasks, d_z=d_z, d_m=d_m, embed_hidden=hidden,
                       enc_hidden=hidden, map_hidden=hidden, **kw)


def tiny_model(seed=0, **kw):
    cfg = tiny_config(**kw)
    return GateModel(cfg), init_params(cfg, seed)


def identity_model(tasks=("a", "b"), d=3):
    """Single-layer linear stacks, every encoder and manifold map the identity."""
    cfg = ModelConfig(d_x=d, tasks=tasks, d_z=d, d_m=d, embed_hidden=(), enc_hidden=(), map_hidden=(),
                      embed_out_act="linear", latent_out_act="linear")
    theta = init_params(cfg, 0)
    for k in theta:
        if k.startswith(("embed", "enc", "fwd", "inv")) and k.endswith("W0"):
            theta[k] = np.eye(d)
    return GateModel(cfg), theta


def constants(theta):
    return {k: ad.constant(v) for k, v in theta.items()}
