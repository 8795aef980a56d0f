"""Desk-scale prompt-conditioned encoder-decoder restoration network.

Layout (``b = base_dim``, levels 1..4 at full, 1/2, 1/4, 1/8 resolution with
``b, 2b, 4b, 8b`` channels)::

    embed        3x3 conv, 3 -> b
    enc{l}       transformer-substitute block(s) at level l          (l = 1..4)
    down{l}      3x3 stride-2 conv, level l -> l+1                   (l = 1..3)
    up{l}        nearest 2x upsample + 3x3 conv, level l+1 -> l      (l = 3..1)
    fuse{l}      concat(up, skip) + 1x1 conv back to level-l width
    dec{l}       transformer-substitute block(s)
    prompt{l}    PGM + PIM prompt block (levels in ``prompt_levels``)
    output       3x3 conv, b -> 3, plus the input image when ``global_residual``

The "transformer block" is a stand-in: residual channel attention followed by a
residual pointwise feed-forward.  Every conv kernel is prunable; biases and
prompt components are not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .store import NamedTensorStore

N_LEVELS = 4


@dataclass
class ModelConfig:
    base_dim: int = 8
    blocks_per_level: int = 1
    prompt_levels: tuple[int, ...] = (1, 2, 3)
    n_prompts: int = 3
    prompt_spatial: tuple[int, ...] = (8, 4, 4)
    global_residual: bool = True

    def __post_init__(self):
        self.prompt_levels = tuple(int(v) for v in self.prompt_levels)
        self.prompt_spatial = tuple(int(v) for v in self.prompt_spatial)
        if self.base_dim < 2 or self.base_dim % 2:
            raise ValueError("base_dim must be an even integer >= 2")
        if self.blocks_per_level < 0:
            raise ValueError("blocks_per_level must be >= 0")
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1")
        if any(lv not in (1, 2, 3) for lv in self.prompt_levels):
            raise ValueError("prompt_levels must be decoder levels among 1, 2, 3")
        if len(self.prompt_spatial) != len(self.prompt_levels):
            raise ValueError("prompt_spatial needs one size per prompt level")

    @property
    def level_dims(self) -> list[int]:
        return [self.base_dim * 2 ** i for i in range(N_LEVELS)]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_levels"] = list(self.prompt_levels)
        d["prompt_spatial"] = list(self.prompt_spatial)
        return d


@dataclass
class MicroPromptNet:
    config: ModelConfig
    params: NamedTensorStore = field(repr=False)

    def copy(self, dtype=None) -> "MicroPromptNet":
        return MicroPromptNet(self.config, self.params.copy(dtype))


# parameter layout -----------------------------------------------------------

def _layer_specs(cfg: ModelConfig) -> list[tuple[str, str, tuple]]:
    """Ordered ``(name, kind, info)`` list.  kind: conv | prompt."""
    dims = cfg.level_dims
    specs: list[tuple[str, str, tuple]] = []

    def conv(name, k, cin, cout, output=False):
        specs.append((name, "conv", (k, cin, cout, output)))

    def block(prefix, c):
        conv(f"{prefix}.ca_reduce", 1, c, c // 2)
        conv(f"{prefix}.ca_expand", 1, c // 2, c)
        conv(f"{prefix}.ffn_in", 1, c, 2 * c)
        conv(f"{prefix}.ffn_out", 1, 2 * c, c)

    conv("embed", 3, 3, dims[0])
    for lv in range(1, N_LEVELS + 1):
        for i in range(cfg.blocks_per_level):
            block(f"enc{lv}.block{i}", dims[lv - 1])
        if lv < N_LEVELS:
            conv(f"down{lv}", 3, dims[lv - 1], dims[lv])
    for lv in range(N_LEVELS - 1, 0, -1):
        c = dims[lv - 1]
        conv(f"up{lv}", 3, dims[lv], c)
        conv(f"fuse{lv}", 1, 2 * c, c)
        for i in range(cfg.blocks_per_level):
            block(f"dec{lv}.block{i}", c)
        if lv in cfg.prompt_levels:
            hp = cfg.prompt_spatial[cfg.prompt_levels.index(lv)]
            specs.append((f"prompt{lv}.components", "prompt", (cfg.n_prompts, hp, hp, c)))
            conv(f"prompt{lv}.pgm_logits", 1, c, cfg.n_prompts)
            conv(f"prompt{lv}.pgm_refine", 3, c, c)
            block(f"prompt{lv}.pim_block", 2 * c)
            conv(f"prompt{lv}.pim_reduce", 1, 2 * c, c)
            conv(f"prompt{lv}.pim_refine", 3, c, c)
    conv("output", 3, dims[0], 3, output=True)
    return specs


def _seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) % (1 << 64))


def init_params(config: ModelConfig, seed: int) -> MicroPromptNet:
    """Fan-in uniform kernels, zero biases, U(-0.5, 0.5) prompt components."""
    rng = np.random.default_rng(_seed_sequence(seed))
    store = NamedTensorStore()
    for name, kind, info in _layer_specs(config):
        if kind == "conv":
            k, cin, cout, output = info
            bound = np.sqrt(1.0 / (k * k * cin))
            w = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(np.float32)
            store.add(f"{name}.weight", w, prunable=True, output_layer=output)
            store.add(f"{name}.bias", np.zeros(cout, dtype=np.float32), prunable=False)
        else:
            store.add(name, rng.uniform(-0.5, 0.5, size=info).astype(np.float32), prunable=False)
    return MicroPromptNet(config, store)


def enumerate_params(net: MicroPromptNet) -> list[tuple[str, np.ndarray, bool, bool]]:
    return [(n, a, net.params.role(n).prunable, net.params.role(n).output_layer)
            for n, a in net.params.items()]


def describe(net: MicroPromptNet) -> dict:
    """JSON-ready architecture summary."""
    layers = [
        {"name": n, "shape": list(a.shape), "size": int(a.size),
         "prunable": p, "output_layer": o}
        for n, a, p, o in enumerate_params(net)
    ]
    return {
        "config": net.config.to_dict(),
        "total_params": net.params.total_count(),
        "prunable_params": net.params.prunable_count(),
        "layers": layers,
    }


# forward ------------------------------------------------------------------------

Params = dict[str, Tensor]


def leaf_tensors(net: MicroPromptNet, requires_grad: bool = False) -> Params:
    return {n: Tensor(a, requires_grad=requires_grad) for n, a in net.params.items()}


def _p(net_or_params) -> Params:
    if isinstance(net_or_params, MicroPromptNet):
        return leaf_tensors(net_or_params)
    return net_or_params


def _conv(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return dc.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride)


def transformer_block(F: Tensor, p, prefix: str = "") -> Tensor:
    """Residual channel attention, then residual feed-forward.  Shape preserving."""
    p = _p(p)
    pre = f"{prefix}." if prefix else ""
    gate = dc.sigmoid(_conv(p, pre + "ca_expand",
                            dc.relu(_conv(p, pre + "ca_reduce", dc.global_avg_pool(F)))))
    F = F + F * gate
    hidden = dc.gelu(_conv(p, pre + "ffn_in", F))
    return F + _conv(p, pre + "ffn_out", hidden)


def pgm(F_l: Tensor, P_c: Tensor, p, prefix: str = "") -> Tensor:
    """Prompt generation: softmax-weighted mix of the components, resized, 3x3-refined."""
    p = _p(p)
    pre = f"{prefix}." if prefix else ""
    n_comp = P_c.shape[0]
    if P_c.shape[-1] != F_l.shape[-1]:
        raise ValueError(f"prompt channels {P_c.shape[-1]} != feature channels {F_l.shape[-1]}")
    logits = _conv(p, pre + "pgm_logits", dc.global_avg_pool(F_l))
    if logits.shape[-1] != n_comp:
        raise ValueError(f"pgm produces {logits.shape[-1]} weights for {n_comp} prompt components")
    # [1,1,N] -> [N] for a single image, [B,1,1,N] -> [B,N] for a batch
    logits = logits.reshape((n_comp,) if F_l.data.ndim == 3 else (F_l.shape[0], n_comp))
    w = dc.softmax_vec(logits)
    mixed = dc.weighted_sum(w, P_c)
    h, wd = F_l.shape[-3], F_l.shape[-2]
    mixed = dc.resize_bilinear(mixed, h, wd)
    return _conv(p, pre + "pgm_refine", mixed)


def pim(P: Tensor, F_l: Tensor, p, prefix: str = "") -> Tensor:
    """Prompt interaction: concat(F_l, P) -> block -> 1x1 -> 3x3."""
    p = _p(p)
    pre = f"{prefix}." if prefix else ""
    if P.shape[:-1] != F_l.shape[:-1]:
        raise ValueError(f"prompt {P.shape} and features {F_l.shape} differ spatially")
    x = dc.concat_channels(F_l, P)
    x = transformer_block(x, p, pre + "pim_block")
    x = _conv(p, pre + "pim_reduce", x)
    return _conv(p, pre + "pim_refine", x)


def prompt_block(F_l: Tensor, p, prefix: str) -> Tensor:
    p = _p(p)
    P = pgm(F_l, p[f"{prefix}.components"], p, prefix)
    return pim(P, F_l, p, prefix)


def _check_spatial(image: Tensor) -> None:
    if image.data.ndim not in (3, 4) or image.shape[-1] != 3:
        raise ValueError(f"expected an RGB image [H,W,3] or batch [N,H,W,3], got {image.shape}")
    h, w = image.shape[-3], image.shape[-2]
    if h % 8 or w % 8:
        raise ValueError(
            f"image size {h}x{w} is not divisible by 8; pad or crop it to a multiple of 8")


def embed(image: Tensor, p) -> Tensor:
    _check_spatial(image)
    return _conv(_p(p), "embed", image)


def forward(image, net: MicroPromptNet, params: Params | None = None) -> Tensor:
    """Restore ``image``.  Output is not clamped; callers clamp for evaluation."""
    cfg = net.config
    p = params if params is not None else leaf_tensors(net)
    x_in = image if isinstance(image, Tensor) else Tensor(image)
    x = embed(x_in, p)
    skips = []
    for lv in range(1, N_LEVELS + 1):
        for i in range(cfg.blocks_per_level):
            x = transformer_block(x, p, f"enc{lv}.block{i}")
        if lv < N_LEVELS:
            skips.append(x)
            x = _conv(p, f"down{lv}", x, stride=2)
    for lv in range(N_LEVELS - 1, 0, -1):
        x = _conv(p, f"up{lv}", dc.upsample_nearest2x(x))
        x = _conv(p, f"fuse{lv}", dc.concat_channels(x, skips[lv - 1]))
        for i in range(cfg.blocks_per_level):
            x = transformer_block(x, p, f"dec{lv}.block{i}")
        if lv in cfg.prompt_levels:
            x = prompt_block(x, p, f"prompt{lv}")
    out = _conv(p, "output", x)
    if cfg.global_residual:
        out = out + x_in
    return out


def loss_and_grads(net: MicroPromptNet, degraded: np.ndarray, clean: np.ndarray
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """L1 loss of one (batched) forward pass and its gradient for every parameter."""
    p = leaf_tensors(net, requires_grad=True)
    loss = dc.l1_loss(forward(Tensor(degraded), net, p), Tensor(clean))
    dc.backward(loss)
    grads = {}
    for n, t in p.items():
        grads[n] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data), grads


def predict(net: MicroPromptNet, images: np.ndarray, clamp: bool = True) -> np.ndarray:
    with dc.no_grad():
        out = forward(Tensor(images), net).data
    return np.clip(out, 0.0, 1.0) if clamp else out


def param_scalar_fn(net: MicroPromptNet, name: str, image: np.ndarray, readout: np.ndarray
                    ) -> Callable[[Tensor], Tensor]:
    """``theta_name -> sum(readout * forward(image))`` with every other parameter fixed.

    Used by gradient checks; the net is evaluated in the dtype of the given point.
    """
    def f(t: Tensor) -> Tensor:
        p = {n: Tensor(a, dtype=t.dtype) for n, a in net.params.items()}
        p[name] = t
        out = forward(Tensor(image, dtype=t.dtype), net, p)
        return (out * Tensor(readout, dtype=t.dtype)).sum()

    return f


def summary_json(net: MicroPromptNet) -> str:
    return json.dumps(describe(net), indent=2)
