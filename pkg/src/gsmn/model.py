"""Named parameter container for the full matching network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import MatchConfig
from .graphio import Vocabulary

GRU_GATES = ("z", "r", "h")


@dataclass
class GruCell:
    """Weights of one GRU direction; ``W_*`` act on the input, ``U_*`` on the hidden state."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U_z.shape[0]


@dataclass
class GcnLayer:
    W: Tensor  # (K, in_dim, kernel_dim)
    b: Tensor  # (kernel_dim,), shared by all kernels
    mu: Tensor | None = None  # (K, 2) pseudo-coordinate centres, visual graphs only
    sigma_raw: Tensor | None = None  # (K, 2), softplus gives the scales


@dataclass
class ScoreHead:
    W_h: Tensor
    b_h: Tensor
    W_s: Tensor
    b_s: Tensor


def _softplus_inv(y: float) -> float:
    # log(exp(y) - 1) without overflow for large y
    return y + math.log(-math.expm1(-y))


class GsmnModel:
    """All learnable tensors, addressable by dotted name."""

    def __init__(self, config: MatchConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config

        bound = 1.0 / math.sqrt(c.embed_dim)
        self._add("embed", rng.uniform(-bound, bound, (len(vocab), c.embed_dim)),
                  trainable=not c.freeze_embeddings)
        for direction in self.gru_directions:
            self._add_gru(rng, f"gru_{direction}", c.embed_dim, c.joint_dim)
        self._add_uniform(rng, "proj.W", (c.region_dim, c.joint_dim), c.region_dim)
        self._add_uniform(rng, "proj.b", (c.joint_dim,), c.region_dim)

        for side in self.directions:
            if c.use_structure:
                in_dim = c.blocks
                for layer in range(c.gcn_depth):
                    name = f"gcn_{side}.{layer}"
                    self._add_uniform(rng, f"{name}.W", (c.kernels, in_dim, c.kernel_dim), in_dim)
                    self._add_uniform(rng, f"{name}.b", (c.kernel_dim,), in_dim)
                    if side == "i2t":
                        k = np.arange(c.kernels)
                        mu = np.stack([np.full(c.kernels, 0.25), -math.pi + 2 * math.pi * (k + 0.5) / c.kernels], 1)
                        sig = np.tile([_softplus_inv(0.25), _softplus_inv(math.pi / 2)], (c.kernels, 1))
                        self._add(f"{name}.mu", mu)
                        self._add(f"{name}.sigma_raw", sig)
                    in_dim = c.kernels * c.kernel_dim
            width = c.structure_width
            self._add_uniform(rng, f"head_{side}.W_h", (width, c.mlp_hidden), width)
            self._add_uniform(rng, f"head_{side}.b_h", (c.mlp_hidden,), width)
            self._add_uniform(rng, f"head_{side}.W_s", (c.mlp_hidden, 1), c.mlp_hidden)
            self._add_uniform(rng, f"head_{side}.b_s", (1,), c.mlp_hidden)

    @property
    def gru_directions(self) -> tuple[str, ...]:
        return ("fwd", "bwd") if self.config.bidirectional else ("fwd",)

    @property
    def directions(self) -> tuple[str, ...]:
        return {"both": ("t2i", "i2t"), "t2i_only": ("t2i",), "i2t_only": ("i2t",)}[self.config.direction]

    def _add(self, name, values, trainable=True):
        self.params[name] = Tensor(values, requires_grad=trainable, name=name)

    def _add_uniform(self, rng, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, shape))

    def _add_gru(self, rng, prefix, d_in, d_h):
        for g in GRU_GATES:
            self._add_uniform(rng, f"{prefix}.W_{g}", (d_in, d_h), d_in)
            self._add_uniform(rng, f"{prefix}.U_{g}", (d_h, d_h), d_h)
            self._add_uniform(rng, f"{prefix}.b_{g}", (d_h,), d_h)

    # -- grouped views ------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return list(self.params.items())

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gru(self, direction: str) -> GruCell:
        p = f"gru_{direction}."
        return GruCell(**{k: self.params[p + k] for k in
                          ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")})

    def gcn(self, side: str) -> list[GcnLayer]:
        layers = []
        for layer in range(self.config.gcn_depth):
            p = f"gcn_{side}.{layer}."
            layers.append(GcnLayer(W=self.params[p + "W"], b=self.params[p + "b"],
                                   mu=self.params.get(p + "mu"), sigma_raw=self.params.get(p + "sigma_raw")))
        return layers

    def head(self, side: str) -> ScoreHead:
        p = f"head_{side}."
        return ScoreHead(*(self.params[p + k] for k in ("W_h", "b_h", "W_s", "b_s")))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
