"""Fully connected network families: base network, weight generator,
discriminator and the pooling task encoder.

All parameters live in flat float64 vectors. Layer ``l`` occupies a
``(n_in, n_out)`` weight block followed by an ``n_out`` bias block, in layer
order, and computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid", "softmax", "softplus")

# lower bound added after softplus so Beta concentrations stay usable
CONCENTRATION_FLOOR = 1e-4


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return list(zip(w[:-1], w[1:]))

    @property
    def block_shapes(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []
        for n_in, n_out in self.layer_shapes:
            out += [(n_in, n_out), (n_out,)]
        return out

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def offsets(self) -> list[tuple[int, int]]:
        """(start, stop) of every block inside the flat vector."""
        spans, start = [], 0
        for shape in self.block_shapes:
            n = int(np.prod(shape))
            spans.append((start, start + n))
            start += n
        return spans

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        """Views of ``flat`` shaped as the weight/bias blocks."""
        flat = np.asarray(flat)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        return [flat[a:b].reshape(s) for (a, b), s in zip(self.offsets(), self.block_shapes)]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        parts = []
        for n_in, n_out in self.layer_shapes:
            bound = 1.0 / np.sqrt(n_in)
            parts.append(rng.uniform(-bound, bound, size=n_in * n_out))
            parts.append(rng.uniform(-bound, bound, size=n_out))
        return np.concatenate(parts)


def param_blocks(spec: MlpSpec, flat: np.ndarray, requires_grad: bool = True) -> list[Tensor]:
    """Leaf tensors viewing the blocks of ``flat`` (no copy)."""
    return [Tensor(b, requires_grad=requires_grad) for b in spec.split(flat)]


def flatten_grads(grads: Sequence[Tensor | np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(g.data if isinstance(g, Tensor) else g).ravel() for g in grads])


def _activate(h: Tensor, name: str) -> Tensor:
    if name == "identity":
        return h
    if name == "relu":
        return h.relu()
    if name == "tanh":
        return h.tanh()
    if name == "sigmoid":
        return h.sigmoid()
    if name == "softplus":
        return h.softplus()
    if name == "softmax":
        return h.log_softmax(axis=-1).exp()
    raise ValueError(name)


def mlp_apply(spec: MlpSpec, blocks: Sequence[Tensor], x: Tensor) -> Tensor:
    """Run the MLP. Blocks are either unbatched ``(in, out)``/``(out,)`` or
    batched ``(L, in, out)``/``(L, 1, out)`` for L independent networks."""
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {spec.n_in}")
    h = x
    n_layers = len(spec.layer_shapes)
    for layer in range(n_layers):
        W, b = blocks[2 * layer], blocks[2 * layer + 1]
        h = h @ W + b
        last = layer == n_layers - 1
        h = _activate(h, spec.output_activation if last else spec.hidden_activation)
    return h


def batched_blocks(spec: MlpSpec, w: Tensor) -> list[Tensor]:
    """Slice an ``(L, P)`` stack of flat parameter vectors into batched blocks."""
    if w.ndim != 2 or w.shape[1] != spec.n_params:
        raise ValueError(f"expected weights of shape (L, {spec.n_params}), got {w.shape}")
    L = w.shape[0]
    blocks = []
    for (a, b), shape in zip(spec.offsets(), spec.block_shapes):
        part = w[:, a:b]
        if len(shape) == 2:
            blocks.append(part.reshape(L, *shape))
        else:
            blocks.append(part.reshape(L, 1, shape[0]))
    return blocks


def base_forward(spec: MlpSpec, w, x) -> Tensor:
    """Base network output for one flat weight vector ``(P,)`` -> ``(m, out)``
    or for a stack ``(L, P)`` -> ``(L, m, out)``."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2:
        raise ValueError(f"inputs must be (m, d), got {x.shape}")
    if w.ndim == 1:
        if w.shape[0] != spec.n_params:
            raise ValueError(f"expected {spec.n_params} base weights, got {w.shape[0]}")
        blocks = []
        for (a, b), shape in zip(spec.offsets(), spec.block_shapes):
            blocks.append(w[a:b].reshape(shape))
        return mlp_apply(spec, blocks, x)
    return mlp_apply(spec, batched_blocks(spec, w), x)


def generate_weights(spec: MlpSpec, gen_blocks: Sequence[Tensor], z) -> Tensor:
    """Map latent noise ``(L, Z)`` to ``L`` flat base-weight vectors."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, z.shape[0])
    if z.shape[-1] != spec.n_in:
        raise ValueError(f"latent width {z.shape[-1]} does not match generator input {spec.n_in}")
    return mlp_apply(spec, gen_blocks, z)


def discriminate(spec: MlpSpec, disc_blocks: Sequence[Tensor], w) -> tuple[Tensor, Tensor]:
    """Logit ``V`` and probability ``D = sigmoid(V)`` for each row of ``w``."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    if w.ndim == 1:
        w = w.reshape(1, w.shape[0])
    if spec.n_out != 1:
        raise ValueError("discriminator must have a single output unit")
    V = mlp_apply(spec, disc_blocks, w).reshape(w.shape[0])
    return V, V.sigmoid()


def encode_task(spec: MlpSpec, enc_blocks: Sequence[Tensor], x_support) -> tuple[Tensor, Tensor]:
    """Pool per-example encodings of the support inputs into the two
    Z-vectors of latent-noise parameters.

    The encoder output is averaged over the support set (so the result does
    not depend on example order), mapped through ``softplus`` plus a small
    floor, and split into halves.
    """
    x = x_support if isinstance(x_support, Tensor) else Tensor(x_support)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("encode_task needs a non-empty (m, d) support set")
    if spec.n_out % 2:
        raise ValueError("encoder output width must be even (two parameter vectors)")
    pooled = mlp_apply(spec, enc_blocks, x).mean(axis=0)
    positive = pooled.softplus() + CONCENTRATION_FLOOR
    z = spec.n_out // 2
    return positive[:z], positive[z:]


def pooled_encoding(spec: MlpSpec, enc_blocks: Sequence[Tensor], x_support) -> Tensor:
    """Mean encoder output before the positivity map."""
    x = x_support if isinstance(x_support, Tensor) else Tensor(x_support)
    return mlp_apply(spec, enc_blocks, x).mean(axis=0)


@dataclass(frozen=True)
class Architecture:
    """The four networks of one experiment."""

    base: MlpSpec
    generator: MlpSpec
    discriminator: MlpSpec
    encoder: MlpSpec

    @property
    def latent_dim(self) -> int:
        return self.generator.n_in

    @classmethod
    def build(
        cls,
        input_dim: int,
        output_dim: int,
        latent_dim: int,
        base_hidden: Sequence[int],
        generator_hidden: Sequence[int],
        discriminator_hidden: Sequence[int],
        encoder_hidden: Sequence[int],
        generator_output: str = "tanh",
    ) -> "Architecture":
        base = MlpSpec((input_dim, *base_hidden, output_dim))
        return cls(
            base=base,
            generator=MlpSpec((latent_dim, *generator_hidden, base.n_params), output_activation=generator_output),
            discriminator=MlpSpec((base.n_params, *discriminator_hidden, 1)),
            encoder=MlpSpec((input_dim, *encoder_hidden, 2 * latent_dim)),
        )


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    return concat([t.reshape(1, *t.shape) for t in tensors], axis=0)
