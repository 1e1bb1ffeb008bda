"""GCN encoder, MLP bodies and parameter initialization on top of ``autodiff``.

Parameters live in a flat ``{name: ndarray}`` dict.  A forward pass first
lifts them onto a tape (or wraps them as constants) and then calls the
functional layers below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

PRELU_INIT = 0.25


@dataclass(frozen=True)
class LayerStackSpec:
    """Dimensions and nonlinearity choices for a stack of dense layers.

    ``dims`` lists input, hidden and output widths.  ``activation`` and
    ``normalization`` apply to hidden layers; the last layer uses
    ``final_activation`` / ``final_normalization``.
    """

    dims: tuple[int, ...]
    activation: str = "relu"
    normalization: str = "none"
    final_activation: str = "identity"
    final_normalization: str = "none"
    bias: bool = True

    def __post_init__(self):
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be >= 2 positive widths, got {self.dims}")
        for act in (self.activation, self.final_activation):
            if act not in ("relu", "prelu", "elu", "identity"):
                raise ValueError(f"unknown activation {act!r}")
        for norm in (self.normalization, self.final_normalization):
            if norm not in ("batch_norm", "none"):
                raise ValueError(f"unknown normalization {norm!r}")

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def layer_options(self, i: int) -> tuple[str, str]:
        if i == self.num_layers - 1:
            return self.final_activation, self.final_normalization
        return self.activation, self.normalization


@dataclass
class GCNLayer:
    weight: Tensor
    activation: str = "relu"
    normalization: str = "none"
    slope: Tensor | None = None


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor | None
    activation: str = "relu"
    normalization: str = "none"
    slope: Tensor | None = None


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_parameters(prefix: str, spec: LayerStackSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, one PReLU slope per layer."""
    params = {}
    for i, (d_in, d_out) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
        params[f"{prefix}.{i}.weight"] = glorot_uniform(d_in, d_out, rng)
        if spec.bias:
            params[f"{prefix}.{i}.bias"] = np.zeros((1, d_out))
        if spec.layer_options(i)[0] == "prelu":
            params[f"{prefix}.{i}.slope"] = np.full((1, 1), PRELU_INIT)
    return params


def lift(params: dict[str, np.ndarray], tape: ad.Tape | None) -> dict[str, Tensor]:
    """Wrap arrays as tape leaves (or constants when ``tape`` is None)."""
    if tape is None:
        return {k: Tensor(v, name=k) for k, v in params.items()}
    return {k: tape.parameter(v, name=k) for k, v in params.items()}


def gcn_layers(prefix: str, spec: LayerStackSpec, params: dict[str, Tensor]) -> list[GCNLayer]:
    layers = []
    for i in range(spec.num_layers):
        act, norm = spec.layer_options(i)
        layers.append(GCNLayer(params[f"{prefix}.{i}.weight"], act, norm, params.get(f"{prefix}.{i}.slope")))
    return layers


def dense_layers(prefix: str, spec: LayerStackSpec, params: dict[str, Tensor]) -> list[DenseLayer]:
    layers = []
    for i in range(spec.num_layers):
        act, norm = spec.layer_options(i)
        layers.append(
            DenseLayer(
                params[f"{prefix}.{i}.weight"],
                params.get(f"{prefix}.{i}.bias"),
                act,
                norm,
                params.get(f"{prefix}.{i}.slope"),
            )
        )
    return layers


def normalize_adjacency(a) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with degrees taken after adding self-loops."""
    a = sp.csr_matrix(a, dtype=np.float64)
    a_hat = a + sp.identity(a.shape[0], format="csr")
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    out = (d @ a_hat @ d).tocsr()
    out.sort_indices()
    return out


def _activate(x: Tensor, activation: str, slope: Tensor | None) -> Tensor:
    if activation == "prelu":
        if slope is None:
            raise ValueError("prelu layer has no slope parameter")
        return ad.prelu(x, slope)
    return ad.ACTIVATIONS[activation](x)


def _normalize(x: Tensor, normalization: str) -> Tensor:
    return ad.batch_norm(x) if normalization == "batch_norm" else x


def encoder_forward(layers: list[GCNLayer], norm_adj, x) -> Tensor:
    """Stacked GCN: ``sigma(norm(A_norm H W))`` per layer."""
    h = ad.as_tensor(x)
    if norm_adj.shape[0] != h.shape[0]:
        raise ad.ShapeError(f"adjacency has {norm_adj.shape[0]} rows, features {h.shape[0]}")
    for layer in layers:
        if layer.weight.shape[0] != h.shape[1]:
            raise ad.ShapeError(f"layer expects {layer.weight.shape[0]} inputs, got {h.shape[1]}")
        # propagate on the narrower side
        if layer.weight.shape[1] <= h.shape[1]:
            h = ad.sparse_dense_matmul(norm_adj, ad.matmul(h, layer.weight))
        else:
            h = ad.matmul(ad.sparse_dense_matmul(norm_adj, h), layer.weight)
        h = _activate(_normalize(h, layer.normalization), layer.activation, layer.slope)
    return h


def mlp_forward(layers: list[DenseLayer], x) -> Tensor:
    h = ad.as_tensor(x)
    for layer in layers:
        if layer.weight.shape[0] != h.shape[1]:
            raise ad.ShapeError(f"layer expects {layer.weight.shape[0]} inputs, got {h.shape[1]}")
        h = ad.matmul(h, layer.weight)
        if layer.bias is not None:
            h = ad.add(h, layer.bias)
        h = _activate(_normalize(h, layer.normalization), layer.activation, layer.slope)
    return h


expander_forward = mlp_forward
