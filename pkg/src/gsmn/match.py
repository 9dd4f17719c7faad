"""Node-level and structure-level graph matching.

For an image with n regions and a text with m words:

* node level: each node attends over the other modality's nodes and compares
  itself with the attended vector block by block, giving a t-dim matching vector;
* structure level: a K-kernel graph convolution mixes matching vectors along
  the node's own graph (dependency/dense edges for text, polar-kernel weights
  for regions);
* a two-layer tanh MLP scores every node and the scores are averaged.

The global similarity sums the text-to-image and image-to-text scores.

``similarity_matrix`` evaluates every (image, text) combination of two lists
in one batched expression: tensors carry leading axes (B_img, B_txt).
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tape, Tensor
from .config import MatchConfig
from .encode import encode_images, encode_texts
from .errors import ConfigurationError, ContractError, DimensionError
from .graphbuild import polar_coordinates, text_adjacency, text_edge_weights, text_similarity
from .graphio import ImageRecord, TextRecord
from .model import GcnLayer, GsmnModel, ScoreHead

TWO_PI = 2.0 * math.pi


def attend(tape: Tape, Q: Tensor, K: Tensor, lam: float, key_mask=None, return_weights: bool = False):
    """softmax over keys of ``lam * Q K^T``, then the weighted sum of keys."""
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"attention feature dims differ: {Q.shape} and {K.shape}")
    logits = tape.matmul(Q, tape.swap_last(K))
    weights = tape.softmax_rows(logits, scale=lam, mask=key_mask)
    out = tape.matmul(weights, K)
    return (out, weights) if return_weights else out


def attend_t2i(tape: Tape, U: Tensor, V: Tensor, lam: float, visual_mask=None) -> Tensor:
    """Each textual node aggregates visual nodes."""
    mask = None if visual_mask is None else np.asarray(visual_mask, dtype=bool)[..., None, :]
    return attend(tape, U, V, lam, mask)


def attend_i2t(tape: Tape, V: Tensor, U: Tensor, lam: float, text_mask=None) -> Tensor:
    """Each visual node aggregates textual nodes."""
    mask = None if text_mask is None else np.asarray(text_mask, dtype=bool)[..., None, :]
    return attend(tape, V, U, lam, mask)


def multi_block(tape: Tape, x: Tensor, c: Tensor, t: int) -> Tensor:
    """Per-block cosine similarity of two vectors split into ``t`` equal blocks (last axis)."""
    d = x.shape[-1]
    if c.shape[-1] != d:
        raise DimensionError(f"multi_block dims differ: {x.shape} and {c.shape}")
    if t < 1 or d % t:
        raise ConfigurationError(f"block count {t} does not divide dimension {d}")
    xb = tape.reshape(x, x.shape[:-1] + (t, d // t))
    cb = tape.reshape(c, c.shape[:-1] + (t, d // t))
    return tape.cosine(xb, cb)


def node_level_match(tape: Tape, X: Tensor, C: Tensor, t: int) -> Tensor:
    if X.shape[:-1][-1:] != C.shape[:-1][-1:]:
        raise DimensionError(f"node counts differ: {X.shape} and {C.shape}")
    return multi_block(tape, X, C, t)


def wrap_angle(delta: np.ndarray) -> np.ndarray:
    """Map angles onto (-pi, pi]."""
    return delta - TWO_PI * np.ceil((delta - math.pi) / TWO_PI)


def visual_kernel_weights(tape: Tape, polar: np.ndarray, layer: GcnLayer) -> Tensor:
    """Wrapped-Gaussian weight of every edge under every kernel, shape ``polar.shape[:-1] + (K,)``."""
    polar = np.asarray(polar, dtype=np.float64)
    sigma = tape.softplus(layer.sigma_raw)
    rho = Tensor(polar[..., 0:1])
    theta = Tensor(polar[..., 1:2])
    mu_rho = tape.index(layer.mu, (slice(None), 0))
    mu_theta = tape.index(layer.mu, (slice(None), 1))
    d_rho = tape.sub(rho, mu_rho)
    d_theta = tape.sub(theta, mu_theta)
    # the 2*pi shift is piecewise constant, so it carries no gradient
    d_theta = tape.add(d_theta, wrap_angle(d_theta.data) - d_theta.data)
    s_rho = tape.index(sigma, (slice(None), 0))
    s_theta = tape.index(sigma, (slice(None), 1))
    q_rho = tape.div(tape.mul(d_rho, d_rho), tape.scale(tape.mul(s_rho, s_rho), 2.0))
    q_theta = tape.div(tape.mul(d_theta, d_theta), tape.scale(tape.mul(s_theta, s_theta), 2.0))
    return tape.exp(tape.scale(tape.add(q_rho, q_theta), -1.0))


def visual_edge_weight(polar, k: int, layer: GcnLayer) -> float:
    """Scalar weight of one (rho, theta) edge under kernel ``k``."""
    w = visual_kernel_weights(Tape(record=False), np.asarray(polar, dtype=np.float64).reshape(1, 2), layer)
    return float(w.data[0, k])


def _activate(tape: Tape, x: Tensor, activation: str) -> Tensor:
    if activation == "tanh":
        return tape.tanh(x)
    if activation == "relu":
        return tape.relu(x)
    return x


def _check_self_loops(weights: np.ndarray, node_mask, per_kernel: bool) -> None:
    diag = np.diagonal(weights, axis1=-2, axis2=-1)
    if node_mask is not None:
        m = np.asarray(node_mask, dtype=bool)
        if per_kernel:
            m = m[..., None, :]
        diag = np.where(m, diag, 1.0)
    if np.any(diag == 0):
        raise ContractError("graph node without a self-loop")


def gcn_layer(tape: Tape, X: Tensor, weights: Tensor, layer: GcnLayer, activation: str = "tanh",
              per_kernel: bool = False, node_mask=None) -> Tensor:
    """Kernelized graph convolution.

    ``weights[..., i, j]`` weights the message from node j into node i. Shared
    weights have shape (..., p, p); per-kernel weights (..., K, p, p).
    Returns (..., p, K * kernel_dim), the kernels concatenated.
    """
    K, f, kd = layer.W.shape
    if X.shape[-1] != f:
        raise DimensionError(f"gcn input width {X.shape[-1]} != kernel input width {f}")
    _check_self_loops(weights.data, node_mask, per_kernel)
    p = X.shape[-2]
    lead = X.shape[:-2]
    W_flat = tape.reshape(tape.transpose(layer.W, (1, 0, 2)), (f, K * kd))
    Y = tape.matmul(X, W_flat)  # (..., p, K*kd)
    if per_kernel:
        Yk = tape.reshape(Y, lead + (p, K, kd))
        nd = len(lead)
        to_kernel_major = tuple(range(nd)) + (nd + 1, nd, nd + 2)
        Yk = tape.transpose(Yk, to_kernel_major)  # (..., K, p, kd)
        agg = tape.matmul(weights, Yk)  # (..., K, p, kd)
        agg = tape.transpose(agg, tuple(range(agg.ndim - 3)) + (agg.ndim - 2, agg.ndim - 3, agg.ndim - 1))
    else:
        agg = tape.matmul(weights, Y)
        agg = tape.reshape(agg, agg.shape[:-1] + (K, kd))
    out = _activate(tape, tape.add(agg, layer.b), activation)
    return tape.reshape(out, out.shape[:-2] + (K * kd,))


def score_direction(tape: Tape, Xhat: Tensor, head: ScoreHead, node_mask=None) -> Tensor:
    """Mean over nodes of ``W_s^T tanh(W_h^T x + b_h) + b_s``; returns the leading shape."""
    if Xhat.shape[-1] != head.W_h.shape[0]:
        raise DimensionError(f"score head expects width {head.W_h.shape[0]}, got {Xhat.shape[-1]}")
    hidden = tape.tanh(tape.add(tape.matmul(Xhat, head.W_h), head.b_h))
    s = tape.add(tape.matmul(hidden, head.W_s), head.b_s)
    s = tape.reshape(s, s.shape[:-1])
    if node_mask is None:
        return tape.mean(s, axis=-1)
    m = np.broadcast_to(np.asarray(node_mask, dtype=np.float64), s.shape)
    return tape.div(tape.sum(tape.mul(s, m), axis=-1), m.sum(axis=-1))


def ensemble_similarity(g_sparse, g_dense):
    """Average two similarity values or matrices."""
    if not (np.all(np.isfinite(g_sparse)) and np.all(np.isfinite(g_dense))):
        raise ContractError("ensemble inputs must be finite")
    return (np.asarray(g_sparse, dtype=np.float64) + np.asarray(g_dense, dtype=np.float64)) / 2.0


# -- batched pair forward -----------------------------------------------------

def _text_graph_batch(records: list[TextRecord], m: int, variant: str) -> np.ndarray:
    A = np.zeros((len(records), m, m))
    for b, r in enumerate(records):
        k = len(r.tokens)
        A[b, :k, :k] = text_adjacency(r, variant)
    return A


def _polar_batch(records: list[ImageRecord], n: int) -> np.ndarray:
    P = np.zeros((len(records), n, n, 2))
    for b, r in enumerate(records):
        k = len(r.regions)
        centers = np.array([reg.center for reg in r.regions])
        P[b, :k, :k] = polar_coordinates(centers, r.diagonal)
    return P


def _structure(tape, X, layers, weights_fn, activation, per_kernel, node_mask):
    for layer in layers:
        X = gcn_layer(tape, X, weights_fn(layer), layer, activation, per_kernel, node_mask)
    return X


def similarity_matrix(tape: Tape, model: GsmnModel, images: list[ImageRecord], texts: list[TextRecord],
                      details: dict | None = None) -> Tensor:
    """Global similarity of every (image, text) combination, shape (len(images), len(texts)).

    When ``details`` is a dict it is filled with attention weights and
    per-node matching vectors (numpy arrays) for offline inspection.
    """
    cfg: MatchConfig = model.config
    V, vmask = encode_images(tape, images, model)
    U, tmask = encode_texts(tape, texts, model)
    if cfg.normalize_nodes:
        V = tape.l2_normalize_rows(V)
        U = tape.l2_normalize_rows(U)
    Bi, n, d = V.shape
    Bt, m, _ = U.shape
    V4 = tape.reshape(V, (Bi, 1, n, d))
    U4 = tape.reshape(U, (1, Bt, m, d))
    lam = cfg.lambda_attn
    total = None

    if "t2i" in model.directions:
        C, attn = attend(tape, U4, V4, lam, key_mask=vmask[:, None, None, :], return_weights=True)
        X = node_level_match(tape, U4, C, cfg.blocks)
        node_mask = tmask[None, :, :]
        if details is not None:
            details["t2i_attention"] = attn.data
            details["t2i_match"] = X.data
        if cfg.use_structure:
            S = text_similarity(tape, U, cfg.graph_lambda, mask=tmask)
            W_e = text_edge_weights(tape, S, _text_graph_batch(texts, m, cfg.variant))
            W_e4 = tape.reshape(W_e, (1, Bt, m, m))
            X = _structure(tape, X, model.gcn("t2i"), lambda _layer: W_e4, cfg.gcn_activation, False,
                           np.broadcast_to(node_mask, (Bi, Bt, m)))
            if details is not None:
                details["text_edge_weights"] = W_e.data
        total = score_direction(tape, X, model.head("t2i"), node_mask)

    if "i2t" in model.directions:
        C, attn = attend(tape, V4, U4, lam, key_mask=tmask[None, :, None, :], return_weights=True)
        X = node_level_match(tape, V4, C, cfg.blocks)
        node_mask = vmask[:, None, :]
        if details is not None:
            details["i2t_attention"] = attn.data
            details["i2t_match"] = X.data
        if cfg.use_structure:
            polar = _polar_batch(images, n)
            pair_mask = (vmask[:, :, None] & vmask[:, None, :]).astype(np.float64)

            def weights_fn(layer):
                w = visual_kernel_weights(tape, polar, layer)  # (Bi, n, n, K)
                w = tape.mul(w, pair_mask[..., None])
                w = tape.transpose(w, (0, 3, 1, 2))
                return tape.reshape(w, (Bi, 1) + w.shape[1:])

            X = _structure(tape, X, model.gcn("i2t"), weights_fn, cfg.gcn_activation, True,
                           np.broadcast_to(node_mask, (Bi, Bt, n)))
        s = score_direction(tape, X, model.head("i2t"), node_mask)
        total = s if total is None else tape.add(total, s)
    return total


def global_similarity(image: ImageRecord, text: TextRecord, model: GsmnModel, tape: Tape | None = None) -> Tensor:
    """Scalar similarity of one image-text pair."""
    tape = Tape(record=False) if tape is None else tape
    S = similarity_matrix(tape, model, [image], [text])
    return tape.reshape(S, ())


def similarity_scores(model: GsmnModel, images: list[ImageRecord], texts: list[TextRecord],
                      image_chunk: int = 32, text_chunk: int = 64) -> np.ndarray:
    """Tapeless (len(images), len(texts)) similarity array, computed in fixed-order chunks."""
    out = np.zeros((len(images), len(texts)))
    for i in range(0, len(images), image_chunk):
        for j in range(0, len(texts), text_chunk):
            tape = Tape(record=False)
            out[i:i + image_chunk, j:j + text_chunk] = similarity_matrix(
                tape, model, images[i:i + image_chunk], texts[j:j + text_chunk]).data
    return out
