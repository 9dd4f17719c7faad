"""Node features: affine projection of region features and a (bi)directional GRU over words.

The batched entry points pad a list of records to a common node count and
return a boolean mask of real nodes alongside the features.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigurationError, ContractError
from .graphio import ImageRecord, TextRecord
from .model import GruCell, GsmnModel


def gru_step(tape: Tape, cell: GruCell, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update; ``x`` and ``h`` may carry leading batch axes."""
    return _gru_update(
        tape, cell, h,
        tape.add(tape.matmul(_as_row(tape, x), cell.W_z), cell.b_z),
        tape.add(tape.matmul(_as_row(tape, x), cell.W_r), cell.b_r),
        tape.add(tape.matmul(_as_row(tape, x), cell.W_h), cell.b_h),
        squeeze=x.ndim == 1,
    )


def _as_row(tape: Tape, x: Tensor) -> Tensor:
    return tape.reshape(x, (1, -1)) if x.ndim == 1 else x


def _gru_update(tape, cell, h, xz, xr, xh, squeeze=False):
    h2 = _as_row(tape, h)
    z = tape.sigmoid(tape.add(xz, tape.matmul(h2, cell.U_z)))
    r = tape.sigmoid(tape.add(xr, tape.matmul(h2, cell.U_r)))
    cand = tape.tanh(tape.add(xh, tape.matmul(tape.mul(r, h2), cell.U_h)))
    # (1 - z) * h + z * cand == h + z * (cand - h)
    out = tape.add(h2, tape.mul(z, tape.sub(cand, h2)))
    return tape.reshape(out, (-1,)) if squeeze else out


def run_gru(tape: Tape, cell: GruCell, X: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
    """Run a GRU over (B, T, d_in) inputs from a zero state.

    Padded steps (mask False) leave the state unchanged and emit zeros, so the
    reverse direction effectively starts at each sequence's last real token.
    """
    B, T, _ = X.shape
    d_h = cell.hidden_dim
    xz = tape.add(tape.matmul(X, cell.W_z), cell.b_z)
    xr = tape.add(tape.matmul(X, cell.W_r), cell.b_r)
    xh = tape.add(tape.matmul(X, cell.W_h), cell.b_h)
    h = Tensor(np.zeros((B, d_h)))
    outputs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for s in steps:
        m = mask[:, s:s + 1].astype(np.float64)
        sl = (slice(None), s)
        h_new = _gru_update(tape, cell, h, tape.index(xz, sl), tape.index(xr, sl), tape.index(xh, sl))
        if m.all():
            h = h_new
        else:
            h = tape.add(h, tape.mul(tape.sub(h_new, h), m))
        outputs[s] = tape.mul(h, m) if not m.all() else h
    return tape.stack(outputs, axis=1)


def token_batch(records: list[TextRecord], vocab) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(r.tokens) for r in records)
    ids = np.zeros((len(records), T), dtype=np.int64)
    mask = np.zeros((len(records), T), dtype=bool)
    for b, r in enumerate(records):
        ids[b, :len(r.tokens)] = vocab.encode(r.tokens)
        mask[b, :len(r.tokens)] = True
    return ids, mask


def encode_texts(tape: Tape, records: list[TextRecord], model: GsmnModel) -> tuple[Tensor, np.ndarray]:
    """(B, m_max, d) word representations and the (B, m_max) token mask.

    With two directions each row is the mean of the forward and backward hidden states.
    """
    if not records:
        raise ContractError("encode_texts needs at least one record")
    ids, mask = token_batch(records, model.vocab)
    X = tape.index(model["embed"], ids)
    H = run_gru(tape, model.gru("fwd"), X, mask)
    if model.config.bidirectional:
        Hb = run_gru(tape, model.gru("bwd"), X, mask, reverse=True)
        H = tape.scale(tape.add(H, Hb), 0.5)
    return H, mask


def encode_text(tape: Tape, record: TextRecord, model: GsmnModel) -> Tensor:
    if len(record.tokens) == 0:
        raise ContractError("cannot encode an empty token list")
    H, _ = encode_texts(tape, [record], model)
    return tape.reshape(H, H.shape[1:])


def region_batch(records: list[ImageRecord], region_dim: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(r.regions) for r in records)
    feats = np.zeros((len(records), n, region_dim))
    mask = np.zeros((len(records), n), dtype=bool)
    for b, r in enumerate(records):
        if r.feature_dim != region_dim:
            raise ConfigurationError(f"image {r.id!r} has region dim {r.feature_dim}, model expects {region_dim}")
        feats[b, :len(r.regions)] = r.features
        mask[b, :len(r.regions)] = True
    return feats, mask


def encode_images(tape: Tape, records: list[ImageRecord], model: GsmnModel) -> tuple[Tensor, np.ndarray]:
    """(B, n_max, d) projected region features and the (B, n_max) region mask."""
    if not records:
        raise ContractError("encode_images needs at least one record")
    feats, mask = region_batch(records, model.config.region_dim)
    V = tape.add(tape.matmul(Tensor(feats), model["proj.W"]), model["proj.b"])
    V = tape.mul(V, mask[..., None].astype(np.float64))
    return V, mask


def encode_image(tape: Tape, record: ImageRecord, model: GsmnModel) -> Tensor:
    V, _ = encode_images(tape, [record], model)
    return tape.reshape(V, V.shape[1:])
