"""Hard-negative triplet objective, Adam, the training loop and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .config import MatchConfig, TrainConfig, build_configs
from .errors import CheckpointError, ConfigurationError, ContractError, NumericError
from .graphio import Corpus, Vocabulary
from .match import similarity_matrix
from .model import GsmnModel

log = logging.getLogger(__name__)


def hardest_negatives(S: np.ndarray, positive_mask: np.ndarray | None = None):
    """Column index of the hardest negative per row and row index per column.

    Candidates exclude the diagonal and any entry flagged in ``positive_mask``.
    Ties go to the lowest index; -1 marks a row/column with no candidate.
    """
    B = S.shape[0]
    banned = np.eye(B, dtype=bool)
    if positive_mask is not None:
        banned |= np.asarray(positive_mask, dtype=bool)
    masked = np.where(banned, -np.inf, S)
    row_idx = np.argmax(masked, axis=1)
    col_idx = np.argmax(masked, axis=0)
    row_idx = np.where(np.all(banned, axis=1), -1, row_idx)
    col_idx = np.where(np.all(banned, axis=0), -1, col_idx)
    return row_idx, col_idx


def triplet_loss_batch(tape: Tape, S: Tensor, margin: float, positive_mask: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of the two hinge terms against the hardest in-batch negatives.

    ``S[i, j]`` is the similarity of image i and text j; ``S[i, i]`` is the
    matched pair. For each i the hardest negative text (row) and hardest
    negative image (column) are each penalized if within ``margin`` of ``S[i, i]``.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        raise ContractError("triplet loss needs a batch of at least 2")
    row_idx, col_idx = hardest_negatives(S.data, positive_mask)
    ar = np.arange(B)
    diag = tape.index(S, (ar, ar))
    terms = []
    for neg_rows, neg_cols, valid in ((ar, row_idx, row_idx >= 0), (col_idx, ar, col_idx >= 0)):
        neg = tape.index(S, (np.where(valid, neg_rows, 0), np.where(valid, neg_cols, 0)))
        hinge = tape.relu(tape.add(tape.sub(neg, diag), margin))
        terms.append(tape.mul(hinge, valid.astype(np.float64)))
    return tape.scale(tape.sum(tape.add(terms[0], terms[1])), 1.0 / B)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Missing gradients count as zero. A non-finite gradient aborts the step
    before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if np.any(update):
            p.assign(p.data - update)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / total
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by ``lr_decay_factor`` every ``lr_decay_every`` epochs (epoch is 0-based)."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    lr: float


def train_epoch(corpus: Corpus, model: GsmnModel, cfg: TrainConfig, state: AdamState,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    pairs = corpus.split_pairs("train")
    if not pairs:
        raise ContractError("training split is empty")
    order = rng.permutation(len(pairs))
    lr = learning_rate(cfg, epoch)
    params = {k: p for k, p in model.params.items() if p.requires_grad}
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
        if len(batch) < 2:
            continue
        images = [corpus.images[p.image_id] for p in batch]
        texts = [corpus.texts[p.text_id] for p in batch]
        same = None
        if cfg.mask_same_image:
            ids = np.array([p.image_id for p in batch])
            same = ids[:, None] == ids[None, :]
        tape = Tape()
        S = similarity_matrix(tape, model, images, texts)
        loss = triplet_loss_batch(tape, S, cfg.margin, same)
        model.zero_grad()
        tape.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        _clip(grads, cfg.grad_clip)
        adam_step(params, grads, state, lr)
        losses.append(loss.item())
    return EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), batches=len(losses), lr=lr)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"GSMNCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    match_config: MatchConfig
    train_config: TrainConfig | None
    vocab: list[str]
    epoch: int
    val_rsum: float | None

    def build_model(self) -> GsmnModel:
        model = GsmnModel(self.match_config, Vocabulary.from_list(self.vocab))
        load_state(model, self.params)
        return model


def load_state(model: GsmnModel, arrays: dict[str, np.ndarray]) -> None:
    for name, tensor in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = arrays[name]
        if arr.shape != tensor.shape:
            raise ConfigurationError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {tensor.shape}")
        tensor.assign(arr)
    extra = set(arrays) - set(model.params)
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters {sorted(extra)}")


def save_checkpoint(path, model: GsmnModel, train_config: TrainConfig | None = None, epoch: int = 0,
                    val_rsum: float | None = None) -> Path:
    """Write magic, version, a JSON header, then every parameter as little-endian float64."""
    entries, blobs, offset = [], [], 0
    for name, tensor in model.params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    header = {
        "match_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_config) if train_config is not None else None,
        "vocab": model.vocab.itos,
        "epoch": epoch,
        "val_rsum": val_rsum,
        "params": entries,
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(body)
    return path


def resolve_checkpoint_path(path) -> Path:
    path = Path(path)
    if not path.exists() and path.with_suffix(".ckpt").exists():
        return path.with_suffix(".ckpt")
    return path


def load_checkpoint(path, expect: MatchConfig | None = None) -> Checkpoint:
    path = resolve_checkpoint_path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    prefix = len(MAGIC) + struct.calcsize("<IQ")
    if len(raw) < prefix or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, head_len = struct.unpack("<IQ", raw[len(MAGIC):prefix])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[prefix:prefix + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    body = raw[prefix + head_len:]
    if hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: parameter data is corrupt or truncated")

    match_cfg, train_cfg = build_configs(header["match_config"])
    if header.get("train_config") is not None:
        _, train_cfg = build_configs(header["train_config"])
    else:
        train_cfg = None
    if expect is not None and expect != match_cfg:
        diffs = [f.name for f in dataclasses.fields(expect) if getattr(expect, f.name) != getattr(match_cfg, f.name)]
        raise ConfigurationError(f"checkpoint config differs in {diffs}")
    params = {}
    for e in header["params"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return Checkpoint(params=params, match_config=match_cfg, train_config=train_cfg, vocab=header["vocab"],
                      epoch=header["epoch"], val_rsum=header["val_rsum"])


# -- full training run ------------------------------------------------------------

@dataclass
class RunResult:
    model: GsmnModel
    best_epoch: int
    best_val_rsum: float | None
    history: list[dict]
    out_dir: Path | None


def _metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def fit(corpus: Corpus, match_cfg: MatchConfig, train_cfg: TrainConfig, out_dir=None,
        manifest: dict | None = None) -> RunResult:
    """Train for ``train_cfg.epochs`` epochs, validating after each one.

    The model with the highest validation rSum is kept (earliest on ties). With
    ``out_dir`` set, writes ``best.ckpt``, ``last.ckpt``, ``metrics.jsonl`` and
    ``manifest.json``. Without a val split, the last epoch is kept.
    """
    from .evaluate import evaluate

    model = GsmnModel(match_cfg, corpus.vocab, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")
        if manifest is not None:
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    has_val = bool(corpus.split_pairs("val"))
    best_rsum, best_epoch, best_state = None, -1, None
    history = []
    for epoch in range(train_cfg.epochs):
        stats = train_epoch(corpus, model, train_cfg, state, rng, epoch)
        record = {"epoch": epoch + 1, "loss": stats.mean_loss, "lr": stats.lr}
        if has_val:
            ev = evaluate(model, corpus, "val", keep_rankings=False)
            record.update({"val_r1_i2t": ev.i2t.recalls[1], "val_r1_t2i": ev.t2i.recalls[1], "val_rsum": ev.rsum})
            if best_rsum is None or ev.rsum > best_rsum:
                best_rsum, best_epoch = ev.rsum, epoch + 1
                best_state = {k: v.data for k, v in model.params.items()}
        history.append(record)
        log.info("epoch %d loss %.5f %s", epoch + 1, stats.mean_loss,
                 f"val rSum {record['val_rsum']:.1f}" if has_val else "")
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(_metrics_line(record))
    if out is not None:
        save_checkpoint(out / "last.ckpt", model, train_cfg, train_cfg.epochs, None)
    if best_state is not None:
        load_state(model, best_state)
    else:
        best_epoch = train_cfg.epochs
    if out is not None:
        save_checkpoint(out / "best.ckpt", model, train_cfg, best_epoch, best_rsum)
    return RunResult(model=model, best_epoch=best_epoch, best_val_rsum=best_rsum, history=history, out_dir=out)
