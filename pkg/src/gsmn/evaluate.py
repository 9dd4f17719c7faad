"""Recall@K retrieval evaluation in both directions, rSum, and ranking dumps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .graphio import Corpus
from .match import ensemble_similarity, similarity_scores
from .model import GsmnModel

KS = (1, 5, 10)


def rank_candidates(scores: np.ndarray) -> np.ndarray:
    """Candidate indices by descending score; ties keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def recall_at_k(S: np.ndarray, ground_truth, k: int) -> float:
    """Percentage of queries (rows of ``S``) with a correct candidate in their top ``k``."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    Q, C = S.shape
    if k > C:
        raise ContractError(f"K={k} exceeds the {C} candidates")
    if len(ground_truth) != Q:
        raise ContractError(f"{len(ground_truth)} ground-truth sets for {Q} queries")
    top = rank_candidates(S)[:, :k]
    hits = 0
    for q in range(Q):
        gt = ground_truth[q]
        if not gt:
            raise ContractError(f"query {q} has no ground-truth candidate")
        hits += any(int(c) in gt for c in top[q])
    return 100.0 * hits / Q


def rsum(recalls_i2t, recalls_t2i) -> float:
    """Sum of R@1, R@5, R@10 over both directions (dicts keyed by K, or 3-sequences)."""
    values = []
    for recalls in (recalls_i2t, recalls_t2i):
        vals = [recalls[k] for k in KS] if isinstance(recalls, dict) else list(recalls)
        if len(vals) != 3:
            raise ContractError("rSum needs three recalls per direction")
        values += vals
    return float(sum(values))


@dataclass
class RetrievalResult:
    direction: str
    recalls: dict[int, float]
    rankings: list[tuple[str, list[str], list[float]]] = field(default_factory=list)


@dataclass
class Evaluation:
    i2t: RetrievalResult
    t2i: RetrievalResult
    rsum: float
    scores: np.ndarray

    def summary(self) -> dict:
        out = {f"i2t_r{k}": self.i2t.recalls[k] for k in KS}
        out.update({f"t2i_r{k}": self.t2i.recalls[k] for k in KS})
        out["rsum"] = self.rsum
        return out


def _direction(S, query_ids, cand_ids, gt, direction, keep_rankings) -> RetrievalResult:
    C = S.shape[1]
    recalls = {k: recall_at_k(S, gt, min(k, C)) for k in KS}
    rankings = []
    if keep_rankings:
        order = rank_candidates(S)
        for q, qid in enumerate(query_ids):
            rankings.append((qid, [cand_ids[c] for c in order[q]], [float(S[q, c]) for c in order[q]]))
    return RetrievalResult(direction=direction, recalls=recalls, rankings=rankings)


def evaluate_scores(S: np.ndarray, image_ids: list[str], text_ids: list[str], text_to_image: dict[str, str],
                    folds: int = 1, keep_rankings: bool = True) -> Evaluation:
    """Recalls from an (images x texts) score matrix; with folds, recalls are averaged over image folds."""
    S = np.asarray(S, dtype=np.float64)
    if folds < 1 or folds > len(image_ids):
        raise ContractError(f"folds must be between 1 and the number of images, got {folds}")
    bounds = np.linspace(0, len(image_ids), folds + 1).round().astype(int)
    per_fold = []
    for f in range(folds):
        img_sel = list(range(bounds[f], bounds[f + 1]))
        fold_images = {image_ids[i] for i in img_sel}
        txt_sel = [j for j, t in enumerate(text_ids) if text_to_image[t] in fold_images]
        sub = S[np.ix_(img_sel, txt_sel)]
        f_img = [image_ids[i] for i in img_sel]
        f_txt = [text_ids[j] for j in txt_sel]
        img_pos = {iid: k for k, iid in enumerate(f_img)}
        gt_i2t = [set() for _ in f_img]
        for j, t in enumerate(f_txt):
            gt_i2t[img_pos[text_to_image[t]]].add(j)
        gt_t2i = [{img_pos[text_to_image[t]]} for t in f_txt]
        per_fold.append((
            _direction(sub, f_img, f_txt, gt_i2t, "i2t", keep_rankings),
            _direction(sub.T, f_txt, f_img, gt_t2i, "t2i", keep_rankings),
        ))
    if folds == 1:
        i2t, t2i = per_fold[0]
    else:
        i2t = RetrievalResult("i2t", {k: float(np.mean([r[0].recalls[k] for r in per_fold])) for k in KS},
                              [x for r in per_fold for x in r[0].rankings])
        t2i = RetrievalResult("t2i", {k: float(np.mean([r[1].recalls[k] for r in per_fold])) for k in KS},
                              [x for r in per_fold for x in r[1].rankings])
    return Evaluation(i2t=i2t, t2i=t2i, rsum=rsum(i2t.recalls, t2i.recalls), scores=S)


def evaluate(models: GsmnModel | list[GsmnModel], corpus: Corpus, split: str = "test", folds: int = 1,
             keep_rankings: bool = True) -> Evaluation:
    """Score every image of ``split`` against every text; two models are ensembled by averaging."""
    if isinstance(models, GsmnModel):
        models = [models]
    if not 1 <= len(models) <= 2:
        raise ContractError("evaluate takes one model or a sparse/dense pair")
    images, texts = corpus.split_records(split)
    if not images:
        raise ContractError(f"split {split!r} is empty")
    mats = [similarity_scores(m, images, texts) for m in models]
    S = mats[0] if len(mats) == 1 else ensemble_similarity(mats[0], mats[1])
    t2img = {p.text_id: p.image_id for p in corpus.split_pairs(split)}
    return evaluate_scores(S, [i.id for i in images], [t.id for t in texts], t2img, folds, keep_rankings)


def write_rankings(path, evaluation: Evaluation) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for result in (evaluation.i2t, evaluation.t2i):
            for qid, cands, scores in result.rankings:
                fh.write(json.dumps({"direction": result.direction, "query": qid, "candidates": cands,
                                     "scores": scores}) + "\n")
    return path
