"""Open-set retrieval: cosine matching of query sequences against a gallery.

Report files written by :func:`write_report`:

``per_query.csv``
    header ``query_sequence_id,query_subject_id,top_01,...,top_20,ap,inp``;
    ``top_NN`` holds the gallery sequence id at rank NN (empty when the
    gallery is shorter). Skipped queries are not listed.

``summary.json``
    ``{"rank1", "rank5", "mAP", "mINP", "counts": {"queries", "gallery",
    "evaluated", "skipped"}, "skipped_queries": [...]}``
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ShapeError
from .data import TEST_FRAME_CAP, load_samples, subsample_fraction
from .model import embed_sequence

TOP_N = 20


@dataclass
class QueryResult:
    sequence_id: str
    subject_id: int
    order: np.ndarray
    scores: np.ndarray
    ap: float
    inp: float
    first_hit: int


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    mAP: float
    mINP: float
    num_queries: int
    num_gallery: int
    skipped: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    gallery_names: list = field(default_factory=list)

    @property
    def num_evaluated(self):
        return len(self.queries)

    def summary(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "mAP": self.mAP,
            "mINP": self.mINP,
            "counts": {
                "queries": self.num_queries,
                "gallery": self.num_gallery,
                "evaluated": self.num_evaluated,
                "skipped": len(self.skipped),
            },
            "skipped_queries": list(self.skipped),
        }


def normalize_parts(x):
    """Unit-normalize each part vector; zero-norm parts stay zero. x: (..., S, C)."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def similarity(a, b) -> float:
    """Mean over parts of the cosine similarity of two (S, C) embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float((normalize_parts(a) * normalize_parts(b)).sum(-1).mean())


def similarity_matrix(query, gallery) -> np.ndarray:
    query = normalize_parts(query)
    gallery = normalize_parts(gallery)
    if query.shape[1:] != gallery.shape[1:]:
        raise ShapeError(f"embedding shapes differ: {query.shape[1:]} vs {gallery.shape[1:]}")
    s = query.shape[1]
    return np.einsum("qsc,gsc->qg", query, gallery) / s


def rank_queries(sims) -> np.ndarray:
    """Gallery indices by descending similarity; ties keep ascending index."""
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    if sims.shape[1] == 0:
        raise DataError("gallery is empty")
    return np.argsort(-sims, axis=1, kind="stable")


def query_metrics(relevant):
    """(AP, INP, rank of first hit) from a boolean relevance vector in rank order."""
    hits = np.flatnonzero(relevant) + 1
    n = len(hits)
    ap = float(np.mean(np.arange(1, n + 1) / hits))
    inp = float(n / hits[-1])
    return ap, inp, int(hits[0])


def compute_metrics(rankings, query_ids, gallery_ids, sims=None, query_names=None,
                    valid_mask=None, num_gallery=None) -> RetrievalReport:
    """Rank-1/5, mAP and mINP over the queries that have a gallery positive.

    ``valid_mask`` (queries x gallery, optional) removes gallery items from a
    query's list before scoring.
    """
    rankings = np.atleast_2d(rankings)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if query_names is None:
        query_names = [str(i) for i in range(len(query_ids))]
    results, skipped = [], []
    for qi, order in enumerate(rankings):
        if valid_mask is not None:
            order = order[valid_mask[qi, order]]
        relevant = gallery_ids[order] == query_ids[qi]
        if not relevant.any():
            skipped.append(query_names[qi])
            continue
        ap, inp, first = query_metrics(relevant)
        scores = sims[qi, order] if sims is not None else np.empty(0)
        results.append(QueryResult(query_names[qi], int(query_ids[qi]), order, scores, ap, inp, first))
    if results:
        first = np.array([r.first_hit for r in results])
        rank1 = float(np.mean(first <= 1))
        rank5 = float(np.mean(first <= 5))
        mean_ap = float(np.mean([r.ap for r in results]))
        mean_inp = float(np.mean([r.inp for r in results]))
    else:
        rank1 = rank5 = mean_ap = mean_inp = 0.0
    return RetrievalReport(
        rank1, rank5, mean_ap, mean_inp,
        num_queries=len(query_ids),
        num_gallery=len(gallery_ids) if num_gallery is None else num_gallery,
        skipped=skipped, queries=results,
    )


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray          # (N, S, C)
    subject_ids: np.ndarray
    camera_ids: np.ndarray
    sequence_ids: list

    def save(self, path):
        """Write an .npz with arrays embeddings, subject_ids, camera_ids, sequence_ids."""
        with open(path, "wb") as fh:
            np.savez(fh, embeddings=self.embeddings, subject_ids=self.subject_ids,
                     camera_ids=self.camera_ids, sequence_ids=np.array(self.sequence_ids, dtype=str))

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(z["embeddings"], z["subject_ids"], z["camera_ids"], [str(s) for s in z["sequence_ids"]])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read embeddings {path}: {exc}") from exc


def embed_samples(model, samples, test_frac=1.0, seed=0) -> EmbeddingSet:
    if not samples:
        raise DataError("no sequences to embed")
    out = []
    for i, sample in enumerate(samples):
        if test_frac < 1.0:
            sample = subsample_fraction(sample, test_frac, seed=np.random.SeedSequence([seed, i]))
        out.append(embed_sequence(model, sample, mode="eval").cpu().numpy())
    return EmbeddingSet(
        np.stack(out),
        np.array([s.subject_id for s in samples], dtype=np.int64),
        np.array([s.camera_id for s in samples], dtype=np.int64),
        [s.sequence_id for s in samples],
    )


def evaluate_embeddings(query: EmbeddingSet, gallery: EmbeddingSet, exclude_same_camera=False) -> RetrievalReport:
    if len(gallery.subject_ids) == 0:
        raise DataError("gallery is empty")
    sims = similarity_matrix(query.embeddings, gallery.embeddings)
    order = rank_queries(sims)
    mask = None
    if exclude_same_camera:
        same_id = query.subject_ids[:, None] == gallery.subject_ids[None, :]
        same_cam = query.camera_ids[:, None] == gallery.camera_ids[None, :]
        mask = ~(same_id & same_cam)
    report = compute_metrics(order, query.subject_ids, gallery.subject_ids, sims=sims,
                             query_names=query.sequence_ids, valid_mask=mask)
    report.gallery_names = list(gallery.sequence_ids)
    return report


def write_report(report: RetrievalReport, out_dir, gallery_names=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = gallery_names or report.gallery_names or None
    with open(out_dir / "per_query.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_sequence_id", "query_subject_id"]
                        + [f"top_{i:02d}" for i in range(1, TOP_N + 1)] + ["ap", "inp"])
        for q in report.queries:
            top = [names[j] if names is not None else str(j) for j in q.order[:TOP_N]]
            top += [""] * (TOP_N - len(top))
            writer.writerow([q.sequence_id, q.subject_id] + top + [repr(q.ap), repr(q.inp)])
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2)
        fh.write("\n")


def evaluate(model, query_manifest, gallery_manifest, preprocess, test_frac=1.0,
             max_frames=TEST_FRAME_CAP, exclude_same_camera=False, out_dir=None,
             threads=1, seed=0) -> RetrievalReport:
    """Embed query and gallery sequences with ``model`` and score the ranking.

    Any checkpoint can be paired with any manifests, so a model trained on
    one dataset can be tested directly on another.
    """
    if tuple(model.cfg.input_size) != tuple(preprocess.size):
        raise ShapeError(f"model input {model.cfg.input_size} != preprocessing size {preprocess.size}")
    q_samples = load_samples(query_manifest, preprocess, max_frames=max_frames, threads=threads)
    g_samples = load_samples(gallery_manifest, preprocess, max_frames=max_frames, threads=threads)
    with torch.no_grad():
        q = embed_samples(model, q_samples, test_frac, seed)
        g = embed_samples(model, g_samples, test_frac, seed + 1)
    report = evaluate_embeddings(q, g, exclude_same_camera)
    if out_dir is not None:
        write_report(report, out_dir)
    return report
