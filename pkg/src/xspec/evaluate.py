"""Gallery/probe protocols, feature extraction, CMC / mAP and embedding export."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .data import Dataset, SieScheme, assign_sie_index
from .errors import ShapeError
from .model import ModelParams, forward_batch

log = logging.getLogger(__name__)

REPORT_HEADER = "protocol,rank1,rank5,rank10,mAP"


@dataclass(frozen=True)
class DomainSelector:
    """A set of domains, optionally restricted to one range tag.

    Parsed from strings like ``"0"``, ``"IR"``, ``"1;2;3@long"`` or ``"VIS@short"``.
    """
    domains: tuple
    range_tag: Optional[str] = None

    @classmethod
    def parse(cls, text, dataset: Dataset):
        if isinstance(text, DomainSelector):
            return text
        if isinstance(text, (int, np.integer)):
            return cls((int(text),))
        spec, _, tag = str(text).partition("@")
        doms = []
        for part in spec.replace(",", ";").split(";"):
            part = part.strip()
            if not part:
                continue
            if part in dataset.domain_names:
                doms.append(dataset.domain_names.index(part))
            elif part == "IR" and "IR" not in dataset.domain_names and len(dataset.domain_names) > 2:
                doms.extend(range(1, dataset.n_domains))    # any non-visible spectrum
            else:
                doms.append(int(part))
        return cls(tuple(doms), tag or None)

    def matches(self, record):
        return record.domain in self.domains and (self.range_tag is None or record.range_tag == self.range_tag)

    def label(self, dataset: Dataset):
        names = "+".join(dataset.domain_name(d) for d in self.domains)
        return names + (f"@{self.range_tag}" if self.range_tag else "")


@dataclass
class Protocol:
    name: str
    gallery: list           # record indices
    gallery_ids: np.ndarray
    probe: list
    probe_ids: np.ndarray
    gallery_domain: str
    probe_domain: str
    seed: int
    excluded: int = 0       # identities dropped for lacking images on one side


def build_protocol(dataset: Dataset, gallery_domain, probe_domain, n_gallery=10, n_probe=100, seed=0,
                   name=None) -> Protocol:
    """Per identity, sample up to ``n_gallery`` / ``n_probe`` images without replacement."""
    gsel = DomainSelector.parse(gallery_domain, dataset)
    psel = DomainSelector.parse(probe_domain, dataset)
    rng = np.random.default_rng(seed)
    by_id_g, by_id_p = {}, {}
    for k, r in enumerate(dataset.records):
        if gsel.matches(r):
            by_id_g.setdefault(r.identity, []).append(k)
        if psel.matches(r):
            by_id_p.setdefault(r.identity, []).append(k)
    gallery, gids, probe, pids = [], [], [], []
    excluded = 0
    for ident in dataset.identities():
        g_pool = by_id_g.get(ident, [])
        if not g_pool or not by_id_p.get(ident):
            excluded += 1
            continue
        g_pick = sorted(rng.choice(g_pool, size=min(n_gallery, len(g_pool)), replace=False).tolist())
        taken = set(g_pick)
        p_pool = [k for k in by_id_p[ident] if k not in taken]
        if not p_pool:
            excluded += 1
            continue
        p_pick = sorted(rng.choice(p_pool, size=min(n_probe, len(p_pool)), replace=False).tolist())
        gallery += g_pick
        gids += [ident] * len(g_pick)
        probe += p_pick
        pids += [ident] * len(p_pick)
    if excluded:
        log.warning("%d identities lack gallery or probe images and were excluded", excluded)
    glabel, plabel = gsel.label(dataset), psel.label(dataset)
    return Protocol(name or f"{glabel}_to_{plabel}", gallery, np.asarray(gids, dtype=np.int64), probe,
                    np.asarray(pids, dtype=np.int64), glabel, plabel, seed, excluded)


def _threads():
    try:
        return max(1, int(os.environ.get("XSPEC_THREADS", "1")))
    except ValueError:
        return 1


def extract_features(params: ModelParams, records: Sequence, sie_scheme: Optional[SieScheme],
                     normalize=True, batch_size=64, threads=None) -> np.ndarray:
    """One feature row per record, L2-normalized unless ``normalize`` is off.

    Runs without a tape. Batches may be spread over ``threads`` workers
    (default ``XSPEC_THREADS`` or 1); row order always follows ``records``.
    """
    cfg = params.config
    n = len(records)
    if n == 0:
        return np.zeros((0, cfg.feature_dim))
    use_sie = cfg.lambda_sie != 0

    def run(lo):
        chunk = records[lo:lo + batch_size]
        images = np.stack([r.load() for r in chunk])
        sie = [assign_sie_index(r, sie_scheme) for r in chunk] if use_sie else np.zeros(len(chunk), dtype=np.int64)
        feats, _ = forward_batch(images, sie, params)
        return feats.data

    starts = range(0, n, batch_size)
    workers = threads or _threads()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    feats = np.concatenate(parts, axis=0)
    if normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    return feats


def distance_matrix(probe_feats, gallery_feats):
    q = np.ascontiguousarray(probe_feats, dtype=np.float64)
    g = np.ascontiguousarray(gallery_feats, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"probe features {q.shape} and gallery features {g.shape} differ in dimension")
    return np.sqrt(np.maximum(kernels.sqdist(q, g), 0.0))


def rank_queries(probe_feats, gallery_feats):
    """Gallery indices per query, nearest first; ties keep gallery order."""
    return np.argsort(distance_matrix(probe_feats, gallery_feats), axis=1, kind="stable")


def _hits(rankings, probe_ids, gallery_ids):
    return kernels.hits(np.ascontiguousarray(rankings, dtype=np.int64), np.asarray(probe_ids, dtype=np.int64),
                        np.asarray(gallery_ids, dtype=np.int64))


def cmc(rankings, probe_ids, gallery_ids, k_max=None):
    """Rank-k accuracies for k = 1..k_max (queries without any match never count)."""
    rankings = np.asarray(rankings)
    k_max = rankings.shape[1] if k_max is None else k_max
    if rankings.shape[0] == 0:
        return np.zeros(k_max)
    first = kernels.first_hit(_hits(rankings, probe_ids, gallery_ids))
    ks = np.arange(k_max)
    return ((first[:, None] >= 0) & (first[:, None] <= ks[None, :])).mean(axis=0)


def average_precisions(rankings, probe_ids, gallery_ids):
    """Per-query AP; NaN for queries with no relevant gallery item."""
    return kernels.average_precision(_hits(rankings, probe_ids, gallery_ids))


def mean_ap(rankings, probe_ids, gallery_ids):
    ap = average_precisions(rankings, probe_ids, gallery_ids)
    valid = ~np.isnan(ap)
    if not valid.any():
        return 0.0
    return float(ap[valid].mean())


@dataclass
class RankingResult:
    rankings: np.ndarray = field(repr=False)
    ap: np.ndarray = field(repr=False)
    cmc: np.ndarray = field(repr=False)
    mAP: float
    no_relevant: int = 0

    def rank(self, k):
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def evaluate_features(probe_feats, probe_ids, gallery_feats, gallery_ids, k_max=None) -> RankingResult:
    rankings = rank_queries(probe_feats, gallery_feats)
    ap = average_precisions(rankings, probe_ids, gallery_ids)
    curve = cmc(rankings, probe_ids, gallery_ids, k_max)
    valid = ~np.isnan(ap)
    return RankingResult(rankings, ap, curve, float(ap[valid].mean()) if valid.any() else 0.0,
                         int((~valid).sum()))


def evaluate_protocol(params: ModelParams, dataset: Dataset, protocol: Protocol,
                      sie_scheme: Optional[SieScheme], normalize=True) -> RankingResult:
    gf = extract_features(params, [dataset[k] for k in protocol.gallery], sie_scheme, normalize)
    pf = extract_features(params, [dataset[k] for k in protocol.probe], sie_scheme, normalize)
    return evaluate_features(pf, protocol.probe_ids, gf, protocol.gallery_ids)


def report_line(name, result: RankingResult):
    return f"{name},{result.rank(1)!r},{result.rank(5)!r},{result.rank(10)!r},{result.mAP!r}"


def write_report(rows, path):
    """``rows`` is a list of ``(protocol name, RankingResult)``."""
    lines = [REPORT_HEADER] + [report_line(name, res) for name, res in rows]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def export_embeddings(features, records: Sequence, path):
    """Write ``record_path,identity,domain,camera,f_0..f_{d-1}`` with 17 significant digits."""
    features = np.asarray(features, dtype=np.float64)
    dim = features.shape[1] if features.ndim == 2 else 0
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["record_path", "identity", "domain", "camera"] + [f"f_{i}" for i in range(dim)])
            for rec, row in zip(records, features):
                cam = "" if rec.camera is None else rec.camera
                writer.writerow([rec.path or "", rec.identity, rec.domain, cam] + [f"{v:.17g}" for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def read_embeddings(path):
    """Inverse of :func:`export_embeddings`: ``(meta rows, feature matrix)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 4
    meta = [tuple(r[:4]) for r in body]
    feats = np.array([[float(v) for v in r[4:]] for r in body], dtype=np.float64).reshape(len(body), dim)
    return meta, feats
