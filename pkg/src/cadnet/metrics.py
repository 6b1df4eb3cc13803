"""Retrieval (single-shot CMC), image quality (SSIM / PSNR), evaluation reports, embedding export."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .data import LabeledImage, MlrDataset, synth_lr_pixels

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


# ---------------------------------------------------------------------------
# retrieval


def distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distances, (Q, D) x (G, D) -> (Q, G), in float64."""
    q = np.atleast_2d(query).astype(np.float64)
    g = np.atleast_2d(gallery).astype(np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding lengths differ: {q.shape[1]} vs {g.shape[1]}")
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


def retrieve(query_u: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by ascending distance; ties keep gallery order."""
    gallery = np.asarray(gallery)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    d = distances(query_u, gallery)[0]
    return np.argsort(d, kind="stable")


def cmc_from_ranks(ranks: Sequence[int], gallery_size: int) -> np.ndarray:
    """``CMC(k)`` = fraction of queries whose true match sits at rank <= k (1-based)."""
    ranks = np.asarray(ranks)
    return np.array([(ranks <= k).mean() for k in range(1, gallery_size + 1)])


def match_ranks(dist: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """1-based rank of the first correct gallery entry for every query."""
    order = np.argsort(dist, axis=1, kind="stable")
    hits = gallery_ids[order] == np.asarray(query_ids)[:, None]
    if not hits.any(1).all():
        raise ValueError("a query identity is missing from the gallery")
    return hits.argmax(1) + 1


def single_shot_cmc(
    query_u: np.ndarray,
    query_ids: np.ndarray,
    gallery_u: np.ndarray,
    gallery_ids: np.ndarray,
    trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Average CMC over ``trials`` galleries holding one random image per identity."""
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    idents = np.unique(gallery_ids)
    missing = set(np.unique(query_ids)) - set(idents)
    if missing:
        raise ValueError(f"query identities missing from gallery pool: {sorted(missing)[:5]}")
    pools = [np.flatnonzero(gallery_ids == i) for i in idents]
    dist_all = distances(query_u, gallery_u)
    curves = []
    for _ in range(trials):
        pick = np.array([rng.choice(pool) for pool in pools])
        ranks = match_ranks(dist_all[:, pick], query_ids, gallery_ids[pick])
        curves.append(cmc_from_ranks(ranks, len(pick)))
    return np.mean(curves, axis=0)


# ---------------------------------------------------------------------------
# image quality


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every ``window x window`` position (stride 1) and channel.

    Window statistics use uniform weights and population (1/N) moments; the
    dynamic range is 1.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` in dB for unit-range images; zero MSE maps to 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# model inference


@dataclass
class Embeddings:
    u: np.ndarray
    w: np.ndarray
    recovered: np.ndarray


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CADNET_THREADS", "1")))
    except ValueError:
        return 1


def embed(model, pixels: np.ndarray, chunk: int = 64) -> Embeddings:
    """Joint embedding ``u``, pooled invariant feature ``w = GAP(f)`` and ``G(E(x))``."""

    def run(x):
        out = model.forward(x)
        return out.u.data, T.global_avg_pool(out.f).data, out.recovered.data

    pixels = np.asarray(pixels, dtype=T.DTYPE)
    chunks = [pixels[i : i + chunk] for i in range(0, len(pixels), chunk)]
    with T.no_grad():
        if _threads() > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(_threads()) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
    return Embeddings(*(np.concatenate([p[i] for p in parts]) for i in range(3)))


def recover(model, pixels: np.ndarray) -> np.ndarray:
    return embed(model, pixels[None] if pixels.ndim == 3 else pixels).recovered


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    cmc: list[float]
    ssim_mean: float
    psnr_mean: float
    per_rate: dict[int, dict[str, float]] = field(default_factory=dict)
    trials: int = 10

    def to_json(self) -> str:
        d = asdict(self)
        d["per_rate"] = {str(k): v for k, v in self.per_rate.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d["per_rate"] = {int(k): v for k, v in d["per_rate"].items()}
        return cls(**d)

    def csv_header(self) -> list[str]:
        cols = ["rank1", "rank5", "rank10", "ssim_mean", "psnr_mean", "trials"]
        for r in sorted(self.per_rate):
            cols += [f"r{r}_rank1", f"r{r}_ssim", f"r{r}_psnr"]
        return cols

    def csv_row(self) -> list[float]:
        row = [self.rank1, self.rank5, self.rank10, self.ssim_mean, self.psnr_mean, self.trials]
        for r in sorted(self.per_rate):
            e = self.per_rate[r]
            row += [e["rank1"], e["ssim"], e["psnr"]]
        return row


def _quality(recovered: np.ndarray, sources: list[np.ndarray | None]) -> tuple[float, float]:
    pairs = [(rec, src) for rec, src in zip(recovered, sources) if src is not None]
    if not pairs:
        return float("nan"), float("nan")
    return float(np.mean([ssim(r, s) for r, s in pairs])), float(np.mean([psnr(r, s) for r, s in pairs]))


def _at(cmc: np.ndarray, k: int) -> float:
    return float(cmc[min(k, len(cmc)) - 1])


def rate_queries(dataset: MlrDataset, rate: int) -> list[LabeledImage]:
    """Queries at ``rate``: re-synthesized from HR sources when present, else stored ones."""
    out = []
    for q in dataset.queries:
        if q.source is not None:
            px = q.source if rate == 1 else synth_lr_pixels(q.source, rate)
            out.append(LabeledImage(px, q.identity, q.camera, rate, source=q.source))
        elif q.rate == rate:
            out.append(q)
    return out


def evaluate(
    model,
    dataset: MlrDataset,
    rates: Sequence[int] = (2, 3, 4, 8),
    trials: int = 10,
    seed: int = 0,
) -> EvalReport:
    """Single-shot cross-resolution retrieval plus recovery quality, overall and per rate."""
    from .trainer import SEED_GALLERY

    gallery_ids = np.array([g.identity for g in dataset.gallery])
    gal = embed(model, np.stack([g.pixels for g in dataset.gallery]))

    def score(queries: list[LabeledImage], tag: int):
        emb = embed(model, np.stack([q.pixels for q in queries]))
        rng = np.random.default_rng([seed, SEED_GALLERY, tag])
        ids = np.array([q.identity for q in queries])
        curve = single_shot_cmc(emb.u, ids, gal.u, gallery_ids, trials, rng)
        return curve, _quality(emb.recovered, [q.source for q in queries])

    curve, (s, p) = score(dataset.queries, 0)
    per_rate = {}
    for r in rates:
        qs = rate_queries(dataset, int(r))
        if not qs:
            raise ValueError(f"no queries available at rate {r} (no HR sources and none stored at that rate)")
        c, (sr, pr) = score(qs, int(r))
        per_rate[int(r)] = {"rank1": float(c[0]), "ssim": sr, "psnr": pr}
    return EvalReport(
        rank1=_at(curve, 1),
        rank5=_at(curve, 5),
        rank10=_at(curve, 10),
        cmc=[float(v) for v in curve],
        ssim_mean=s,
        psnr_mean=p,
        per_rate=per_rate,
        trials=trials,
    )


# ---------------------------------------------------------------------------
# embedding export


def multi_rate_images(dataset: MlrDataset, rates: Sequence[int] = (1, 2, 4, 8)) -> list[LabeledImage]:
    """Test images of every query identity at each rate (rate 1 = the HR source)."""
    out = []
    for r in rates:
        out.extend(rate_queries(dataset, int(r)))
    return out


def export_embeddings(model, images: Sequence[LabeledImage], path: Path | str) -> int:
    """CSV ``identity,rate,w_0..w_{d-1},u_0..u_{2d-1}``; returns the row count."""
    emb = embed(model, np.stack([im.pixels for im in images]))
    d, du = emb.w.shape[1], emb.u.shape[1]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "rate", *(f"w_{i}" for i in range(d)), *(f"u_{i}" for i in range(du))])
        for im, w, u in zip(images, emb.w, emb.u):
            writer.writerow([im.identity, im.rate, *(repr(float(v)) for v in w), *(repr(float(v)) for v in u)])
    return len(images)


def read_embeddings(path: Path | str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(identity, rate, w, u)`` arrays from an export file."""
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    w_cols = [i for i, h in enumerate(header) if h.startswith("w_")]
    u_cols = [i for i, h in enumerate(header) if h.startswith("u_")]
    return rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, w_cols], rows[:, u_cols]


def cluster_ratio(features: np.ndarray, identities: np.ndarray) -> float:
    """Mean intra-identity distance divided by mean inter-identity distance."""
    d = distances(features, features)
    ids = np.asarray(identities)
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    return float(d[same & off].mean() / d[~same].mean())
