"""Gallery feature extraction, protocol filtering, ranking and CMC / mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .prototypes import extract_spectral_features


@dataclass
class GalleryIndex:
    features: np.ndarray  # [G, M * d_e]
    identities: np.ndarray
    cameras: np.ndarray
    times: np.ndarray
    uids: np.ndarray

    def __len__(self):
        return len(self.identities)

    @classmethod
    def from_records(cls, features, records):
        return cls(
            np.asarray(features, dtype=np.float64),
            np.array([r.identity for r in records], dtype=np.int64),
            np.array([r.camera for r in records], dtype=np.int64),
            np.array([r.time_label for r in records], dtype=np.int64),
            np.array([r.uid for r in records], dtype=object),
        )

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return GalleryIndex(self.features[idx], self.identities[idx], self.cameras[idx], self.times[idx],
                            self.uids[idx])

    @staticmethod
    def concat(*indexes):
        return GalleryIndex(*(np.concatenate([getattr(g, f) for g in indexes]) for f in
                              ("features", "identities", "cameras", "times", "uids")))


@dataclass
class RankingResult:
    order: np.ndarray  # [Q, G] gallery indices, ascending distance, ties by index
    valid: np.ndarray  # [Q, G] bool, gallery order
    distances: np.ndarray


def concat_spectra(per_spectra, order=None):
    """[S, M, d] unit-norm per-spectra features -> [S, M*d], segments in ``order`` (indices)."""
    per_spectra = np.asarray(per_spectra)
    if order is not None:
        per_spectra = per_spectra[:, list(order)]
    return per_spectra.reshape(per_spectra.shape[0], -1)


def extract_features(model, images, records, spectra_order=None, batch_size=64):
    """Concatenate eval-mode per-spectra features in SpectraSet order (or ``spectra_order`` names)."""
    if images.shape[1] != model.spectra.count:
        raise ValueError(f"samples carry {images.shape[1]} spectra, model expects {model.spectra.count}")
    feats = extract_spectral_features(model, images, batch_size).numpy()
    order = None if spectra_order is None else [model.spectra.index(n) for n in spectra_order]
    return GalleryIndex.from_records(concat_spectra(feats, order).astype(np.float64), records)


def strict_filter(query, gallery, mode="strict", same_camera=False):
    """Validity mask over ``gallery`` for one query entry.

    ``query`` carries (uid, identity, camera, time); ``gallery`` is a GalleryIndex or
    a sequence of such tuples. The query's own entry is always invalid. Strict mode
    also drops entries sharing identity and time label with the query;
    ``same_camera`` drops same-identity same-camera entries in either mode.
    """
    uid, ident, cam, time = query
    if isinstance(gallery, GalleryIndex):
        g_uid, g_id, g_cam, g_time = gallery.uids, gallery.identities, gallery.cameras, gallery.times
    else:
        gallery = list(gallery)
        if not gallery:
            return np.zeros(0, dtype=bool)
        g_uid, g_id, g_cam, g_time = (np.array(col, dtype=object if i == 0 else np.int64)
                                      for i, col in enumerate(zip(*gallery)))
    invalid = g_uid == uid
    if mode == "strict":
        invalid |= (g_id == ident) & (g_time == time)
    elif mode != "standard":
        raise ValueError(f"unknown protocol {mode!r}")
    if same_camera:
        invalid |= (g_id == ident) & (g_cam == cam)
    return ~np.asarray(invalid, dtype=bool)


def protocol_masks(query, gallery, mode="standard", same_camera=False):
    """[Q, G] validity for every query in ``query`` (a GalleryIndex)."""
    qid, gid = query.identities[:, None], gallery.identities[None, :]
    invalid = query.uids[:, None] == gallery.uids[None, :]
    if mode == "strict":
        invalid = invalid | ((qid == gid) & (query.times[:, None] == gallery.times[None, :]))
    elif mode != "standard":
        raise ValueError(f"unknown protocol {mode!r}")
    if same_camera:
        invalid = invalid | ((qid == gid) & (query.cameras[:, None] == gallery.cameras[None, :]))
    return ~invalid


def euclidean_distances(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.clip(d2, 0.0, None))


def rank(query_features, gallery_features, valid):
    dist = euclidean_distances(query_features, gallery_features)
    order = np.argsort(dist, axis=1, kind="stable")
    return RankingResult(order, np.asarray(valid, dtype=bool), dist)


def _ranked_hits(result, query_ids, gallery_ids):
    order = result.order
    valid = np.take_along_axis(result.valid, order, axis=1)
    matches = np.asarray(gallery_ids)[order] == np.asarray(query_ids)[:, None]
    good = matches & valid
    valid_rank = np.cumsum(valid, axis=1) - 1  # position among valid entries
    return good, valid_rank


def _counted(good):
    counted = good.any(axis=1)
    if not counted.any():
        raise ValueError("no evaluable queries: no query has a valid positive in the gallery")
    return counted


def compute_cmc(result, query_ids, gallery_ids):
    """Rank-k accuracy for k = 1..G over queries with at least one valid positive."""
    good, valid_rank = _ranked_hits(result, query_ids, gallery_ids)
    counted = _counted(good)
    first = np.argmax(good[counted], axis=1)
    first_rank = valid_rank[counted][np.arange(first.size), first]
    g = good.shape[1]
    hits = (first_rank[:, None] <= np.arange(g)[None, :]).sum(axis=0)
    return hits / counted.sum()


def compute_map(result, query_ids, gallery_ids):
    good, valid_rank = _ranked_hits(result, query_ids, gallery_ids)
    counted = _counted(good)
    aps = []
    for row_good, row_rank in zip(good[counted], valid_rank[counted]):
        pos = row_rank[row_good].astype(np.float64)
        precision = np.arange(1, pos.size + 1, dtype=np.float64) / (pos + 1.0)
        aps.append(np.cumsum(precision)[-1] / pos.size)
    return float(np.cumsum(aps)[-1] / len(aps))


def _at(cmc, k):
    return float(cmc[min(k, len(cmc)) - 1])


def evaluate_indexes(query, gallery, mode="standard", same_camera=False):
    valid = protocol_masks(query, gallery, mode, same_camera)
    result = rank(query.features, gallery.features, valid)
    cmc = compute_cmc(result, query.identities, gallery.identities)
    return {
        "mAP": compute_map(result, query.identities, gallery.identities),
        "rank-1": _at(cmc, 1),
        "rank-5": _at(cmc, 5),
        "rank-10": _at(cmc, 10),
        "cmc": [float(x) for x in cmc],
        "protocol": mode,
        "n_query": int(len(query)),
        "n_gallery": int(len(gallery)),
    }


@torch.no_grad()
def evaluate_model(model, dataset, size, mode="standard", same_camera=False, query_in_gallery=True):
    """Extract query/gallery features with ``model`` and score them.

    With ``query_in_gallery`` the query records are also part of the gallery and
    each query's own entry is masked out.
    """
    query_ds, gallery_ds = dataset.split("query"), dataset.split("gallery")
    query = extract_features(model, query_ds.load_images(size), query_ds.records)
    if len(gallery_ds):
        gallery = extract_features(model, gallery_ds.load_images(size), gallery_ds.records)
        gallery = GalleryIndex.concat(query, gallery) if query_in_gallery else gallery
    else:
        gallery = query
    return evaluate_indexes(query, gallery, mode, same_camera)


def write_metrics(metrics, json_path, csv_path=None):
    json_path = Path(json_path)
    json_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "accuracy"])
            for k, acc in enumerate(metrics["cmc"], start=1):
                writer.writerow([k, repr(acc)])
