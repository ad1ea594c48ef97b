"""Encoder-only retrieval evaluation: embeddings, distances, mAP and CMC.

Only image pixels and labels are read here. Pose annotations are never
touched, so a dataset stripped of landmarks evaluates identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

EMBEDDING_MAGIC = "fdgan-embeddings"


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # N x d float32
    identities: np.ndarray
    cameras: np.ndarray
    names: tuple = ()
    split: str = "query"
    normalized: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError(f"embedding rows must be N x d, got {self.rows.shape}")
        n = len(self.rows)
        self.identities = np.asarray(self.identities, dtype=np.int64).reshape(n)
        self.cameras = np.asarray(self.cameras, dtype=np.int64).reshape(n)
        self.names = tuple(self.names) if len(self.names) else tuple(f"{i:06d}" for i in range(n))
        if len(self.names) != n:
            raise ValueError("names must align with rows")
        if not np.isfinite(self.rows).all():
            raise ValueError("embeddings contain non-finite values")

    def __len__(self):
        return len(self.rows)

    @property
    def dim(self):
        return self.rows.shape[1]

    def normalize(self):
        norms = np.linalg.norm(self.rows.astype(np.float64), axis=1, keepdims=True)
        rows = (self.rows / np.maximum(norms, 1e-12)).astype(np.float32)
        return EmbeddingMatrix(rows, self.identities, self.cameras, self.names, self.split, True)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(f"# {EMBEDDING_MAGIC} dim={self.dim} count={len(self)} "
                     f"normalized={int(self.normalized)} split={self.split}\n")
            for name, pid, cam, row in zip(self.names, self.identities, self.cameras, self.rows):
                # 9 significant digits round-trip float32 exactly
                values = " ".join(format(float(v), ".9g") for v in row)
                fh.write(f"{name} {int(pid)} {int(cam)} {values}\n")
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) < 2 or header[0] != "#" or header[1] != EMBEDDING_MAGIC:
                raise ValueError(f"{path}: missing '# {EMBEDDING_MAGIC}' header")
            meta = dict(item.split("=", 1) for item in header[2:])
            dim, count = int(meta["dim"]), int(meta["count"])
            names, ids, cams, rows = [], [], [], []
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 3:
                    raise ValueError(f"{path}:{lineno}: expected {dim + 3} fields, got {len(parts)}")
                names.append(parts[0])
                ids.append(int(parts[1]))
                cams.append(int(parts[2]))
                rows.append([float(v) for v in parts[3:]])
        if len(rows) != count:
            raise ValueError(f"{path}: header says {count} rows, found {len(rows)}")
        rows = np.asarray(rows, dtype=np.float32).reshape(count, dim)
        return cls(rows, ids, cams, names, meta.get("split", "query"), meta.get("normalized") == "1")


def _encoder_fn(model):
    return model.encode if hasattr(model, "encode") else model


@torch.no_grad()
def extract_embeddings(model, dataset, normalize=True, batch_size=64, split=None):
    """One eval-mode encoder pass per image.

    ``model`` is an :class:`~fdgan.models.FDGAN` or a bare encoder module.
    ``dataset`` only needs ``images``, ``identities``, ``cameras`` and
    ``names``.
    """
    encode = _encoder_fn(model)
    module = model if isinstance(model, torch.nn.Module) else None
    was = module.training if module is not None else None
    if module is not None:
        module.eval()
    try:
        images = dataset.images
        out = []
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size].transpose(0, 3, 1, 2)))
            out.append(encode(chunk).float().numpy())
    finally:
        if module is not None:
            module.train(was)
    rows = np.concatenate(out) if out else np.zeros((0, _embed_dim(model)), np.float32)
    if split is None:
        splits = set(getattr(dataset, "splits", ()) or ())
        split = splits.pop() if len(splits) == 1 else "mixed"
    emb = EmbeddingMatrix(rows, dataset.identities, dataset.cameras, dataset.names, split)
    return emb.normalize() if normalize else emb


def _embed_dim(model):
    cfg = getattr(model, "cfg", None)
    return cfg.embed_dim if cfg is not None else 0


def distance_matrix(queries, gallery):
    """Squared Euclidean distances, Q x G, in float64."""
    q = queries.rows if isinstance(queries, EmbeddingMatrix) else np.asarray(queries)
    g = gallery.rows if isinstance(gallery, EmbeddingMatrix) else np.asarray(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {q.shape} vs {g.shape}")
    q = q.astype(np.float64)
    g = g.astype(np.float64)
    d = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.maximum(d, 0.0)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Protocol:
    name: str = "single-query"
    junk_same_camera: bool = True
    max_rank: int = 50

    def __post_init__(self):
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    ap: list  # one entry per evaluated query
    query_index: list  # which queries the ap entries belong to
    excluded: int  # queries with no valid relevant gallery entry
    ties: int  # equal-distance neighbours among ranked gallery entries
    protocol: Protocol = field(default_factory=Protocol)

    def top(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1]) if len(self.cmc) else 0.0

    def to_dict(self):
        return {
            "mAP": self.mAP,
            "cmc": [float(v) for v in self.cmc],
            "top1": self.top(1),
            "ap": [float(v) for v in self.ap],
            "query_index": [int(i) for i in self.query_index],
            "excluded": self.excluded,
            "ties": self.ties,
            "protocol": asdict(self.protocol),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["mAP"], np.asarray(d["cmc"], dtype=np.float64), list(d["ap"]),
                   list(d["query_index"]), d["excluded"], d["ties"], Protocol(**d["protocol"]))

    def table(self, ranks=(1, 5, 10, 20)):
        lines = [f"protocol   {self.protocol.name} (junk same-camera: {self.protocol.junk_same_camera})",
                 f"queries    {len(self.ap)} evaluated, {self.excluded} excluded",
                 f"mAP        {100 * self.mAP:6.2f}"]
        for k in ranks:
            if k <= len(self.cmc):
                lines.append(f"top-{k:<6d} {100 * self.top(k):6.2f}")
        return "\n".join(lines)


def rank_metrics(distances, query_ids, query_cams, gallery_ids, gallery_cams, protocol=None):
    """mAP and CMC from a distance matrix and labels.

    Ties are broken by gallery index. Gallery entries with the query's
    identity and camera are dropped when ``protocol.junk_same_camera`` is set.
    """
    protocol = protocol or Protocol()
    dist = np.asarray(distances, dtype=np.float64)
    qi, qc = np.asarray(query_ids), np.asarray(query_cams)
    gi, gc = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if dist.shape != (len(qi), len(gi)) or len(qc) != len(qi) or len(gc) != len(gi):
        raise ValueError("distance matrix does not match label lengths")
    if not len(qi) or not len(gi):
        raise ValueError("evaluation needs non-empty query and gallery sets")
    n_rank = min(protocol.max_rank, len(gi))
    first_hits = np.zeros(n_rank, dtype=np.int64)
    aps, used, excluded, ties = [], [], 0, 0
    for q in range(len(qi)):
        order = np.argsort(dist[q], kind="stable")
        keep = np.ones(len(gi), dtype=bool)
        if protocol.junk_same_camera:
            keep = ~((gi[order] == qi[q]) & (gc[order] == qc[q]))
        order = order[keep]
        ranked = dist[q, order]
        ties += int(np.count_nonzero(ranked[1:] == ranked[:-1]))
        hits = np.flatnonzero(gi[order] == qi[q])
        if not len(hits):
            excluded += 1
            continue
        precisions = [(i + 1) / (r + 1) for i, r in enumerate(hits)]
        aps.append(math.fsum(precisions) / len(hits))
        used.append(q)
        if hits[0] < n_rank:
            first_hits[hits[0]] += 1
    n = len(aps)
    cmc = np.cumsum(first_hits) / n if n else np.zeros(n_rank)
    m_ap = math.fsum(aps) / n if n else 0.0
    return EvalReport(m_ap, cmc, aps, used, excluded, ties, protocol)


def evaluate(queries, gallery, protocol=None):
    """Rank ``gallery`` for every query embedding and score the result."""
    if not len(queries) or not len(gallery):
        raise ValueError("evaluation needs non-empty query and gallery sets")
    dist = distance_matrix(queries, gallery)
    return rank_metrics(dist, queries.identities, queries.cameras,
                        gallery.identities, gallery.cameras, protocol)


def evaluate_model(model, query_set, gallery_set, protocol=None, batch_size=64):
    q = extract_embeddings(model, query_set, batch_size=batch_size, split="query")
    g = extract_embeddings(model, gallery_set, batch_size=batch_size, split="gallery")
    return evaluate(q, g, protocol)


def chance_average_precision(n_gallery, n_relevant):
    """Expected AP when the gallery order is a uniformly random permutation."""
    N, R = n_gallery, n_relevant
    if not 1 <= R <= N:
        raise ValueError("need 1 <= n_relevant <= n_gallery")
    if N == 1:
        return 1.0
    return math.fsum(1.0 / r + (r - 1) * (R - 1) / ((N - 1) * r) for r in range(1, N + 1)) / N
