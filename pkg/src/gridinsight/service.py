"""HTTP/JSON service exposing the trained model, dataset and annotation
pipeline to the browser UI.

All images travel as base64-encoded raw 8-bit grayscale with explicit width
and height; representations travel as plain float arrays. Every endpoint is
deterministic given the loaded snapshot and the request (seeds are explicit
request parameters). Read endpoints never mutate state; insight-registry
mutations are serialized under a lock and persisted to a line-delimited file
so human work survives restarts.
"""

from __future__ import annotations

import base64
import threading
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import annotate as annotate_mod
from . import latent as latent_mod
from . import projection as projection_mod
from .data import PgpmDataset

PROJECTION_CACHE_SIZE = 16


def image_payload(grid: np.ndarray) -> dict:
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    return {
        "width": int(pixels.shape[1]),
        "height": int(pixels.shape[0]),
        "pixels_b64": base64.b64encode(pixels.tobytes()).decode("ascii"),
    }


class RepresentationBody(BaseModel):
    mu: list[float]
    sigma: list[float]
    source_id: str | None = None


class ReconstructBody(BaseModel):
    representation: RepresentationBody


class InterpolateBody(BaseModel):
    id_a: str
    id_b: str
    t: float


class ArithmeticBody(BaseModel):
    op: str
    base: RepresentationBody
    operand: RepresentationBody | float


class AdjustBody(BaseModel):
    base: RepresentationBody
    dim: int
    value: float


class InsightBody(BaseModel):
    id: str | None = None
    name: str
    description: str = ""
    representation: RepresentationBody


class AnnotateBody(BaseModel):
    mode: str
    params: dict = {}


def _to_representation(body: RepresentationBody) -> latent_mod.Representation:
    return latent_mod.Representation(
        np.asarray(body.mu, dtype=np.float64),
        np.asarray(body.sigma, dtype=np.float64),
        body.source_id)


class SessionState:
    """Loaded model + dataset snapshot with derived caches."""

    def __init__(self, model, dataset: PgpmDataset,
                 registry_path: str | Path | None = None):
        self.model = model
        self.dataset = dataset
        self.reps = latent_mod.extract_batch(model, dataset.grids, ids=dataset.ids)
        self.index_of = {sid: i for i, sid in enumerate(dataset.ids)}
        self.distances = None  # pairwise W2, computed on first projection
        self.projections: OrderedDict[tuple, projection_mod.ProjectionResult] = OrderedDict()
        self.registry = annotate_mod.InsightRegistry(dim=self.reps[0].dim)
        self.registry_path = Path(registry_path) if registry_path else None
        if self.registry_path and self.registry_path.exists():
            self.registry = annotate_mod.InsightRegistry.from_jsonl(
                self.registry_path.read_text(), dim=self.reps[0].dim)
        self.lock = threading.Lock()

    def persist_registry(self) -> None:
        if self.registry_path:
            self.registry_path.write_text(self.registry.to_jsonl())

    def projection(self, k: int, radius: float, seed: int) -> projection_mod.ProjectionResult:
        key = (k, radius, seed)
        with self.lock:
            if key in self.projections:
                self.projections.move_to_end(key)
                return self.projections[key]
        if self.distances is None:
            self.distances = latent_mod.pairwise_w2_matrix(self.reps)
        result = projection_mod.compute_projection(
            self.reps, k=k, radius_fraction=radius, seed=seed, distances=self.distances)
        with self.lock:
            self.projections[key] = result
            while len(self.projections) > PROJECTION_CACHE_SIZE:
                self.projections.popitem(last=False)
        return result

    def representation_of(self, sample_id: str) -> latent_mod.Representation:
        if sample_id not in self.index_of:
            raise KeyError(sample_id)
        return self.reps[self.index_of[sample_id]]


def create_app(state: SessionState | None) -> FastAPI:
    app = FastAPI(title="gridinsight service")

    @app.exception_handler(ValueError)
    async def value_error_handler(request, err):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(err)})

    def need_state() -> SessionState:
        if state is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        return state

    def decode_image(rep: latent_mod.Representation) -> dict:
        s = need_state()
        return image_payload(latent_mod.reconstruct(s.model, rep, dt=s.dataset.dt).grid)

    @app.get("/api/meta")
    def meta():
        s = need_state()
        cfg = s.model.config
        return {
            "latent_dim": s.reps[0].dim,
            "layer_sizes": list(cfg.latent_layer_sizes),
            "image": {"width": cfg.image_width, "height": cfg.image_height},
            "count": len(s.dataset),
            "insight_names": list(s.dataset.insight_names),
            "dt": s.dataset.dt,
            "default_k": 6,
        }

    @app.get("/api/projection")
    def projection(k: int = 6, radius: float = 0.02, seed: int = 0):
        s = need_state()
        result = s.projection(k, radius, seed)
        points = [
            {"id": s.dataset.ids[i],
             "x": float(result.coords[i, 0]), "y": float(result.coords[i, 1]),
             "cluster": int(result.clusters[i])}
            for i in result.sampled
        ]
        return {"points": points, "k": k, "radius": radius, "seed": seed,
                "total": len(s.dataset), "sampled": len(points)}

    @app.get("/api/cluster/{cluster_id}")
    def cluster(cluster_id: int, k: int = 6, radius: float = 0.02, seed: int = 0):
        s = need_state()
        result = s.projection(k, radius, seed)
        if not 0 <= cluster_id < k:
            raise HTTPException(status_code=404, detail=f"cluster {cluster_id} not in [0,{k})")
        members = np.flatnonzero(result.clusters == cluster_id)
        average = latent_mod.average_representation([s.reps[i] for i in members]) \
            if len(members) else None
        return {
            "cluster": cluster_id,
            "members": [s.dataset.ids[i] for i in members],
            "average_representation": average.to_dict() if average else None,
            "average_image": decode_image(average) if average else None,
        }

    @app.get("/api/pgpm/{sample_id}")
    def pgpm(sample_id: str):
        s = need_state()
        if sample_id not in s.index_of:
            raise HTTPException(status_code=404, detail=f"unknown pgpm {sample_id}")
        i = s.index_of[sample_id]
        return {
            "id": sample_id,
            "image": image_payload(s.dataset.grids[i]),
            "labels": [int(b) for b in s.dataset.labels[i]],
            "insight_names": list(s.dataset.insight_names),
            "dt": s.dataset.dt,
        }

    @app.get("/api/representation/{sample_id}")
    def representation(sample_id: str):
        s = need_state()
        try:
            return s.representation_of(sample_id).to_dict()
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown pgpm {sample_id}")

    @app.post("/api/reconstruct")
    def reconstruct(body: ReconstructBody):
        rep = _to_representation(body.representation)
        return {"image": decode_image(rep)}

    @app.post("/api/interpolate")
    def interpolate(body: InterpolateBody):
        s = need_state()
        try:
            r1 = s.representation_of(body.id_a)
            r2 = s.representation_of(body.id_b)
        except KeyError as err:
            raise HTTPException(status_code=404, detail=f"unknown pgpm {err.args[0]}")
        mixed = latent_mod.interpolate(r1, r2, body.t)
        return {"representation": mixed.to_dict(), "image": decode_image(mixed)}

    @app.post("/api/arithmetic")
    def arithmetic(body: ArithmeticBody):
        base = _to_representation(body.base)
        operand = (body.operand if isinstance(body.operand, float)
                   else _to_representation(body.operand))
        out = latent_mod.arithmetic(body.op, base, operand)
        return {"representation": out.to_dict(), "image": decode_image(out)}

    @app.post("/api/adjust")
    def adjust(body: AdjustBody):
        out = latent_mod.adjust_dimension(_to_representation(body.base), body.dim, body.value)
        return {"representation": out.to_dict(), "image": decode_image(out)}

    @app.get("/api/insights")
    def list_insights():
        s = need_state()
        return {"insights": [r.to_dict() for r in s.registry.list()]}

    @app.post("/api/insights", status_code=201)
    def add_insight(body: InsightBody):
        s = need_state()
        rep = _to_representation(body.representation)
        insight_id = body.id or f"insight-{len(s.registry) + 1:03d}"
        record = annotate_mod.InsightRecord(
            insight_id, body.name, body.description, rep,
            thumbnail=latent_mod.reconstruct(s.model, rep).grid)
        with s.lock:
            if any(r.id == insight_id for r in s.registry.list()):
                raise HTTPException(status_code=409,
                                    detail=f"duplicate insight id {insight_id}")
            s.registry.add(record)
            s.persist_registry()
        return record.to_dict()

    @app.put("/api/insights/{insight_id}")
    def update_insight(insight_id: str, body: InsightBody):
        s = need_state()
        rep = _to_representation(body.representation)
        record = annotate_mod.InsightRecord(
            insight_id, body.name, body.description, rep,
            thumbnail=latent_mod.reconstruct(s.model, rep).grid)
        with s.lock:
            try:
                s.registry.update(record)
            except KeyError:
                raise HTTPException(status_code=404, detail=f"unknown insight {insight_id}")
            s.persist_registry()
        return record.to_dict()

    @app.delete("/api/insights/{insight_id}")
    def delete_insight(insight_id: str):
        s = need_state()
        with s.lock:
            try:
                s.registry.remove(insight_id)
            except KeyError:
                raise HTTPException(status_code=404, detail=f"unknown insight {insight_id}")
            s.persist_registry()
        return {"removed": insight_id}

    @app.post("/api/annotate")
    def annotate(body: AnnotateBody):
        s = need_state()
        params = body.params or {}
        if body.mode not in ("unsupervised", "knn"):
            raise HTTPException(status_code=400, detail=f"unknown mode {body.mode!r}")
        source = params.get("source", "auto")
        if body.mode == "unsupervised" and source == "registry":
            if len(s.registry) == 0:
                raise HTTPException(status_code=400, detail="insight registry is empty")
            results = annotate_mod.unsupervised_annotate(
                s.reps, s.registry,
                bandwidth=params.get("bandwidth"),
                threshold=params.get("threshold", 0.5))
            counts = {rec.id: 0 for rec in s.registry.list()}
            for res in results:
                for rec, bit in zip(s.registry.list(), res.bits):
                    if bit:
                        counts[rec.id] += 1
            return {"mode": body.mode, "source": "registry",
                    "results": [r.to_dict() for r in results], "counts": counts}
        result = annotate_mod.cross_validate(
            s.dataset, s.model, body.mode,
            folds=params.get("folds", 5),
            label_fraction=params.get("label_fraction", 1.0),
            seed=params.get("seed", 0),
            knn_k=params.get("knn_k", 15),
            reps=s.reps)
        return {"mode": body.mode, "source": "auto", "metrics": _metrics_dict(result)}

    return app


def _metrics_dict(result: annotate_mod.CrossValResult) -> dict:
    return {
        "method": result.method,
        "folds": result.folds,
        "label_fraction": result.label_fraction,
        "per_class_mean": [None if np.isnan(v) else float(v) for v in result.per_class_mean],
        "per_class_std": [None if np.isnan(v) else float(v) for v in result.per_class_std],
        "map_mean": result.map_mean,
        "map_std": result.map_std,
        "ma_mean": result.ma_mean,
        "ma_std": result.ma_std,
        "fold_maps": result.fold_maps,
    }
