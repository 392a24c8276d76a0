"""HTTP facade over the annotation loop.

One session per process. Candidate proposal and metric reads are cheap and
run on the request thread; fine-tuning runs on a single background worker and
concurrent requests get a 409 while it is busy. All state mutations go
through module-level helpers guarded by a lock, so GETs always see a
consistent snapshot.
"""

import io
import json
import os
import threading

import numpy as np

from .data import BiasedDatasetSpec, generate_biased_dataset, \
    load_exported_dataset
from .errors import ConfigError
from .guidance import Annotation
from .loop import LoopConfig, Session
from .model import load_model

# Dark-blue -> red -> yellow heat palette, 256 RGB rows. The UI fetches this
# exact table via /api/palette so overlays render identically on both sides.
def _build_palette():
    stops = np.array([[13, 8, 135], [126, 3, 168], [204, 71, 120],
                      [248, 149, 64], [240, 249, 33]], dtype=np.float64)
    xs = np.linspace(0.0, 1.0, len(stops))
    ts = np.linspace(0.0, 1.0, 256)
    cols = np.stack([np.interp(ts, xs, stops[:, c]) for c in range(3)], axis=1)
    return cols.round().astype(np.uint8)


PALETTE = _build_palette()


class ApiConfig:
    """Service configuration; see from_file for the JSON layout."""

    def __init__(self, host="127.0.0.1", port=8000, dataset=None,
                 checkpoint_path=None, static_path=None, session=None):
        self.host = host
        self.port = int(port)
        self.dataset = dataset or {"synthetic": {}}
        self.checkpoint_path = checkpoint_path
        self.static_path = static_path
        self.session = session or {}
        self.validate()

    def validate(self):
        if not (0 < self.port < 65536):
            raise ConfigError(f"invalid port {self.port}")
        if self.checkpoint_path and not os.path.exists(self.checkpoint_path):
            raise ConfigError(f"checkpoint not found: {self.checkpoint_path}")
        if self.static_path and not os.path.isdir(self.static_path):
            raise ConfigError(f"static path not found: {self.static_path}")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        host = os.environ.get("ATTNGUIDE_HOST", raw.get("host", "127.0.0.1"))
        port = os.environ.get("ATTNGUIDE_PORT", raw.get("port", 8000))
        return cls(host=host, port=port, dataset=raw.get("dataset"),
                   checkpoint_path=raw.get("checkpoint_path"),
                   static_path=raw.get("static_path"),
                   session=raw.get("session"))


def load_datasets(dataset_cfg):
    """Resolve the configured data source into the four standard splits."""
    if "dir" in dataset_cfg:
        root = dataset_cfg["dir"]
        return {name: load_exported_dataset(os.path.join(root, name))
                for name in ("train", "val", "test_biased",
                             "test_decorrelated")}
    spec = BiasedDatasetSpec(**dataset_cfg.get("synthetic", {}))
    return generate_biased_dataset(spec)


def _loop_config(defaults, overrides):
    merged = dict(defaults)
    merged.update(overrides or {})
    allowed = {"strategy", "batch_size", "candidates_shown", "epochs", "lr",
               "max_grad_norm", "seed", "target_class", "eval_attention",
               "eval_limit"}
    unknown = set(merged) - allowed
    if unknown:
        raise ConfigError(f"unknown session options: {sorted(unknown)}")
    return LoopConfig(**merged)


def render_png(array):
    """Encode an (H,W) float map or (C,H,W)/(H,W,3) image as PNG bytes."""
    from PIL import Image

    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):  # channel-first image
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 2:  # heat map -> palette
        scaled = np.clip(arr, 0.0, 1.0)
        arr = PALETTE[(scaled * 255).round().astype(np.uint8)]
    else:
        arr = (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class ServiceState:
    """Everything mutable behind the API, guarded by a single lock."""

    def __init__(self, datasets, model, session_defaults):
        self.lock = threading.Lock()
        self.datasets = datasets
        self.model = model
        self.session_defaults = dict(session_defaults)
        self.session = None
        self.revealed = 0
        self.training = False
        self.worker = None
        self.last_error = None

    def phase(self):
        if self.session is None:
            return "idle"
        if self.training:
            return "training"
        if not self.session.candidates:
            return "selecting"
        return "awaiting_annotations"


def create_app(datasets=None, model=None, config=None, workdir=None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import Response

    if config is None:
        config = ApiConfig()
    if datasets is None:
        datasets = load_datasets(config.dataset)
    if model is None:
        if not config.checkpoint_path:
            raise ConfigError("no model: set checkpoint_path or pass a model")
        model, _ = load_model(config.checkpoint_path)

    app = FastAPI(title="attnguide")
    state = ServiceState(datasets, model, config.session)
    app.state.service = state

    def require_session():
        if state.session is None:
            raise HTTPException(404, detail={"error": "no_session"})
        return state.session

    def reject_if_training():
        if state.training:
            raise HTTPException(409, detail={"error": "training"})

    @app.get("/api/status")
    def status():
        with state.lock:
            body = {"phase": state.phase(), "error": state.last_error}
            if state.session is not None:
                sess = state.session
                done = sum(1 for c in sess.candidates if c.annotated)
                body.update(round=sess.round,
                            labeled=len(sess.labeled_ids),
                            unlabeled=len(sess.unlabeled_ids),
                            candidates=len(sess.candidates),
                            annotated=done,
                            revealed=state.revealed)
            return body

    @app.post("/api/session", status_code=201)
    def start_session(overrides: dict | None = None):
        with state.lock:
            if state.session is not None:
                raise HTTPException(409, detail={"error": "session_exists"})
            try:
                cfg = _loop_config(state.session_defaults, overrides)
                cfg.validate()
            except (ConfigError, TypeError) as exc:
                raise HTTPException(400, detail={"error": "bad_config",
                                                 "message": str(exc)})
            sess = Session(state.datasets, state.model, cfg, workdir=workdir)
            sess.record_baseline_metrics()
            sess.propose_candidates()
            state.session = sess
            state.revealed = min(cfg.candidates_shown, len(sess.candidates))
            state.last_error = None
            return {"session_id": sess.session_id, "round": sess.round,
                    "candidates": len(sess.candidates)}

    @app.delete("/api/session")
    def stop_session():
        with state.lock:
            reject_if_training()
            state.session = None
            state.revealed = 0
            return {"phase": "idle"}

    def _candidate_body(c):
        return {
            "image_id": c.image_id,
            "annotated": c.annotated,
            "attention": [[float(v) for v in row]
                          for row in c.attention.values],
            "regions": [[int(v) for v in row] for row in c.labeling.labels],
            "region_count": c.labeling.region_count,
            "image_url": f"/api/image/{c.image_id}",
            "attention_url": f"/api/attention/{c.image_id}",
        }

    @app.get("/api/candidates")
    def candidates():
        with state.lock:
            sess = require_session()
            shown = sess.candidates[:state.revealed]
            return {"revealed": state.revealed,
                    "total": len(sess.candidates),
                    "candidates": [_candidate_body(c) for c in shown]}

    @app.post("/api/next")
    def reveal_next():
        with state.lock:
            sess = require_session()
            step = sess.config.candidates_shown
            state.revealed = min(state.revealed + step, len(sess.candidates))
            return {"revealed": state.revealed,
                    "total": len(sess.candidates)}

    def _find_image(image_id):
        for ds in state.datasets.values():
            if image_id in ds.ids:
                return ds.images[ds.index_of(image_id)]
        raise HTTPException(404, detail={"error": "unknown_image",
                                         "image_id": image_id})

    @app.get("/api/image/{image_id}")
    def image_bytes(image_id: str):
        return Response(render_png(_find_image(image_id)),
                        media_type="image/png")

    @app.get("/api/attention/{image_id}")
    def attention_bytes(image_id: str):
        with state.lock:
            sess = require_session()
            cand = sess.candidate(image_id)
            if cand is None:
                raise HTTPException(404, detail={"error": "not_a_candidate",
                                                 "image_id": image_id})
            return Response(render_png(cand.attention.values),
                            media_type="image/png")

    @app.get("/api/palette")
    def palette():
        return {"palette": PALETTE.tolist()}

    @app.post("/api/annotations")
    def post_annotations(records: list[dict]):
        with state.lock:
            sess = require_session()
            reject_if_training()
            parsed, rejected = [], []
            for rec in records:
                try:
                    parsed.append(Annotation.from_json_dict(rec))
                except (KeyError, TypeError, ValueError) as exc:
                    rejected.append({"image_id": rec.get("image_id"),
                                     "reason": str(exc)})
            accepted, bad = sess.submit_annotations(parsed)
            rejected += [{"image_id": b, "reason": "not_a_candidate"}
                         for b in bad]
            return {"accepted": accepted, "rejected": rejected}

    def _run_training(sess):
        try:
            sess.run_fine_tune()
        except Exception as exc:  # surfaced via /api/status
            with state.lock:
                state.last_error = {"round": sess.round, "message": str(exc)}
        finally:
            with state.lock:
                state.training = False
                if state.last_error is None and sess.unlabeled_ids:
                    sess.propose_candidates()
                    state.revealed = min(sess.config.candidates_shown,
                                         len(sess.candidates))

    @app.post("/api/finetune", status_code=202)
    def finetune():
        with state.lock:
            sess = require_session()
            reject_if_training()
            if any(not c.annotated for c in sess.candidates):
                raise HTTPException(409, detail={"error": "unannotated"})
            state.training = True
            state.last_error = None
            state.worker = threading.Thread(target=_run_training,
                                            args=(sess,), daemon=True)
            state.worker.start()
        return {"phase": "training", "round": sess.round}

    @app.get("/api/metrics")
    def metrics():
        with state.lock:
            sess = require_session()
            return {"metric_history": [
                {k: (float(v) if isinstance(v, (int, float, np.floating))
                     else v) for k, v in row.items()}
                for row in sess.metric_history]}

    @app.get("/api/config")
    def get_config():
        with state.lock:
            return dict(state.session_defaults)

    @app.patch("/api/config")
    def patch_config(overrides: dict):
        with state.lock:
            reject_if_training()
            try:
                _loop_config(state.session_defaults, overrides).validate()
            except (ConfigError, TypeError) as exc:
                raise HTTPException(400, detail={"error": "bad_config",
                                                 "message": str(exc)})
            state.session_defaults.update(overrides)
            return dict(state.session_defaults)

    if config.static_path:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=config.static_path, html=True),
                  name="ui")

    return app


def serve(config, workdir=None):
    """Run the HTTP service until interrupted."""
    import uvicorn

    app = create_app(config=config, workdir=workdir)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
