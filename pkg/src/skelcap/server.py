"""HTTP JSON API over a finished experiment directory.

Serves example browsing, prediction, and skeleton-override regeneration for
the companion UI. All endpoints are pure reads over immutable model snapshots;
no request mutates checkpoints, corpus files, or server state.
"""

import json
import os
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .data import load_corpus
from .decode import generate
from .model import CaptionerModel, InputError, load_checkpoint
from .pipeline import ExperimentPlan
from .skeletons import load_lexicon


class ServiceError(RuntimeError):
    pass


@dataclass
class ServiceState:
    plan: ExperimentPlan
    corpus: dict
    by_id: dict  # image_id -> (split, example)
    lexicon: dict
    baseline: CaptionerModel | None
    stage1: CaptionerModel | None
    stage2: CaptionerModel
    versions: dict


def _checkpoint_version(ckpt_dir):
    with open(os.path.join(ckpt_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)["format_version"]


def load_service(experiment_dir, corpus_dir=None) -> ServiceState:
    plan_path = os.path.join(experiment_dir, "plan.json")
    if not os.path.exists(plan_path):
        raise ServiceError(f"no resolved plan at {plan_path}")
    with open(plan_path, encoding="utf-8") as fh:
        plan = ExperimentPlan.from_json(json.load(fh))
    corpus = load_corpus(corpus_dir or plan.corpus_dir)
    by_id = {ex.image_id: (split, ex) for split, examples in corpus.items() for ex in examples}
    lex_path = os.path.join(corpus_dir or plan.corpus_dir, "lexicon.tsv")
    lexicon = load_lexicon(lex_path) if os.path.exists(lex_path) else {}

    ck = os.path.join(experiment_dir, "checkpoints")
    versions = {}
    models = {}
    for name in ("baseline", "stage1", "stage2"):
        path = os.path.join(ck, name)
        if os.path.exists(os.path.join(path, "manifest.json")):
            models[name] = load_checkpoint(path)
            versions[name] = _checkpoint_version(path)
    if "stage2" not in models:
        raise ServiceError(f"no stage-2 checkpoint under {ck}")
    return ServiceState(
        plan=plan,
        corpus=corpus,
        by_id=by_id,
        lexicon=lexicon,
        baseline=models.get("baseline"),
        stage1=models.get("stage1"),
        stage2=models["stage2"],
        versions=versions,
    )


def predicted_skeleton(state: ServiceState, example):
    """The skeleton stage 2 would be conditioned on for this image."""
    if state.stage1 is not None:
        if state.stage1.config.mode == "img2ske_clf":
            (lemmas, _), = state.stage1.classify_skeleton([example.features])
            return lemmas
        return generate(state.stage1, example.features).skeleton
    if state.plan.stage1 == "iterative":
        if state.baseline is None:
            raise ServiceError("iterative skeletons need the baseline checkpoint")
        return generate(state.baseline, example.features).caption
    return None  # ske_dec decodes its own skeleton


class RegenerateOptions(BaseModel):
    beam: int = Field(default=1, ge=1, le=64)
    mode: str | None = None

    model_config = {"extra": "forbid"}


class RegenerateRequest(BaseModel):
    image_id: str
    skeleton: list[str]
    options: RegenerateOptions = Field(default_factory=RegenerateOptions)

    model_config = {"extra": "forbid"}


def build_app(experiment_dir, corpus_dir=None) -> FastAPI:
    state = load_service(experiment_dir, corpus_dir)
    app = FastAPI(title="skeleton captioner service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        detail = [
            {"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": detail})

    def example_or_404(image_id):
        hit = state.by_id.get(image_id)
        if hit is None:
            raise HTTPException(status_code=404, detail=f"unknown image_id {image_id!r}")
        return hit[1]

    def one_generation(example, skeleton, beam):
        try:
            return generate(state.stage2, example.features, skeleton=skeleton, beam=beam)
        except InputError as exc:
            raise HTTPException(
                status_code=400, detail=[{"field": "skeleton", "message": str(exc)}]
            ) from exc

    @app.get("/api/health")
    def health():
        return {"status": "ok", "checkpoint_versions": state.versions}

    @app.get("/api/examples")
    def examples(split: str = "val", offset: int = 0, limit: int = 20):
        if split not in state.corpus:
            raise HTTPException(
                status_code=400,
                detail=[{"field": "split", "message": f"unknown split {split!r}"}],
            )
        if offset < 0 or limit < 0:
            raise HTTPException(
                status_code=400,
                detail=[{"field": "offset/limit", "message": "must be non-negative"}],
            )
        page = state.corpus[split][offset: offset + limit]
        return [
            {
                "image_id": ex.image_id,
                "concepts": list(ex.concepts),
                "clean": ex.clean.text,
                "noisy": ex.noisy.text,
            }
            for ex in page
        ]

    @app.get("/api/predict/{image_id}")
    def predict(image_id: str):
        example = example_or_404(image_id)
        skeleton = predicted_skeleton(state, example)
        result = one_generation(example, skeleton, beam=1)
        baseline_caption = None
        if state.baseline is not None:
            baseline_caption = generate(state.baseline, example.features, beam=1).caption
        return {
            "image_id": image_id,
            "baseline_caption": baseline_caption,
            "skeleton": result.skeleton,
            "skeleton_caption": result.caption,
            "log_probs": result.token_logps,
        }

    @app.post("/api/regenerate")
    def regenerate(req: RegenerateRequest):
        example = example_or_404(req.image_id)
        mode = req.options.mode
        if mode is not None and mode != state.stage2.config.mode:
            raise HTTPException(
                status_code=400,
                detail=[{
                    "field": "options.mode",
                    "message": f"loaded stage-2 checkpoint is {state.stage2.config.mode!r}",
                }],
            )
        result = one_generation(example, list(req.skeleton), beam=req.options.beam)
        return {
            "image_id": req.image_id,
            "caption": result.caption,
            "skeleton": result.skeleton,
            "log_probs": result.token_logps,
        }

    return app
