"""Orchestration shared by the CLI and tests: split resolution, training
runs with checkpointing/resume, and checkpoint-driven evaluation."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

import numpy as np

from . import training as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, config_to_dict
from .data import VideoRecord, load_manifest, split_dataset
from .diffusion import build_schedule
from .errors import ConfigError, DataError
from .evaluation import EvalReport, evaluate_model
from .model import LocalizerModel
from .optim import AdamW

CHECKPOINT_NAME = "checkpoint.tadc"
LOSS_LOG_NAME = "loss_log.csv"


def build_model(cfg: RunConfig) -> LocalizerModel:
    sched = build_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                           cfg.diffusion.beta_end, cfg.diffusion.eta)
    return LocalizerModel(cfg.model, sched, tr.init_rng(cfg.train.seed))


def resolve_dataset(cfg: RunConfig) -> tuple[list[VideoRecord], str]:
    if not cfg.data.manifest:
        raise ConfigError(
            "config: data.manifest is required for this command (generate a "
            "dataset first, then point data.manifest at its manifest.json)"
        )
    videos = load_manifest(cfg.data.manifest)
    return videos, os.path.dirname(os.path.abspath(cfg.data.manifest))


def protocol_split(cfg: RunConfig, videos
                   ) -> tuple[list[VideoRecord], list[VideoRecord]]:
    return split_dataset(videos, cfg.eval.protocol,
                         train_fraction=cfg.eval.train_fraction,
                         split_seed=cfg.eval.split_seed)


@dataclass
class TrainResult:
    model: LocalizerModel
    stats: list[tr.EpochStats]
    checkpoint_path: str
    epochs_completed: int


def _optimizer(model: LocalizerModel, cfg: RunConfig) -> AdamW:
    return AdamW(model.parameters(), lr=cfg.train.lr,
                 weight_decay=cfg.train.weight_decay)


def _training_identity(doc: dict) -> dict:
    # output placement and ablation settings do not change the trained
    # function, so they are dropped from the persisted blob and from the
    # resume comparison: a run may be relocated, but everything else must
    # match or the continued trajectory would silently diverge.  The JSON
    # round-trip canonicalizes tuples against the checkpoint's blob.
    doc = json.loads(json.dumps(doc, sort_keys=True))
    return {k: v for k, v in doc.items() if k not in ("out_dir", "ablate")}


def run_training(cfg: RunConfig, *, resume: str | None = None,
                 on_epoch_end=None, write_outputs: bool = True
                 ) -> TrainResult:
    """Train on the protocol's train side and write checkpoint + loss log.

    With ``resume``, the checkpoint's config must match the current one;
    training continues from the recorded epoch with identical batch order
    and noise streams, so an interrupted run and a straight-through run
    produce the same final state.
    """
    cfg.train.validate()
    cfg.eval.validate()
    videos, root = resolve_dataset(cfg)
    train_videos, _ = protocol_split(cfg, videos)
    loaded = tr.load_training_set(train_videos, root, cfg.model.levels,
                                  cfg.train.assignment, cfg.model.input_dim)
    model = build_model(cfg)
    opt = _optimizer(model, cfg)
    first_epoch = 0
    if resume is not None:
        saved_cfg, state, params, adam_m, adam_v = load_checkpoint(resume)
        if _training_identity(saved_cfg) != _training_identity(
                config_to_dict(cfg)):
            raise ConfigError(
                f"resume: checkpoint {resume} was produced by a different "
                f"configuration; resume requires an identical config"
            )
        model.load_parameters(params)
        opt.state.m = {n: np.ascontiguousarray(a) for n, a in adam_m.items()}
        opt.state.v = {n: np.ascontiguousarray(a) for n, a in adam_v.items()}
        opt.state.step = int(state.get("step", 0))
        first_epoch = int(state.get("epochs_completed", 0))
    stats = tr.run_epochs(model, loaded, opt, cfg.train,
                          first_epoch=first_epoch,
                          noise=cfg.diffusion.noise,
                          denoise=cfg.diffusion.denoise,
                          on_epoch_end=on_epoch_end)
    epochs_completed = stats[-1].epoch + 1 if stats else first_epoch
    ckpt_path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)
    if write_outputs:
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_checkpoint(
            ckpt_path, _training_identity(config_to_dict(cfg)),
            {"epochs_completed": epochs_completed, "step": opt.state.step},
            {n: p.data for n, p in model.parameters().items()},
            opt.state.m, opt.state.v,
        )
        tr.append_loss_log(os.path.join(cfg.out_dir, LOSS_LOG_NAME), stats)
    return TrainResult(model=model, stats=stats, checkpoint_path=ckpt_path,
                       epochs_completed=epochs_completed)


def model_from_checkpoint(path: str) -> tuple[LocalizerModel, RunConfig, dict]:
    saved_cfg, state, params, _m, _v = load_checkpoint(path)
    cfg = config_from_dict(saved_cfg)
    model = build_model(cfg)
    model.load_parameters(params)
    return model, cfg, state


def evaluate_split(model: LocalizerModel, cfg: RunConfig,
                   protocol: str | None = None) -> EvalReport:
    """Evaluate the test side of the protocol split under eval seeding."""
    videos, root = resolve_dataset(cfg)
    requested = protocol or cfg.eval.protocol
    eval_cfg = copy.deepcopy(cfg.eval)
    eval_cfg.protocol = requested
    _, test_videos = split_dataset(videos, requested,
                                   train_fraction=eval_cfg.train_fraction,
                                   split_seed=eval_cfg.split_seed)
    return evaluate_model(
        model, test_videos, root, eval_cfg, cfg.train.assignment,
        protocol=requested, eval_seed=cfg.train.seed,
        noise=cfg.diffusion.noise, denoise=cfg.diffusion.denoise,
    )


def run_evaluation(checkpoint_path: str, cfg: RunConfig,
                   protocol: str | None = None) -> EvalReport:
    """Rebuild the checkpointed model and evaluate it.

    The protocol must match the one the checkpoint was trained under: the
    train/test membership baked into the weights is only meaningful for
    that split.  The current config supplies the manifest location; model
    and split settings come from the checkpoint.
    """
    model, saved, _state = model_from_checkpoint(checkpoint_path)
    requested = protocol or cfg.eval.protocol
    if requested != saved.eval.protocol:
        raise DataError(
            f"eval: checkpoint {checkpoint_path} was trained under protocol "
            f"{saved.eval.protocol!r}; evaluating it under {requested!r} "
            f"would mix its train split into the test set"
        )
    if cfg.data.manifest:
        saved.data.manifest = cfg.data.manifest
    return evaluate_split(model, saved, requested)
