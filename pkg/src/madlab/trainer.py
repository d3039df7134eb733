"""Two-phase training: contrastive pretraining, encoder transfer, k-means
center initialization, fine-tuning with per-epoch cardinality pruning.

All randomness is derived from (seed, phase tag, epoch) so a run can be
checkpointed at any epoch boundary and resumed bit-exactly: the optimizer
buffers carry the only state that is not recomputable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import __version__
from .data import (Dataset, GeneratorConfig, AugmentationConfig, TrainingView,
                   LABEL_UNLABELED, GT_ABNORMAL, augment_pairs,
                   generate_synthetic)
from .errors import ConfigError, MadlabError, NumericsError, StateError
from .evaluation import auc, knn_score, replicate_ci
from .losses import ContrastiveBatch, MadBatch, info_nce_loss, mad_loss
from .numcore import (ADAM, IDENTITY, RELU, SGD, LayerSpec, Mlp, GradientTape,
                      OptimizerState, apply_lr_schedule, init_params,
                      mlp_backward, optimizer_step)
from .spheres import (CenterSet, anomaly_scores, assign_and_count, kmeans,
                      nearest_live_center, prune)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# rng stream tags
_T_INIT_PRETEXT = 11
_T_INIT_HEAD = 12
_T_SHUF_PRE = 13
_T_AUG = 14
_T_SHUF_FT = 15
_T_KMEANS = 16


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 32
    body: tuple = (64, 32)
    proj_dim: int = 16
    mad_dim: int = 16

    def __post_init__(self):
        if self.input_dim < 1 or self.proj_dim < 1 or self.mad_dim < 1:
            raise ConfigError("model dims must be >= 1")
        if not self.body or any(w < 1 for w in self.body):
            raise ConfigError("body widths must be >= 1 and non-empty")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch: int = 24
    lr: float = 1e-3
    milestones: tuple = (70, 90)
    decay_factor: float = 0.1
    temperature: float = 0.2
    optimizer: str = ADAM
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 2:
            raise ConfigError("pretrain needs epochs >= 0 and batch >= 2")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("pretrain lr and temperature must be > 0")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    batch: int = 32
    lr: float = 3e-3
    milestones: tuple = ()
    decay_factor: float = 0.1
    eta: float = 1.0
    gamma: float = 0.05
    n_s: int = 100
    weight_decay: float = 1e-6   # the objective's L2 term, applied decoupled
    eps_d: float = 1e-6
    optimizer: str = ADAM
    update_centers: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.n_s < 1:
            raise ConfigError("finetune needs epochs >= 0, batch >= 1, n_s >= 1")
        if self.lr <= 0:
            raise ConfigError("finetune lr must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    knn_k: int = 100
    seed: int = 0
    replicates: int = 4

    def __post_init__(self):
        if self.replicates < 1 or self.knn_k < 1:
            raise ConfigError("replicates and knn_k must be >= 1")
        if self.dims.input_dim != self.data.dim:
            raise ConfigError(
                f"model input_dim {self.dims.input_dim} must equal data dim "
                f"{self.data.dim}")


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    for k, sub in d.items():
        if isinstance(sub, dict):
            for key, val in sub.items():
                if isinstance(val, tuple):
                    sub[key] = list(val)
    return d


def experiment_from_dict(d: dict) -> ExperimentConfig:
    def tup(sub, *keys):
        for k in keys:
            sub[k] = tuple(sub[k])

    d = json.loads(json.dumps(d))  # deep copy, normalize types
    tup(d["dims"], "body")
    tup(d["pretrain"], "milestones")
    tup(d["finetune"], "milestones")
    return ExperimentConfig(
        data=GeneratorConfig(**d["data"]),
        augment=AugmentationConfig(**d["augment"]),
        dims=ModelDims(**d["dims"]),
        pretrain=PretrainConfig(**d["pretrain"]),
        finetune=FinetuneConfig(**d["finetune"]),
        knn_k=d["knn_k"], seed=d["seed"], replicates=d["replicates"])


def experiment_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(experiment_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class EncoderModel:
    """Body layers shared between the two phases plus one task head."""

    net: Mlp
    body_layers: int

    def embed(self, x) -> np.ndarray:
        return self.net.forward(x)

    def embed_body(self, x) -> np.ndarray:
        return self.net.forward(x, n_layers=self.body_layers)

    def body_params(self) -> list:
        return self.net.parameters()[:2 * self.body_layers]

    def head_params(self) -> list:
        return self.net.parameters()[2 * self.body_layers:]

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.net.copy(), self.body_layers)


def _layer_specs(dims: ModelDims, head_dim: int):
    widths = [dims.input_dim, *dims.body]
    body = [LayerSpec(widths[i], widths[i + 1], RELU)
            for i in range(len(widths) - 1)]
    head = [LayerSpec(widths[-1], head_dim, IDENTITY)]
    return body + head, len(body)


def build_pretext_model(cfg: ExperimentConfig) -> EncoderModel:
    specs, n_body = _layer_specs(cfg.dims, cfg.dims.proj_dim)
    rng = np.random.default_rng([cfg.seed, _T_INIT_PRETEXT])
    return EncoderModel(Mlp(specs, rng=rng), n_body)


def transfer_weights(pretext: EncoderModel, cfg: ExperimentConfig) -> EncoderModel:
    """Copy the body into a fresh detection encoder; new seeded head.

    The projection head is discarded. Idempotent: same pretext body and
    seed always produce the same detection encoder.
    """
    specs, n_body = _layer_specs(cfg.dims, cfg.dims.mad_dim)
    if pretext.body_layers != n_body:
        raise ConfigError(
            f"body depth mismatch: pretext has {pretext.body_layers} layers, "
            f"config wants {n_body}")
    head_rng = np.random.default_rng([cfg.seed, _T_INIT_HEAD])
    params = [p.copy() for p in pretext.body_params()]
    params.extend(init_params(specs[n_body:], head_rng))
    return EncoderModel(Mlp(specs, params=params), n_body)


def build_random_mad_model(cfg: ExperimentConfig) -> EncoderModel:
    """Detection encoder without pretraining: random body, seeded head."""
    return transfer_weights(build_pretext_model(cfg), cfg)


def _make_optimizer(phase_cfg) -> OptimizerState:
    return OptimizerState(rule=phase_cfg.optimizer, learning_rate=phase_cfg.lr,
                          weight_decay=phase_cfg.weight_decay)


def _interleave(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((2 * a.shape[0], a.shape[1]))
    out[0::2] = a
    out[1::2] = b
    return out


def pretrain(cfg: ExperimentConfig, view: TrainingView, *, model=None,
             opt=None, start_epoch: int = 0, end_epoch=None):
    """Contrastive pretraining over ALL train samples, labels ignored.

    Returns (model, optimizer, per-epoch mean anchor losses for the epochs
    run here).
    """
    if len(view) == 0:
        raise ConfigError("pretraining needs a non-empty dataset")
    pc = cfg.pretrain
    end_epoch = pc.epochs if end_epoch is None else end_epoch
    model = model if model is not None else build_pretext_model(cfg)
    opt = opt if opt is not None else _make_optimizer(pc)

    n = len(view)
    losses = []
    for epoch in range(start_epoch, end_epoch):
        opt.learning_rate = apply_lr_schedule(epoch, pc.lr, pc.milestones,
                                              pc.decay_factor)
        perm = np.random.default_rng([cfg.seed, _T_SHUF_PRE, epoch]).permutation(n)
        aug_rng = np.random.default_rng([cfg.seed, _T_AUG, epoch])
        loss_sum, anchors = 0.0, 0
        for bi, start in enumerate(range(0, n, pc.batch)):
            idx = perm[start:start + pc.batch]
            va, vb = augment_pairs(view.features[idx], cfg.augment, aug_rng)
            tape = GradientTape()
            z = model.net.forward(_interleave(va, vb), tape)
            try:
                loss, gz = info_nce_loss(ContrastiveBatch(z, pc.temperature))
            except MadlabError as exc:
                raise NumericsError(
                    f"pretext epoch {epoch} batch {bi}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericsError(
                    f"pretext epoch {epoch} batch {bi}: non-finite loss")
            grads, _ = mlp_backward(tape, gz)
            optimizer_step(opt, model.net.parameters(), grads)
            loss_sum += loss
            anchors += 2 * len(idx)
        losses.append(loss_sum / anchors)
    return model, opt, losses


def _full_objective(cfg, view, model, centers) -> float:
    """Eq-style epoch objective on frozen weights: data terms plus the
    L2 penalty that the optimizer realizes as decoupled decay."""
    z = model.embed(view.features)
    fc = cfg.finetune
    n_total = int(np.sum(view.labels == LABEL_UNLABELED))
    m_total = len(view) - n_total
    batch = MadBatch(z, view.labels, fc.eta, n_total, m_total)
    loss, _, _ = mad_loss(batch, centers, fc.eps_d)
    weight_term = 0.5 * fc.weight_decay * sum(
        float(np.sum(p * p)) for p in model.net.parameters())
    return loss + weight_term


def _val_auc(model, centers, val_ds: Dataset) -> float:
    scores = anomaly_scores(model.embed(val_ds.features), centers)
    return auc(scores, val_ds.ground_truth == GT_ABNORMAL)


def finetune(cfg: ExperimentConfig, view: TrainingView, val_ds: Dataset,
             model: EncoderModel, *, centers=None, opt=None,
             start_epoch: int = 0, end_epoch=None, history=None):
    """Fine-tune the detection encoder against the center set.

    Initializes centers by k-means over the embedded presumed-normal
    samples (unlabeled + known-normal) when none are given, then runs
    batched updates with per-epoch cardinality pruning. ``history`` rows
    indexed by epoch; index 0 holds the pre-finetune baseline.
    """
    fc = cfg.finetune
    end_epoch = fc.epochs if end_epoch is None else end_epoch
    presumed = view.labels >= 0

    if centers is None:
        if start_epoch != 0:
            raise StateError("resuming finetune requires the saved centers")
        emb = model.embed(view.features[presumed])
        centers = kmeans(emb, fc.n_s, seed=[cfg.seed, _T_KMEANS],
                         gamma=fc.gamma)
        if fc.n_s > 1 and centers.initial_count < fc.n_s:
            log.info("k-means clamped N_s from %d to %d", fc.n_s,
                     centers.initial_count)
    if history is None:
        history = {"val_auc": [_val_auc(model, centers, val_ds)],
                   "objective": [_full_objective(cfg, view, model, centers)],
                   "live": [centers.n_live],
                   "counts": [[int(c) for c in centers.counts]],
                   "train_loss": []}

    n = len(view)
    n_total = int(np.sum(view.labels == LABEL_UNLABELED))
    m_total = n - n_total
    opt = opt if opt is not None else _make_optimizer(fc)

    for epoch in range(start_epoch, end_epoch):
        opt.learning_rate = apply_lr_schedule(epoch, fc.lr, fc.milestones,
                                              fc.decay_factor)
        perm = np.random.default_rng([cfg.seed, _T_SHUF_FT, epoch]).permutation(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, fc.batch)):
            idx = perm[start:start + fc.batch]
            tape = GradientTape()
            z = model.net.forward(view.features[idx], tape)
            batch = MadBatch(z, view.labels[idx], fc.eta, n_total, m_total)
            loss, gz, _ = mad_loss(batch, centers, fc.eps_d)
            if not np.isfinite(loss):
                raise NumericsError(
                    f"finetune epoch {epoch} batch {bi}: non-finite loss")
            grads, _ = mlp_backward(tape, gz)
            optimizer_step(opt, model.net.parameters(), grads)
            loss_sum += loss

        emb = model.embed(view.features[presumed])
        assign_and_count(emb, centers)
        if fc.update_centers:
            assigned = nearest_live_center(emb, centers)
            for j in np.flatnonzero(centers.live):
                mask = assigned == j
                if mask.any():
                    centers.centers[j] = emb[mask].mean(axis=0)
        prune(centers)
        history["train_loss"].append(loss_sum)
        history["val_auc"].append(_val_auc(model, centers, val_ds))
        history["objective"].append(_full_objective(cfg, view, model, centers))
        history["live"].append(centers.n_live)
        history["counts"].append([int(c) for c in centers.counts])

    return model, centers, opt, history


def evaluate(cfg: ExperimentConfig, pretext_model: EncoderModel,
             mad_model: EncoderModel, centers: CenterSet, datasets,
             history=None):
    """Score val/test: center-distance AUC plus kNN AUCs in the detection
    and pretext-body embedding spaces (reference = presumed-normal train)."""
    train_ds, val_ds, test_ds = datasets
    presumed = train_ds.labels >= 0
    ref_mad = mad_model.embed(train_ds.features[presumed])
    ref_pre = pretext_model.embed_body(train_ds.features[presumed])

    records = []
    for ds in (val_ds, test_ds):
        emb = mad_model.embed(ds.features)
        positives = ds.ground_truth == GT_ABNORMAL
        rec = {
            "split": ds.split,
            "auc": auc(anomaly_scores(emb, centers), positives),
            "auc_knn": auc(knn_score(emb, ref_mad, cfg.knn_k), positives),
            "auc_knn_pretext": auc(
                knn_score(pretext_model.embed_body(ds.features), ref_pre,
                          cfg.knn_k), positives),
            "epoch_auc": list(history["val_auc"]) if history else [],
            "live_centers": list(history["live"]) if history else [],
        }
        records.append(rec)
    return records


@dataclass
class TrainerState:
    """Everything needed to resume a run at an epoch boundary."""

    config: ExperimentConfig
    phase: str                      # "pretrain" | "finetune" | "done"
    epoch: int                      # completed epochs within the phase
    pretext_model: EncoderModel
    mad_model: EncoderModel | None = None
    opt: OptimizerState | None = None
    centers: CenterSet | None = None
    pre_losses: list = field(default_factory=list)
    ft_history: dict | None = None


def run_replicate(cfg: ExperimentConfig, datasets=None, *, state=None,
                  stop=None):
    """Run (or resume) one full replicate: generate/pretrain/transfer/
    finetune/evaluate.

    ``stop`` = (phase, epochs_done) halts at that boundary and returns the
    state without evaluation records. Returns (state, records).
    """
    if datasets is None:
        datasets = generate_synthetic(replace(cfg.data, seed=cfg.seed))
    train_ds, val_ds, _ = datasets
    view = train_ds.training_view()

    if state is None:
        state = TrainerState(config=cfg, phase="pretrain", epoch=0,
                             pretext_model=build_pretext_model(cfg))
    if experiment_hash(state.config) != experiment_hash(cfg):
        raise ConfigError("state was produced under a different config")

    if state.phase == "pretrain":
        target = cfg.pretrain.epochs
        if stop is not None and stop[0] == "pretrain":
            target = min(target, stop[1])
        model, opt, losses = pretrain(
            cfg, view, model=state.pretext_model, opt=state.opt,
            start_epoch=state.epoch, end_epoch=target)
        state.pretext_model, state.opt = model, opt
        state.pre_losses = state.pre_losses + losses
        state.epoch = target
        if stop is not None and stop[0] == "pretrain":
            return state, []
        state.phase, state.epoch, state.opt = "finetune", 0, None
        state.mad_model = transfer_weights(state.pretext_model, cfg)

    if state.phase == "finetune":
        target = cfg.finetune.epochs
        if stop is not None and stop[0] == "finetune":
            target = min(target, stop[1])
        model, centers, opt, history = finetune(
            cfg, view, val_ds, state.mad_model, centers=state.centers,
            opt=state.opt, start_epoch=state.epoch,
            end_epoch=target, history=state.ft_history)
        state.mad_model, state.centers, state.opt = model, centers, opt
        state.ft_history = history
        state.epoch = target
        if stop is not None and stop[0] == "finetune":
            return state, []
        state.phase = "done"

    records = evaluate(cfg, state.pretext_model, state.mad_model,
                       state.centers, datasets, state.ft_history)
    return state, records


@dataclass
class RunResult:
    """Aggregated outcome of a replicated experiment."""

    config_hash: str
    records: list
    errors: list
    aggregate: dict
    replicates_requested: int
    replicates_completed: int
    wall_clock_sec: float
    versions: dict

    def metrics_dict(self) -> dict:
        """The deterministic part, suitable for byte-stable JSON output."""
        return {"format": 1, "config_hash": self.config_hash,
                "replicates_requested": self.replicates_requested,
                "replicates_completed": self.replicates_completed,
                "records": self.records, "errors": self.errors,
                "aggregate": self.aggregate}


_AGG_KEYS = (("val", "auc", "val_auc"),
             ("test", "auc", "test_auc"),
             ("val", "auc_knn", "val_auc_knn"),
             ("test", "auc_knn", "test_auc_knn"),
             ("val", "auc_knn_pretext", "val_auc_knn_pretext"),
             ("test", "auc_knn_pretext", "test_auc_knn_pretext"))


def aggregate_records(records: list) -> dict:
    agg = {}
    for split, metric, name in _AGG_KEYS:
        vals = [r[metric] for r in records if r["split"] == split]
        if vals:
            agg[name] = replicate_ci(vals).as_dict()
    live = [r["live_centers"][-1] for r in records
            if r["split"] == "test" and r["live_centers"]]
    if live:
        agg["final_live_centers"] = replicate_ci(live).as_dict()
    return agg


def run_experiment(cfg: ExperimentConfig, datasets=None, on_replicate=None):
    """Run all replicates; replicate r uses seed + r.

    With ``datasets`` given, every replicate trains on them (the on-disk
    protocol); otherwise each replicate generates its own data from its
    seed. ``on_replicate(r, state)`` lets callers persist checkpoints and
    trajectories. Failures are recorded and skipped in the aggregate.
    """
    t0 = time.monotonic()
    records, errors = [], []
    for r in range(cfg.replicates):
        rcfg = replace(cfg, seed=cfg.seed + r)
        try:
            state, recs = run_replicate(rcfg, datasets)
        except MadlabError as exc:
            log.error("replicate %d failed: %s", r, exc)
            errors.append({"replicate": r, "error": str(exc)})
            continue
        for rec in recs:
            records.append({"replicate": r, **rec})
        if on_replicate is not None:
            on_replicate(r, state)

    completed = cfg.replicates - len(errors)
    return RunResult(
        config_hash=experiment_hash(cfg), records=records, errors=errors,
        aggregate=aggregate_records(records),
        replicates_requested=cfg.replicates, replicates_completed=completed,
        wall_clock_sec=time.monotonic() - t0,
        versions={"madlab": __version__, "numpy": np.__version__})


# --- checkpointing ------------------------------------------------------

def save_checkpoint(path, state: TrainerState):
    """Versioned npz container; restore refuses on config-hash mismatch."""
    cfg_dict = experiment_to_dict(state.config)
    meta = {"version": CHECKPOINT_VERSION,
            "config": cfg_dict,
            "config_hash": experiment_hash(state.config),
            "phase": state.phase, "epoch": state.epoch,
            "pre_losses": state.pre_losses,
            "ft_history": state.ft_history,
            "has_mad": state.mad_model is not None,
            "has_centers": state.centers is not None}
    arrays = {"meta_json": np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, p in enumerate(state.pretext_model.net.parameters()):
        arrays[f"pretext_{i}"] = p
    if state.mad_model is not None:
        for i, p in enumerate(state.mad_model.net.parameters()):
            arrays[f"mad_{i}"] = p
    if state.opt is not None:
        o = state.opt
        arrays["opt_scalar"] = np.array(
            [o.learning_rate, o.weight_decay, float(o.step_count),
             1.0 if o.rule == ADAM else 0.0])
        if o.m is not None:
            for i, (m, v) in enumerate(zip(o.m, o.v)):
                arrays[f"opt_m_{i}"] = m
                arrays[f"opt_v_{i}"] = v
    if state.centers is not None:
        arrays["centers"] = state.centers.centers
        arrays["centers_live"] = state.centers.live
        arrays["centers_counts"] = state.centers.counts
        arrays["centers_scalar"] = np.array(
            [state.centers.gamma, float(state.centers.initial_count)])
    with open(path, "wb") as fh:  # savez would append .npz to a bare path
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TrainerState:
    if not os.path.exists(path):
        raise StateError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta_json"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise StateError(
                f"unsupported checkpoint version {meta.get('version')}")
        cfg = experiment_from_dict(meta["config"])
        if experiment_hash(cfg) != meta["config_hash"]:
            raise StateError("checkpoint config hash mismatch; refusing restore")

        pre_specs, n_body = _layer_specs(cfg.dims, cfg.dims.proj_dim)
        pre_params = [z[f"pretext_{i}"] for i in range(2 * len(pre_specs))]
        pretext = EncoderModel(Mlp(pre_specs, params=pre_params), n_body)

        mad = None
        if meta["has_mad"]:
            mad_specs, _ = _layer_specs(cfg.dims, cfg.dims.mad_dim)
            mad_params = [z[f"mad_{i}"] for i in range(2 * len(mad_specs))]
            mad = EncoderModel(Mlp(mad_specs, params=mad_params), n_body)

        opt = None
        if "opt_scalar" in z:
            lr, wd, step, is_adam = z["opt_scalar"]
            opt = OptimizerState(rule=ADAM if is_adam else SGD,
                                 learning_rate=float(lr),
                                 weight_decay=float(wd),
                                 step_count=int(step))
            if "opt_m_0" in z:
                count = len([k for k in z.files if k.startswith("opt_m_")])
                opt.m = [z[f"opt_m_{i}"] for i in range(count)]
                opt.v = [z[f"opt_v_{i}"] for i in range(count)]

        centers = None
        if meta["has_centers"]:
            gamma, init_count = z["centers_scalar"]
            centers = CenterSet(z["centers"], z["centers_live"],
                                z["centers_counts"], float(gamma),
                                int(init_count))

    return TrainerState(config=cfg, phase=meta["phase"], epoch=meta["epoch"],
                        pretext_model=pretext, mad_model=mad, opt=opt,
                        centers=centers, pre_losses=meta["pre_losses"],
                        ft_history=meta["ft_history"])
