"""Two-stage staged-adapter training.

Stage 1 adapts a frozen random backbone to normal-vs-abnormal data with the
frequency gate closed: only low-rank adapters and the head train. Stage 2
retargets the model to a small disease-vs-control corpus with the gate open,
under one of four adapter policies:

  addition        merge the stage-1 adapters into their bases, attach fresh
                  ones, train adapters + head + embedder (bases stay frozen)
  reuse           keep training the stage-1 adapters (optimizer state reset),
                  no merge
  full_parameter  merge (when a stage-1 checkpoint is given), then unfreeze
                  everything; no adapters
  none            no stage-1 input at all: fresh model, fresh adapters

The stage-1 head carries over into stage 2 (still trainable): both tasks
read "anomaly evidence" off the cls row, and that inherited readout is most
of what the first stage has to hand the second at this scale. Model
selection is by best validation ROC-AUC across epochs; training is
bit-deterministic given (config, seed, corpus).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .encoder import (
    DEFAULT_LORA_TARGETS,
    EncoderConfig,
    EncoderParams,
    LORA_TARGETS,
    attach_lora,
    classify,
    encode_tokens,
    init_encoder,
    reinit_head,
)
from .lora import LoraAdapter, MergeRecord
from .metrics import Metrics, evaluate_scores
from .numerics import Parameter, Tensor, concat, cross_entropy, no_grad, softmax_rows
from .optim import AdamW, layer_multiplier, lr_at_step
from .signal_pipeline import ingest_recording_file, preprocess_recording
from .stfe import StfeParams, embed_patches, init_stfe
from .synthetic import load_manifest

__all__ = [
    "Model",
    "StageConfig",
    "StageResult",
    "SplitData",
    "build_model",
    "stage1_config",
    "stage2_config",
    "run_stage1",
    "run_stage2",
    "evaluate",
    "load_stage_data",
    "checkpoint_from_model",
    "model_from_checkpoint",
]

POLICIES = ("addition", "reuse", "full_parameter", "none")
STAGE2_ADAPTER_SEED_OFFSET = 500_000  # keeps stage-2 factors off the stage-1 stream


@dataclass
class Model:
    stfe: StfeParams
    enc: EncoderParams
    config: EncoderConfig

    def forward(self, x) -> Tensor:
        """Patch grids [B, C, A, T] (or one [C, A, T]) to logits [B, 2] / [2]."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        b, c, a, t = arr.shape
        tokens = embed_patches(Tensor(arr.reshape(b * c * a, t)), self.stfe)
        tokens = tokens.reshape(b, c * a, self.stfe.d)
        cls_rows = Tensor(np.zeros((b, 1, self.stfe.d))) + self.stfe.cls.reshape(1, 1, -1)
        seq = concat([cls_rows, tokens], axis=1)
        hidden = encode_tokens(seq, self.enc, self.config)
        logits = classify(hidden, self.enc.head)
        return logits[0] if single else logits

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for branch, blocks in (("temporal", self.stfe.temporal),
                               ("frequency", self.stfe.frequency)):
            for i, blk in enumerate(blocks):
                base = "stfe.%s.%d" % (branch, i)
                out[base + ".weight"] = blk.weight
                out[base + ".bias"] = blk.bias
                out[base + ".gamma"] = blk.gamma
                out[base + ".beta"] = blk.beta
        out["stfe.fusion.W"] = self.stfe.fusion_w
        out["stfe.fusion.b"] = self.stfe.fusion_b
        out["stfe.cls"] = self.stfe.cls
        for i, layer in enumerate(self.enc.layers):
            prefix = "enc.layer%d" % i
            for name in LORA_TARGETS:
                proj = layer.projection(name)
                out["%s.%s.base" % (prefix, name)] = proj.base
                out["%s.%s.bias" % (prefix, name)] = proj.bias
                for j, ad in enumerate(proj.adapters):
                    out["%s.%s.adapter%d.B" % (prefix, name, j)] = ad.B
                    out["%s.%s.adapter%d.A_lo" % (prefix, name, j)] = ad.A_lo
            out[prefix + ".ln1.gamma"] = layer.ln1_gamma
            out[prefix + ".ln1.beta"] = layer.ln1_beta
            out[prefix + ".ln2.gamma"] = layer.ln2_gamma
            out[prefix + ".ln2.beta"] = layer.ln2_beta
        out["enc.pos"] = self.enc.pos
        out["enc.final_ln.gamma"] = self.enc.final_gamma
        out["enc.final_ln.beta"] = self.enc.final_beta
        out["head.base"] = self.enc.head.base
        out["head.bias"] = self.enc.head.bias
        return out

    def adapted_projections(self) -> dict[str, object]:
        out = {}
        for i, layer in enumerate(self.enc.layers):
            for name in LORA_TARGETS:
                out["enc.layer%d.%s" % (i, name)] = layer.projection(name)
        out["head"] = self.enc.head
        return out

    def freeze_all(self) -> None:
        for p in self.named_parameters().values():
            p.trainable = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()


def build_model(d: int = 64, layers: int = 2, heads: int = 4, seed: int = 0,
                lambda_f: float = 0.0) -> Model:
    config = EncoderConfig(layers=layers, d=d, heads=heads)
    return Model(
        stfe=init_stfe(d, seed=seed, lambda_f=lambda_f),
        enc=init_encoder(config, seed=seed + 1),
        config=config,
    )


# -- stage configuration -------------------------------------------------


@dataclass
class StageConfig:
    stage: int
    epochs: int
    lr: float
    batch_size: int = 64
    lambda_f: float = 0.0
    policy: str = "addition"
    warmup_frac: float = 0.1
    layer_decay: float = 0.65
    weight_decay: float = 0.01
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_targets: tuple = DEFAULT_LORA_TARGETS
    train_stfe: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2, got %r" % (self.stage,))
        if self.policy not in POLICIES:
            raise ValueError("unknown policy %r; expected one of %s" % (self.policy, POLICIES))


def stage1_config(**overrides) -> StageConfig:
    base = dict(stage=1, epochs=1, lr=5e-4, batch_size=64, lambda_f=0.0,
                policy="addition", train_stfe=False)
    base.update(overrides)
    return StageConfig(**base)


def stage2_config(**overrides) -> StageConfig:
    base = dict(stage=2, epochs=20, lr=1e-4, batch_size=64, lambda_f=1.0,
                policy="addition", train_stfe=True)
    base.update(overrides)
    return StageConfig(**base)


# -- data -----------------------------------------------------------------

STAGE_LABELS = {1: ("abnormal", "normal"), 2: ("disease", "control")}


@dataclass
class SplitData:
    x: np.ndarray  # [n, C, A, T]
    y: np.ndarray  # [n] in {0, 1}

    @property
    def n(self) -> int:
        return self.x.shape[0]


def load_stage_data(corpus_dir, stage: int) -> dict[str, SplitData]:
    """Manifest -> preprocessed patch grids per split, positive class = 1."""
    positive, negative = STAGE_LABELS[stage]
    corpus = Path(corpus_dir)
    rows = load_manifest(corpus)
    acc: dict[str, tuple[list, list]] = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for row in rows:
        if row.label not in (positive, negative):
            continue
        rec = ingest_recording_file(corpus / row.path)
        label = 1 if row.label == positive else 0
        for pb in preprocess_recording(rec):
            acc[row.split][0].append(pb.x)
            acc[row.split][1].append(label)
    out = {}
    for split, (xs, ys) in acc.items():
        if xs:
            out[split] = SplitData(x=np.stack(xs), y=np.asarray(ys, dtype=np.intp))
        else:
            out[split] = SplitData(x=np.zeros((0, 1, 10, 200)), y=np.zeros(0, dtype=np.intp))
    return out


# -- evaluation -----------------------------------------------------------


def positive_scores(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax probability of the positive class, batched, graph-free."""
    scores = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            logits = model.forward(x[lo:lo + batch_size])
            scores.append(softmax_rows(logits).data[:, 1])
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(model: Model, split: SplitData, batch_size: int = 64) -> Metrics:
    if split.n == 0:
        raise ValueError("cannot evaluate an empty split")
    return evaluate_scores(positive_scores(model, split.x, batch_size), split.y)


# -- serialization glue ----------------------------------------------------


def checkpoint_from_model(model: Model, stage: int, seed: int, policy: str) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters().items()}
    params["stfe.lambda_f"] = np.asarray(model.stfe.lambda_f)
    meta = {
        "stage": str(stage),
        "lambda_f": repr(model.stfe.lambda_f),
        "seed": str(seed),
        "policy": policy,
        "cfg.d": str(model.config.d),
        "cfg.layers": str(model.config.layers),
        "cfg.heads": str(model.config.heads),
    }
    for name, proj in model.adapted_projections().items():
        for j, ad in enumerate(proj.adapters):
            meta["adapter.%s.%d" % (name, j)] = "%d:%r" % (ad.rank, ad.alpha)
        if proj.merge_log:
            meta["merge_log.%s" % name] = "|".join(
                "%s:%d:%r" % (rec.stage, rec.rank, rec.alpha) for rec in proj.merge_log)
    return Checkpoint(params=params, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(
        d=int(ckpt.meta["cfg.d"]),
        layers=int(ckpt.meta["cfg.layers"]),
        heads=int(ckpt.meta["cfg.heads"]),
        seed=ckpt.seed,
        lambda_f=float(ckpt.meta["lambda_f"]),
    )
    for name, proj in model.adapted_projections().items():
        j = 0
        while "adapter.%s.%d" % (name, j) in ckpt.meta:
            rank_s, alpha_s = ckpt.meta["adapter.%s.%d" % (name, j)].split(":")
            rank, alpha = int(rank_s), float(alpha_s)
            b = ckpt.params["%s.adapter%d.B" % (name, j)]
            a = ckpt.params["%s.adapter%d.A_lo" % (name, j)]
            proj.attach(LoraAdapter(Parameter(b.copy()), Parameter(a.copy()), rank, alpha))
            j += 1
        log = ckpt.meta.get("merge_log.%s" % name)
        if log:
            for entry in log.split("|"):
                stage_label, rank_s, alpha_s = entry.rsplit(":", 2)
                proj.merge_log.append(MergeRecord(stage_label, int(rank_s), float(alpha_s)))
    for name, p in model.named_parameters().items():
        p.data = ckpt.params[name].copy()
    return model


# -- training loop ---------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: Model
    history: list[Metrics]
    best_epoch: int
    train_losses: list[float] = field(default_factory=list)


def _layer_index_for(name: str, num_layers: int) -> int:
    if name.startswith("enc.layer"):
        return int(name.split(".")[1][len("layer"):])
    if name.startswith(("head.", "enc.final_ln")):
        return num_layers
    return 0  # embedder, cls and positional table sit below the deepest layer


def _optimizer_for(model: Model, config: StageConfig) -> AdamW:
    trainable = {name: p for name, p in model.named_parameters().items() if p.trainable}
    mults = {name: layer_multiplier(_layer_index_for(name, model.config.layers),
                                    model.config.layers, config.layer_decay)
             for name in trainable}
    return AdamW(trainable, lr_multipliers=mults, weight_decay=config.weight_decay)


def _fit(model: Model, data: dict[str, SplitData], config: StageConfig) -> StageResult:
    train, val = data["train"], data["val"]
    if train.n == 0:
        raise ValueError("empty training split")
    if len(np.unique(train.y)) < 2:
        raise ValueError("training split must contain both classes")
    opt = _optimizer_for(model, config)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(train.n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    history: list[Metrics] = []
    train_losses: list[float] = []
    best_auc = -math.inf
    best_epoch = -1
    best_state = model.snapshot()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(train.n)
        epoch_loss = 0.0
        for lo in range(0, train.n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            logits = model.forward(train.x[idx])
            loss = cross_entropy(logits, train.y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at_step(step, total_steps, config.lr, config.warmup_frac))
            step += 1
            epoch_loss += loss.item() * idx.size
        train_losses.append(epoch_loss / train.n)
        metrics = evaluate(model, val, config.batch_size)
        history.append(metrics)
        score = metrics.roc_auc if not math.isnan(metrics.roc_auc) else -1.0
        if score > best_auc:
            best_auc = score
            best_epoch = epoch
            best_state = model.snapshot()
    model.restore(best_state)
    if config.epochs == 0:
        history.append(evaluate(model, val, config.batch_size))
        best_epoch = -1
    ckpt = checkpoint_from_model(model, config.stage, config.seed, config.policy)
    return StageResult(checkpoint=ckpt, model=model, history=history,
                       best_epoch=best_epoch, train_losses=train_losses)


def run_stage1(model: Model, data: dict[str, SplitData], config: StageConfig) -> StageResult:
    """Gate closed, backbone and embedder frozen, adapters + head trained."""
    if config.stage != 1:
        raise ValueError("run_stage1 needs a stage-1 config, got stage %d" % config.stage)
    for proj in model.adapted_projections().values():
        if proj.adapters:
            raise ValueError("model already carries adapters; start stage 1 from a fresh model")
    model.stfe.set_gate(config.lambda_f)
    model.freeze_all()
    attach_lora(model.enc, targets=config.lora_targets, r=config.lora_rank,
                alpha=config.lora_alpha, seed=config.seed)
    for proj in model.adapted_projections().values():
        for ad in proj.adapters:
            ad.B.trainable = True
            ad.A_lo.trainable = True
    model.enc.head.base.trainable = True
    model.enc.head.bias.trainable = True
    return _fit(model, data, config)


def _setup_addition(model: Model, config: StageConfig, fresh: bool) -> None:
    if not fresh:
        for proj in model.adapted_projections().values():
            proj.merge_all(stage="stage-1")
    attach_lora(model.enc, targets=config.lora_targets, r=config.lora_rank,
                alpha=config.lora_alpha, seed=config.seed + STAGE2_ADAPTER_SEED_OFFSET)


def run_stage2(data: dict[str, SplitData], config: StageConfig,
               stage1_ckpt: Checkpoint | None = None,
               model: Model | None = None) -> StageResult:
    """Stage-2 tuning under the configured adapter policy (see module docstring)."""
    if config.stage != 2:
        raise ValueError("run_stage2 needs a stage-2 config, got stage %d" % config.stage)
    policy = config.policy
    if policy in ("addition", "reuse"):
        if stage1_ckpt is None:
            raise ValueError("policy %r requires a stage-1 checkpoint" % policy)
        if model is not None:
            raise ValueError("policy %r builds its model from the checkpoint" % policy)
        if stage1_ckpt.stage != 1:
            raise ValueError("expected a stage-1 checkpoint, got stage %d" % stage1_ckpt.stage)
        model = model_from_checkpoint(stage1_ckpt)
    elif policy == "none":
        if stage1_ckpt is not None:
            raise ValueError("policy 'none' must not receive a stage-1 checkpoint")
        if model is None:
            raise ValueError("policy 'none' requires a freshly built model")
    else:  # full_parameter
        if stage1_ckpt is not None:
            if model is not None:
                raise ValueError("pass either a checkpoint or a model, not both")
            if stage1_ckpt.stage != 1:
                raise ValueError("expected a stage-1 checkpoint, got stage %d"
                                 % stage1_ckpt.stage)
            model = model_from_checkpoint(stage1_ckpt)
        elif model is None:
            raise ValueError("policy 'full_parameter' needs a checkpoint or a fresh model")

    if policy in ("addition", "reuse") and not any(
            p.adapters for p in model.adapted_projections().values()):
        raise ValueError("policy %r expects stage-1 adapters in the checkpoint" % policy)

    model.stfe.set_gate(config.lambda_f)
    model.freeze_all()
    model.enc.head.base.trainable = True
    model.enc.head.bias.trainable = True

    if policy == "addition":
        _setup_addition(model, config, fresh=False)
    elif policy == "none":
        _setup_addition(model, config, fresh=True)
    elif policy == "full_parameter":
        for proj in model.adapted_projections().values():
            proj.merge_all(stage="stage-1")
        for p in model.named_parameters().values():
            p.trainable = True
    # reuse: stage-1 adapters stay in place, optimizer state starts fresh below

    if policy != "full_parameter":
        for proj in model.adapted_projections().values():
            for ad in proj.adapters:
                ad.B.trainable = True
                ad.A_lo.trainable = True
        if config.train_stfe:
            model.stfe.set_trainable(True)

    return _fit(model, data, config)
