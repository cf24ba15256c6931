"""Optimization: decoupled-decay adaptive moments, warmup-decay schedule,
gradient clipping, and the resumable pre-training / fine-tuning loops.

Every stochastic choice inside a loop is drawn from a generator seeded by
(run seed, purpose lane, step), so a run resumed from a saved state draws
exactly what the unbroken run would have drawn. Loss logs are written with
repr-exact floats, making reruns byte-comparable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nnmath as nn
from .corpus import CorpusSplit, WordVocab, make_batches
from .model import PretrainModel, load_checkpoint, save_checkpoint
from .objectives import POLICY_MASK, pretrain_step
from . import tasks
from .nnmath import ops

_LANE_MASK = 20
_LANE_BATCH = 21
_LANE_FOURWAY = 22
_LANE_TASK = 23
_LANE_HEADS = 24

LOSS_CSV_HEADER = "step,mlm,mtc,moc,wfh,total,lr"


# -- learning-rate schedule ---------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    total_steps: int
    peak: float
    warmup_frac: float = 0.10

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError(f"LRSchedule: total_steps must be positive, got {self.total_steps}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"LRSchedule: warmup_frac must be in (0, 1), got {self.warmup_frac}")


def lr_at(step: int, sched: LRSchedule) -> float:
    """Linear 0 -> peak over the warmup span, then linear peak -> 0."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(
            f"lr_at: step {step} outside [0, {sched.total_steps}]"
        )
    warmup = sched.warmup_frac * sched.total_steps
    if step <= warmup:
        return sched.peak * step / warmup
    return sched.peak * (sched.total_steps - step) / (sched.total_steps - warmup)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_adam_state(params: list[nn.Parameter], weight_decay: float = 0.01) -> AdamState:
    state = AdamState(weight_decay=weight_decay)
    for p in params:
        state.m[p.name] = np.zeros_like(p.data)
        state.v[p.name] = np.zeros_like(p.data)
    return state


def optimizer_step(
    params: list[nn.Parameter],
    grads: list[np.ndarray],
    state: AdamState,
    rate: float,
) -> None:
    """One bias-corrected moment update; decay is added to the update, never
    to the gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        if not np.isfinite(g).all():
            raise RuntimeError(
                f"optimizer_step: non-finite gradient in {p.name} at step {t}; "
                "training halted"
            )
        m, v = state.m[p.name], state.v[p.name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - rate * update


def clip_gradients(params: list[nn.Parameter], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip global norm. max_norm <= 0 disables clipping.
    """
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# -- train state persistence --------------------------------------------------


def _state_params(model: PretrainModel, state: AdamState) -> list[nn.Parameter]:
    # moments and the step counter ride along in the same container format
    extras = [nn.Parameter("opt.step", np.array([float(state.step)], dtype=np.float32))]
    for p in model.parameters():
        extras.append(nn.Parameter(f"opt.m.{p.name}", state.m[p.name]))
        extras.append(nn.Parameter(f"opt.v.{p.name}", state.v[p.name]))
    return model.parameters() + extras


def save_train_state(model: PretrainModel, state: AdamState, path: str) -> None:
    save_checkpoint(_state_params(model, state), path)


def load_train_state(model: PretrainModel, state: AdamState, path: str) -> int:
    """Restore parameters and optimizer moments; returns the stored step."""
    carriers = _state_params(model, state)
    load_checkpoint(carriers, path)
    by_name = {c.name: c for c in carriers}
    for p in model.parameters():
        p.data = by_name[p.name].data
        p.grad = np.zeros_like(p.data)
        state.m[p.name] = by_name[f"opt.m.{p.name}"].data
        state.v[p.name] = by_name[f"opt.v.{p.name}"].data
    state.step = int(by_name["opt.step"].data[0])
    return state.step


# -- pre-training loop --------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_frac: float = 0.10
    weight_decay: float = 0.01
    clip_norm: float = 1.0  # <= 0 disables
    mask_p: float = 0.15
    mask_policy: str = POLICY_MASK
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final state only


def _format_row(step: int, vals: list[float]) -> str:
    return ",".join([str(step)] + [repr(float(v)) for v in vals])


def run_pretraining(
    model: PretrainModel,
    split: CorpusSplit,
    vocab: WordVocab,
    cfg: TrainConfig,
    out_dir: str,
    resume_from: str | None = None,
    stop_after: int | None = None,
) -> list[dict]:
    """Loop pretrain_step/clip/update for cfg.steps, logging one CSV row per
    step to <out_dir>/losses.csv and leaving train_state.ckpt behind.

    `stop_after` interrupts the run after that step while keeping cfg.steps
    as the schedule horizon. With resume_from, restores model and optimizer,
    fast-forwards the batch stream, and appends to the existing CSV; the
    final artifacts are byte-identical to those of an unbroken run.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "losses.csv")
    state_path = os.path.join(out_dir, "train_state.ckpt")

    params = model.parameters()
    state = init_adam_state(params, cfg.weight_decay)
    start = 0
    if resume_from is not None:
        start = load_train_state(model, state, resume_from)

    sched = LRSchedule(cfg.steps, cfg.peak_lr, cfg.warmup_frac)
    batches = make_batches(
        split, cfg.batch_size, paired=False,
        rng=np.random.default_rng([cfg.seed, _LANE_BATCH]),
    )
    for _ in range(start):
        next(batches)  # replay the consumed prefix of the batch stream

    last = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    mode = "a" if start else "w"
    rows: list[dict] = []
    with open(csv_path, mode, newline="") as fh:
        if not start:
            fh.write(LOSS_CSV_HEADER + "\n")
        for step in range(start + 1, last + 1):
            batch = next(batches)
            rate = lr_at(step, sched)
            breakdown = pretrain_step(
                model, batch, vocab,
                np.random.default_rng([cfg.seed, _LANE_MASK, step]),
                p=cfg.mask_p, policy=cfg.mask_policy,
            )
            clip_gradients(params, cfg.clip_norm)
            optimizer_step(params, [p.grad for p in params], state, rate)
            vals = [breakdown.mlm, breakdown.mtc, breakdown.moc,
                    breakdown.wfh, breakdown.total, rate]
            fh.write(_format_row(step, vals) + "\n")
            rows.append({
                "step": step, "mlm": breakdown.mlm, "mtc": breakdown.mtc,
                "moc": breakdown.moc, "wfh": breakdown.wfh,
                "total": breakdown.total, "lr": rate,
            })
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_train_state(model, state, state_path)
    save_train_state(model, state, state_path)
    save_checkpoint(model.parameters(), os.path.join(out_dir, "model.ckpt"))
    return rows


# -- fine-tuning loops --------------------------------------------------------


@dataclass
class FinetuneConfig:
    task: str = "retrieval"  # retrieval | vqa | ve | rec
    steps: int = 300
    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup_frac: float = 0.10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    gamma: float = tasks.GAMMA_DEFAULT
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("retrieval", "vqa", "ve", "rec"):
            raise ValueError(f"FinetuneConfig: unknown task '{self.task}'")


def _downstream_loss(model, heads, kind, scene, world, rng) -> nn.Tensor:
    from .corpus import gen_downstream_instance

    inst = gen_downstream_instance(kind, scene, world, rng)
    if kind == "vqa":
        logits = tasks.vqa_forward(model, heads, inst.question_tokens, scene)
        return ops.cross_entropy(ops.reshape(logits, (1, -1)), np.array([inst.answer]))
    if kind == "ve":
        logits = tasks.ve_forward(model, heads, inst.caption_tokens, scene)
        return ops.cross_entropy(ops.reshape(logits, (1, -1)), np.array([inst.label]))
    scores = tasks.rec_forward(model, heads, inst.query_tokens, scene)
    return ops.cross_entropy(ops.reshape(scores, (1, -1)), np.array([inst.gold_region]))


def run_finetune(
    model: PretrainModel,
    split: CorpusSplit,
    cfg: FinetuneConfig,
    world=None,
    out_dir: str | None = None,
) -> tuple[list[dict], tasks.TaskHeads | None]:
    """Fine-tune on a paired split; returns per-step loss rows and, for the
    auxiliary tasks, the trained heads."""
    if split.pairing is None:
        raise ValueError("run_finetune: needs a paired split")
    if cfg.task != "retrieval" and world is None:
        raise ValueError(f"run_finetune: task '{cfg.task}' needs the concept world")

    heads = None
    params = model.parameters()
    if cfg.task == "retrieval":
        head = tasks.retrieval_head(model, cfg.gamma)
    else:
        heads = tasks.TaskHeads(
            model.cfg.encoder.d_model,
            np.random.default_rng([cfg.seed, _LANE_HEADS]),
            dtype=model.dtype,
        )
        params = params + heads.parameters()

    state = init_adam_state(params, cfg.weight_decay)
    sched = LRSchedule(cfg.steps, cfg.peak_lr, cfg.warmup_frac)
    n = len(split.captions)
    rows: list[dict] = []
    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_fh = open(os.path.join(out_dir, "finetune_losses.csv"), "w", newline="")
        csv_fh.write("step,loss,lr\n")
    try:
        for step in range(1, cfg.steps + 1):
            rng = np.random.default_rng([cfg.seed, _LANE_FOURWAY, step])
            rate = lr_at(step, sched)
            losses = []
            if cfg.task == "retrieval":
                anchors = rng.integers(0, n, size=cfg.batch_size)
                for a in anchors:
                    inst = tasks.sample_fourway(split, int(a), rng)
                    loss, _ = tasks.fourway_loss(model, inst, head)
                    losses.append(loss)
            else:
                picks = rng.integers(0, len(split.scenes), size=cfg.batch_size)
                for s in picks:
                    # a degenerate scene can admit no instance of the drawn
                    # kind (no contradiction exists); walk to the next scene
                    for probe in range(len(split.scenes)):
                        idx = (int(s) + probe) % len(split.scenes)
                        try:
                            losses.append(_downstream_loss(
                                model, heads, cfg.task, split.scenes[idx], world, rng
                            ))
                            break
                        except RuntimeError:
                            continue
                    else:
                        raise RuntimeError(
                            f"run_finetune: no scene in split '{split.label}' "
                            f"admits a '{cfg.task}' instance"
                        )
            total = ops.mul(losses[0], 1.0 / len(losses))
            for extra in losses[1:]:
                total = ops.add(total, ops.mul(extra, 1.0 / len(losses)))
            for p in params:
                p.zero_grad()
            total.backward()
            clip_gradients(params, cfg.clip_norm)
            optimizer_step(params, [p.grad for p in params], state, rate)
            rows.append({"step": step, "loss": float(total.data), "lr": rate})
            if csv_fh is not None:
                csv_fh.write(_format_row(step, [float(total.data), rate]) + "\n")
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out_dir is not None:
        save_checkpoint(model.parameters(), os.path.join(out_dir, "model.ckpt"))
    return rows, heads


def task_accuracy(
    model: PretrainModel,
    heads: tasks.TaskHeads,
    kind: str,
    scenes: list,
    world,
    seed: int = 0,
) -> float:
    """Fraction of freshly drawn instances answered correctly, tape-free."""
    from .corpus import gen_downstream_instance

    correct = 0
    with nn.no_grad():
        for i, scene in enumerate(scenes):
            rng = np.random.default_rng([seed, _LANE_TASK, i])
            inst = gen_downstream_instance(kind, scene, world, rng)
            if kind == "vqa":
                logits = tasks.vqa_forward(model, heads, inst.question_tokens, scene)
                correct += int(np.argmax(logits.data) == inst.answer)
            elif kind == "ve":
                logits = tasks.ve_forward(model, heads, inst.caption_tokens, scene)
                correct += int(np.argmax(logits.data) == inst.label)
            else:
                scores = tasks.rec_forward(model, heads, inst.query_tokens, scene)
                correct += int(np.argmax(scores.data) == inst.gold_region)
    return correct / len(scenes)
