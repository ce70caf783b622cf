"""Optimization loop: Adam under the inverse-sqrt warmup schedule,
token-count gradient accumulation, checkpoint averaging, and the
pretrain-then-reinitialize-the-decoder curriculum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import checkpoint as ckpt
from .data import Batch, CharVocab, Utterance, batch_by_tokens
from .model import Model, ModelConfig, TrainContext, utterance_loss
from .tensor import Tape

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Non-finite loss or gradients; the run cannot continue."""


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """lr = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    Rises linearly to the peak at step == warmup, then decays as the
    inverse square root of the step.
    """
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    """Adam moments per parameter name, plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, beta1=0.9, beta2=0.98, eps=1e-9):
        state = cls(beta1, beta2, eps)
        for name, p in model.named_parameters():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(model: Model, grads: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place and deterministic."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in model.named_parameters():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainSchedule:
    warmup_steps: int = 4096
    d_model: int = 512
    max_steps: int = 120000
    accum_target_tokens: int = 12000
    checkpoint_every: int = 500
    keep_best: int = 10
    eval_every: int = 500
    label_smoothing: float = 0.1
    grad_clip: Optional[float] = None
    target_loss: Optional[float] = None   # stop early once train loss drops below

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.accum_target_tokens < 1:
            raise ValueError("accum_target_tokens must be >= 1")


@dataclass
class UpdateEvent:
    step: int
    tokens: int           # raw target tokens accumulated into this update
    lr: float
    loss: float           # per-position training loss of the accumulated span


def batch_loss(model: Model, batch: Batch, ctx: Optional[TrainContext],
               smoothing: float):
    """Summed loss over the batch and the number of supervised positions.

    Each utterance runs with its own true lengths masked in, so padding
    never leaks into the result.
    """
    total = None
    positions = 0
    for i in range(batch.size):
        loss, n = utterance_loss(
            model, batch.features[i], batch.dec_inputs[i], ctx,
            smoothing=smoothing,
            valid_frames=int(batch.frame_lens[i]),
            valid_tokens=int(batch.token_lens[i]),
        )
        total = loss if total is None else total + loss
        positions += n
    return total, positions


def accumulate_update(batches: Iterable[Batch], model: Model,
                      schedule: TrainSchedule, state: OptimizerState,
                      rng: np.random.Generator):
    """Drive micro-batches through forward/backward, firing an optimizer
    update every time the accumulated raw target-token count reaches the
    threshold. Gradients are normalized by the number of supervised
    positions in the accumulated span, so the update equals the one a
    single merged batch would produce.

    Yields an UpdateEvent per optimizer step.
    """
    tokens_acc = positions_acc = 0
    loss_acc = 0.0
    for batch in batches:
        if batch.target_tokens == 0:
            log.warning("skipping batch with zero target tokens")
            continue
        ctx = TrainContext(rng)
        with Tape() as tape:
            loss, positions = batch_loss(model, batch, ctx, schedule.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value}")
            tape.backward(loss)
        tokens_acc += batch.target_tokens
        positions_acc += positions
        loss_acc += value
        if tokens_acc >= schedule.accum_target_tokens:
            grads = {name: p.grad_or_zeros() / positions_acc
                     for name, p in model.named_parameters()}
            if schedule.grad_clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > schedule.grad_clip:
                    factor = schedule.grad_clip / norm
                    grads = {k: g * factor for k, g in grads.items()}
            lr = noam_lr(state.step + 1, schedule.d_model, schedule.warmup_steps)
            adam_step(model, grads, state, lr)
            model.zero_grads()
            yield UpdateEvent(state.step, tokens_acc, lr, loss_acc / positions_acc)
            tokens_acc = positions_acc = 0
            loss_acc = 0.0


def validation_perplexity(model: Model, batches: list[Batch]) -> float:
    """Teacher-forced perplexity, no smoothing, evaluation mode."""
    nll = 0.0
    count = 0
    for batch in batches:
        loss, n = batch_loss(model, batch, None, smoothing=0.0)
        nll += loss.item()
        count += n
    return math.exp(nll / count)


def format_log_line(event: UpdateEvent, val_ppl: Optional[float] = None) -> str:
    line = f"{event.step}\t{event.tokens}\t{event.lr:.6e}\t{event.loss:.6f}"
    if val_ppl is not None:
        line += f"\t{val_ppl:.6f}"
    return line


@dataclass
class CheckpointInfo:
    path: Path
    step: int
    val_ppl: float


@dataclass
class TrainResult:
    model: Model
    log_lines: list[str]
    checkpoints: list[CheckpointInfo]
    stopped_early: bool = False
    diverged: bool = False


def _micro_batches(train_set: list[Utterance], vocab: CharVocab,
                   token_budget: int, frame_budget: int,
                   rng: np.random.Generator, augment=None):
    """Endless shuffled stream of packed micro-batches."""
    while True:
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        if augment is not None:
            shuffled = [augment(u, rng) for u in shuffled]
        yield from batch_by_tokens(shuffled, vocab, token_budget, frame_budget,
                                   sort=False)


def train(model: Model, train_set: list[Utterance], val_set: list[Utterance],
          vocab: CharVocab, schedule: TrainSchedule, seed: int,
          out_dir: Path | str | None = None,
          save_vocab: CharVocab | None = None,
          augment=None) -> TrainResult:
    """Run optimization for up to ``schedule.max_steps`` updates.

    Deterministic for a fixed seed. Writes a checkpoint (with fresh
    validation perplexity) every ``checkpoint_every`` updates plus one
    at the end; on divergence the last good checkpoint is what remains.
    """
    data_rng, model_rng = [np.random.default_rng(s)
                           for s in np.random.SeedSequence(seed).spawn(2)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    token_budget = max(schedule.accum_target_tokens // 4,
                       max(len(u.text) for u in train_set))
    frame_budget = max(u.n_frames for u in train_set) * 8
    val_batches = batch_by_tokens(
        val_set, vocab, max(512, max(len(u.text) for u in val_set)),
        max(u.n_frames for u in val_set) * 8) if val_set else []
    stream = _micro_batches(train_set, vocab, token_budget, frame_budget, data_rng, augment)
    log_lines: list[str] = []
    checkpoints: list[CheckpointInfo] = []
    stopped = diverged = False
    save_vocab = save_vocab or vocab
    opt_state = OptimizerState.for_model(model)

    def save(step: int) -> None:
        if out is None:
            return
        ppl = validation_perplexity(model, val_batches) if val_batches else float("nan")
        path = out / f"checkpoint_{step:06d}.ckpt"
        ckpt.save_checkpoint(model, path, step=step, val_ppl=ppl, vocab=save_vocab)
        checkpoints.append(CheckpointInfo(path, step, ppl))

    save(0)
    try:
        for event in accumulate_update(stream, model, schedule, opt_state, model_rng):
            val_ppl = None
            if val_batches and event.step % schedule.eval_every == 0:
                val_ppl = validation_perplexity(model, val_batches)
            log_lines.append(format_log_line(event, val_ppl))
            if event.step % schedule.checkpoint_every == 0:
                save(event.step)
            if schedule.target_loss is not None and event.loss < schedule.target_loss:
                stopped = True
                break
            if event.step >= schedule.max_steps:
                break
    except DivergenceError as err:
        log.error("stopping on divergence: %s", err)
        diverged = True

    if not diverged and (not checkpoints or checkpoints[-1].step != _last_step(log_lines)):
        save(_last_step(log_lines))
    if out is not None:
        (out / "metrics.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        _prune_checkpoints(checkpoints, schedule.keep_best)
    return TrainResult(model, log_lines, checkpoints, stopped, diverged)


def _last_step(log_lines: list[str]) -> int:
    return int(log_lines[-1].split("\t")[0]) if log_lines else 0


def _prune_checkpoints(checkpoints: list[CheckpointInfo], keep: int) -> None:
    """Keep the ``keep`` lowest-perplexity checkpoints, ties to earlier steps."""
    if len(checkpoints) <= keep:
        return
    ranked = sorted(checkpoints, key=lambda c: (_ppl_key(c.val_ppl), c.step))
    for info in ranked[keep:]:
        info.path.unlink(missing_ok=True)
        checkpoints.remove(info)


def _ppl_key(ppl: float) -> float:
    return float("inf") if math.isnan(ppl) else ppl


def average_checkpoints(paths: list, k: int) -> Model:
    """Mean of the k lowest-perplexity checkpoints' parameters.

    Selection is by recorded validation perplexity (ties broken by
    earlier step), never by recency. All checkpoints must share one
    architecture.
    """
    loaded = [ckpt.load_checkpoint(p) for p in paths]
    scored = [c for c in loaded if c.val_ppl is not None and not math.isnan(c.val_ppl)]
    if len(scored) < k:
        raise ValueError(f"need {k} checkpoints with recorded perplexity, have {len(scored)}")
    scored.sort(key=lambda c: (c.val_ppl, c.step if c.step is not None else 0))
    chosen = scored[:k]
    base = chosen[0]
    for other in chosen[1:]:
        if other.model.cfg != base.model.cfg:
            raise ValueError(
                f"checkpoint architectures differ: {base.model.cfg} vs {other.model.cfg}"
            )
    result = base.model
    names = [name for name, _ in result.named_parameters()]
    stacked = {name: np.zeros_like(p.data) for name, p in result.named_parameters()}
    for c in chosen:
        for name, p in c.model.named_parameters():
            stacked[name] += p.data
    for name, p in result.named_parameters():
        p.data = stacked[name] / k
    return result


_ENCODER_FIELDS = ("d_model", "heads", "enc_layers", "ffn_dim", "input_dim",
                   "frame_stack", "position_mode", "max_len")


@dataclass
class DatasetSplits:
    train: list[Utterance]
    val: list[Utterance]
    vocab: CharVocab


def pretrain_then_reinit(model: Model, asr: DatasetSplits, st: DatasetSplits,
                         asr_schedule: TrainSchedule, st_schedule: TrainSchedule,
                         seed: int, st_config: ModelConfig | None = None,
                         out_dir: Path | str | None = None):
    """Two-phase curriculum: train on transcripts, then re-initialize the
    decoder (and tied output embedding) and train on translations with
    the pretrained encoder carried over.

    Returns (fine-tuned model, phase-1 result, phase-2 result).
    """
    phase1_seed, reinit_seed, phase2_seed = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)
    ]
    out = Path(out_dir) if out_dir is not None else None
    res1 = train(model, asr.train, asr.val, asr.vocab, asr_schedule, phase1_seed,
                 out / "asr" if out else None)

    cfg2 = st_config or replace(model.cfg, vocab_size=st.vocab.size)
    for name in _ENCODER_FIELDS:
        if getattr(cfg2, name) != getattr(model.cfg, name):
            raise ValueError(
                f"encoder config mismatch between phases: {name} "
                f"{getattr(model.cfg, name)!r} vs {getattr(cfg2, name)!r}"
            )
    fresh = Model(cfg2, np.random.default_rng(reinit_seed))
    # carry the whole encoder stack (frontend included) into phase 2
    pretrained = dict(model.named_parameters())
    for name, p in fresh.named_parameters():
        if name.startswith(("frontend.", "encoder.")):
            p.data = pretrained[name].data.copy()
    res2 = train(fresh, st.train, st.val, st.vocab, st_schedule, phase2_seed,
                 out / "st" if out else None)
    return fresh, res1, res2
