"""The absolute-vs-relative A/B on the synthetic padded task.

Trains one model per (mode, seed) with identical seeds and
configuration apart from the position mode, then measures greedy-decode
token error on a standard held-out split and on a heavily padded copy
of the task. The padded split moves content to absolute positions never
seen in training, so the gap between the two error rates is the
degradation a position scheme suffers under time shift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .data import CharVocab, Utterance
from .metrics import token_error_rate
from .model import Model, ModelConfig, decode_greedy
from .position import ABSOLUTE, RELATIVE
from .training import TrainSchedule, train

log = logging.getLogger(__name__)


@dataclass
class ModeRun:
    mode: str
    seed: int
    ter_standard: float
    ter_shifted: float

    @property
    def degradation(self) -> float:
        return self.ter_shifted - self.ter_standard


@dataclass
class CompareReport:
    runs: list[ModeRun]

    def by_mode(self, mode: str) -> list[ModeRun]:
        return [r for r in self.runs if r.mode == mode]

    def mean(self, mode: str, field: str) -> float:
        runs = self.by_mode(mode)
        return sum(getattr(r, field) for r in runs) / len(runs)

    def summary(self) -> dict:
        return {
            mode: {
                "ter_standard": self.mean(mode, "ter_standard"),
                "ter_shifted": self.mean(mode, "ter_shifted"),
                "degradation": self.mean(mode, "degradation"),
            }
            for mode in (ABSOLUTE, RELATIVE)
        }

    def key_values(self) -> dict:
        pairs = {}
        for r in self.runs:
            prefix = f"{r.mode}.seed{r.seed}"
            pairs[f"{prefix}.ter_standard"] = r.ter_standard
            pairs[f"{prefix}.ter_shifted"] = r.ter_shifted
            pairs[f"{prefix}.degradation"] = r.degradation
        for mode, row in self.summary().items():
            for key, value in row.items():
                pairs[f"{mode}.mean_{key}"] = value
        pairs["relative_wins"] = sum(
            1 for a, b in zip(self.by_mode(RELATIVE), self.by_mode(ABSOLUTE))
            if a.degradation <= b.degradation
        )
        return pairs


def evaluate_token_error(model: Model, utterances: list[Utterance],
                         vocab: CharVocab) -> float:
    max_out = max(len(u.text) for u in utterances) * 2 + 4
    hyps = [vocab.detokenize(decode_greedy(model, u.features, max_out))
            for u in utterances]
    return token_error_rate(hyps, [u.text for u in utterances])


def run_compare_modes(train_set: list[Utterance], eval_standard: list[Utterance],
                      eval_shifted: list[Utterance], vocab: CharVocab,
                      base_config: ModelConfig, schedule: TrainSchedule,
                      seeds: list[int],
                      out_dir: Path | str | None = None) -> CompareReport:
    """Train and evaluate both position modes for every seed."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in seeds:
        for mode in (ABSOLUTE, RELATIVE):
            cfg = replace(base_config, position_mode=mode, vocab_size=vocab.size)
            model = Model.create(cfg, seed=seed)
            result = train(model, train_set, [], vocab, schedule, seed)
            if out is not None:
                (out / f"run_{mode}_seed{seed}.tsv").write_text(
                    "\n".join(result.log_lines) + "\n", encoding="utf-8")
            run = ModeRun(
                mode, seed,
                evaluate_token_error(model, eval_standard, vocab),
                evaluate_token_error(model, eval_shifted, vocab),
            )
            log.info("mode=%s seed=%d ter_standard=%.4f ter_shifted=%.4f",
                     mode, seed, run.ter_standard, run.ter_shifted)
            runs.append(run)
    return CompareReport(runs)
