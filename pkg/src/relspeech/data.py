"""Synthetic speech-like utterances, tokenization, perturbation and batching.

The synthetic task stands in for real corpora: each target symbol is
emitted as a run of noisy copies of a per-symbol template vector, and
utterances are padded on both sides with noisy silence frames. The pads
move the content's absolute positions without changing the transcript,
which is exactly the condition an encoder should be invariant to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

BOS_ID = 0
EOS_ID = 1
UNK_ID = 2
PAD_ID = 3
RESERVED_TOKENS = 4

UNK_CHAR = "⁇"

log = logging.getLogger(__name__)


class CharVocab:
    """Character vocabulary behind reserved ids BOS/EOS/UNK/PAD = 0..3."""

    def __init__(self, chars):
        self.chars = "".join(sorted(set(chars)))
        self._ids = {c: RESERVED_TOKENS + i for i, c in enumerate(self.chars)}

    @classmethod
    def alphabet(cls, size: int) -> "CharVocab":
        return cls("abcdefghijklmnopqrstuvwxyz"[:size])

    @property
    def size(self) -> int:
        return RESERVED_TOKENS + len(self.chars)

    def tokenize(self, text: str) -> list[int]:
        return [self._ids.get(c, UNK_ID) for c in text]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            if i >= RESERVED_TOKENS:
                out.append(self.chars[i - RESERVED_TOKENS])
            elif i == UNK_ID:
                out.append(UNK_CHAR)
        return "".join(out)

    def __eq__(self, other):
        return isinstance(other, CharVocab) and self.chars == other.chars


@dataclass
class Utterance:
    features: np.ndarray          # [N x F]
    text: str                     # target symbol string
    pad_left: int = 0
    pad_right: int = 0
    speed: float = 1.0

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticTaskSpec:
    """Generator settings; templates are derived deterministically from seed.

    Templates must stay separable against the noise (min pairwise
    distance > 4 sigma) or the task stops being learnable.
    """

    alphabet_size: int = 8
    frames_per_symbol: tuple[int, int] = (2, 4)
    feature_dim: int = 8
    noise_sigma: float = 0.1
    pad_range: tuple[int, int] = (0, 4)
    symbols_range: tuple[int, int] = (3, 8)
    seed: int = 0
    templates: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.frames_per_symbol[0] < 1:
            raise ValueError("frames_per_symbol lower bound must be >= 1")
        if self.symbols_range[0] < 1:
            raise ValueError("symbols_range lower bound must be >= 1")
        if self.templates is None:
            rng = np.random.default_rng(self.seed)
            for _ in range(64):
                t = rng.normal(0.0, 1.0, size=(self.alphabet_size, self.feature_dim))
                t /= np.linalg.norm(t, axis=1, keepdims=True)
                if self._min_distance(t) > 4.0 * self.noise_sigma:
                    self.templates = t
                    break
            else:
                raise ValueError("could not draw separable templates; lower noise_sigma")
        elif self._min_distance(self.templates) <= 4.0 * self.noise_sigma:
            raise ValueError("templates too close together for the noise level")

    @staticmethod
    def _min_distance(t: np.ndarray) -> float:
        diff = t[:, None, :] - t[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        return dist[~np.eye(len(t), dtype=bool)].min()

    def vocab(self) -> CharVocab:
        return CharVocab.alphabet(self.alphabet_size)


def generate_utterance(spec: SyntheticTaskSpec, rng: np.random.Generator) -> Utterance:
    """One utterance: noisy template runs framed by noisy silence pads."""
    n_sym = int(rng.integers(spec.symbols_range[0], spec.symbols_range[1] + 1))
    symbol_ids = rng.integers(0, spec.alphabet_size, size=n_sym)
    lo, hi = spec.frames_per_symbol
    pad_left = int(rng.integers(spec.pad_range[0], spec.pad_range[1] + 1))
    pad_right = int(rng.integers(spec.pad_range[0], spec.pad_range[1] + 1))

    rows = [np.zeros((pad_left, spec.feature_dim))]
    for s in symbol_ids:
        run = int(rng.integers(lo, hi + 1))
        rows.append(np.tile(spec.templates[s], (run, 1)))
    rows.append(np.zeros((pad_right, spec.feature_dim)))
    feats = np.concatenate(rows, axis=0)
    if spec.noise_sigma > 0.0:
        feats = feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    letters = "abcdefghijklmnopqrstuvwxyz"
    text = "".join(letters[s] for s in symbol_ids)
    return Utterance(feats, text, pad_left, pad_right)


def generate_dataset(spec: SyntheticTaskSpec, n: int, seed: int) -> list[Utterance]:
    """n utterances, one spawned seed per index so generation can shard."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [generate_utterance(spec, np.random.default_rng(c)) for c in children]


def spec_augment(x: np.ndarray, time_masks: int, max_t: int,
                 freq_masks: int, max_f: int, rng: np.random.Generator) -> np.ndarray:
    """Zero random time spans (width <= max_t) and feature bands (width <= max_f)."""
    n, f = x.shape
    out = x.copy()
    max_t = min(max_t, n)
    max_f = min(max_f, f)
    for _ in range(time_masks):
        w = int(rng.integers(0, max_t + 1))
        t0 = int(rng.integers(0, n - w + 1))
        out[t0:t0 + w, :] = 0.0
    for _ in range(freq_masks):
        w = int(rng.integers(0, max_f + 1))
        f0 = int(rng.integers(0, f - w + 1))
        out[:, f0:f0 + w] = 0.0
    return out


def speed_perturb(x: np.ndarray, factor: float) -> np.ndarray:
    """Resample along time by linear interpolation; length becomes round(N/factor)."""
    if factor <= 0.0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    n = x.shape[0]
    out_len = int(round(n / factor))
    if out_len < 1:
        raise ValueError(f"speed factor {factor} empties a {n}-frame utterance")
    if factor == 1.0:
        return x.copy()
    # frame-center mapping: output frame i reads source position (i+.5)*factor-.5
    pos = np.clip((np.arange(out_len) + 0.5) * factor - 0.5, 0.0, n - 1.0)
    lower = np.floor(pos).astype(np.intp)
    upper = np.minimum(lower + 1, n - 1)
    w = (pos - lower)[:, None]
    return (1.0 - w) * x[lower] + w * x[upper]


@dataclass
class Batch:
    """Zero-padded utterance group with the bookkeeping to undo the padding."""

    features: np.ndarray      # [B x Nmax x F]
    frame_lens: np.ndarray    # [B] true frame counts
    dec_inputs: np.ndarray    # [B x (1+Mmax)] BOS + token ids, PAD-filled
    token_lens: np.ndarray    # [B] true decoder input lengths (1 + target len)
    target_tokens: int        # raw target token count (budget / accumulation unit)

    @property
    def size(self) -> int:
        return self.features.shape[0]


def make_batch(utterances: list[Utterance], vocab: CharVocab) -> Batch:
    ids = [vocab.tokenize(u.text) for u in utterances]
    n_max = max(u.n_frames for u in utterances)
    m_max = max(len(t) for t in ids)
    f = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), n_max, f))
    dec = np.full((len(utterances), m_max + 1), PAD_ID, dtype=np.intp)
    frame_lens = np.empty(len(utterances), dtype=np.intp)
    token_lens = np.empty(len(utterances), dtype=np.intp)
    for i, (u, t) in enumerate(zip(utterances, ids)):
        feats[i, : u.n_frames] = u.features
        dec[i, 0] = BOS_ID
        dec[i, 1: 1 + len(t)] = t
        frame_lens[i] = u.n_frames
        token_lens[i] = 1 + len(t)
    return Batch(feats, frame_lens, dec, token_lens, sum(len(t) for t in ids))


def batch_by_tokens(utterances, vocab: CharVocab, max_target_tokens: int,
                    max_frames: int, sort: bool = True) -> list[Batch]:
    """Greedy packing under two budgets: target tokens and feature frames.

    Items are bucketed by length first (disable with ``sort=False``) so
    padding waste stays small; both budgets count true lengths.
    """
    items = list(utterances)
    if sort:
        items.sort(key=lambda u: (len(u.text), u.n_frames))
    for i, u in enumerate(items):
        if len(u.text) > max_target_tokens or u.n_frames > max_frames:
            raise ValueError(
                f"utterance {i} ({u.text!r}, {u.n_frames} frames) exceeds batch budget"
            )
    batches = []
    current: list[Utterance] = []
    tok = frames = 0
    for u in items:
        if current and (tok + len(u.text) > max_target_tokens
                        or frames + u.n_frames > max_frames):
            batches.append(make_batch(current, vocab))
            current, tok, frames = [], 0, 0
        current.append(u)
        tok += len(u.text)
        frames += u.n_frames
    if current:
        batches.append(make_batch(current, vocab))
    return batches


def save_dataset(path, utterances: list[Utterance], vocab: CharVocab | None = None):
    """Write the line-oriented dataset format.

    Header ``F <dim> V <vocabsize>``, then per utterance a ``U <N> <M>``
    line, N feature rows and one target line. The vocabulary is the
    sorted character set of the targets, so V is derived when no vocab
    is given.
    """
    if not utterances:
        raise ValueError("refusing to write an empty dataset")
    if vocab is None:
        vocab = CharVocab("".join(u.text for u in utterances))
    dim = utterances[0].features.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"F {dim} V {vocab.size}\n")
        for u in utterances:
            fh.write(f"U {u.n_frames} {len(u.text)}\n")
            for row in u.features:
                fh.write(" ".join(repr(v) for v in row) + "\n")
            fh.write(u.text + "\n")


def load_dataset(path) -> tuple[list[Utterance], CharVocab]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "F" or header[2] != "V":
            raise ValueError(f"{path}: malformed dataset header")
        dim, vsize = int(header[1]), int(header[3])
        utterances = []
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.split()
            if len(parts) != 3 or parts[0] != "U":
                raise ValueError(f"{path}: expected utterance header, got {line!r}")
            n, m = int(parts[1]), int(parts[2])
            feats = np.empty((n, dim))
            for i in range(n):
                row = np.array(fh.readline().split(), dtype=np.float64)
                if row.shape[0] != dim:
                    raise ValueError(f"{path}: feature row has {row.shape[0]} values, expected {dim}")
                feats[i] = row
            text = fh.readline().rstrip("\n")
            if len(text) != m:
                raise ValueError(f"{path}: target length {len(text)} != declared {m}")
            utterances.append(Utterance(feats, text))
    vocab = CharVocab("".join(u.text for u in utterances))
    if vocab.size != vsize:
        raise ValueError(
            f"{path}: header vocab size {vsize} != {vocab.size} derived from targets"
        )
    return utterances, vocab
