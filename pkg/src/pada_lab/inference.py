"""Two-step inference: generate a domain prompt, then classify with it.

Prompt decoding runs a synchronous beam search; the diverse variant
splits the beam into groups and penalizes each group for repeating
tokens that earlier groups emitted at the same step. Plain beam search
is the one-group, zero-penalty case of the same engine. Final candidate
ranking always uses the raw (unpenalized) cumulative log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import BOS, EOS, SEP, DOMAIN_PREFIX, UNK, Example, Vocabulary, tokenize
from .model import ModelConfig, classify, decode_step, encode, pad_batch
from .training import build_disc_input


@dataclass(frozen=True)
class BeamConfig:
    num_candidates: int = 5
    beam_size: int = 10
    num_groups: int = 5
    diversity_penalty: float = 1.5
    max_len: int | None = None
    length_normalize: bool = False

    def __post_init__(self):
        if self.num_candidates < 1 or self.beam_size < 1 or self.num_groups < 1:
            raise ValueError("beam sizes must be positive")
        if self.beam_size % self.num_groups != 0:
            raise ValueError(
                f"beam_size {self.beam_size} is not divisible by num_groups {self.num_groups}"
            )
        if self.diversity_penalty < 0:
            raise ValueError("diversity_penalty must be non-negative")


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]  # decoder output so far, no BOS, may end with EOS
    raw_score: float  # cumulative log-probability
    penalized_score: float

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS


def _step_logp(cfg, params, enc_states, enc_mask, hyps: Sequence[Hypothesis]) -> np.ndarray:
    prefixes = [(BOS,) + h.ids for h in hyps]
    rows = np.repeat(enc_states, len(hyps), axis=0)
    masks = np.repeat(enc_mask, len(hyps), axis=0)
    return decode_step(cfg, params, rows, masks, prefixes)


def _extend(hyps, logp, penalties, width) -> list[Hypothesis]:
    """Top `width` one-token extensions by penalized score. Ties break
    toward the lexicographically smaller id sequence."""
    pool = []
    for row, h in enumerate(hyps):
        pen_row = logp[row] - penalties
        for tok in range(logp.shape[1]):
            pool.append(
                Hypothesis(
                    ids=h.ids + (tok,),
                    raw_score=h.raw_score + float(logp[row, tok]),
                    penalized_score=h.penalized_score + float(pen_row[tok]),
                )
            )
    pool.sort(key=lambda h: (-h.penalized_score, h.ids))
    return pool[:width]


def _rank_key(cfg: BeamConfig):
    if cfg.length_normalize:
        return lambda h: (-h.raw_score / len(h.ids), h.ids)
    return lambda h: (-h.raw_score, h.ids)


def diverse_beam_search(
    model_cfg: ModelConfig,
    params: dict,
    enc_states: np.ndarray,
    enc_mask: np.ndarray,
    cfg: BeamConfig,
) -> list[Hypothesis]:
    """Decode one encoded input into `num_candidates` hypotheses.

    Groups advance in a fixed order each step; a group's token scores
    are reduced by diversity_penalty times the number of times earlier
    groups emitted that token at this same step. Within a group an
    ordinary beam on cumulative penalized score applies. Every
    hypothesis ends with EOS (forced at the length cap).
    """
    if enc_states.shape[0] != 1:
        raise ValueError("decode one input at a time")
    max_len = cfg.max_len if cfg.max_len is not None else model_cfg.max_output_len
    group_width = cfg.beam_size // cfg.num_groups
    vocab_size = model_cfg.vocab_size

    groups: list[list[Hypothesis]] = [
        [Hypothesis(ids=(), raw_score=0.0, penalized_score=0.0)]
        for _ in range(cfg.num_groups)
    ]
    finished: list[Hypothesis] = []

    for step in range(max_len):
        emitted = np.zeros(vocab_size)
        any_active = False
        for g in range(cfg.num_groups):
            active = [h for h in groups[g] if not h.finished]
            done = [h for h in groups[g] if h.finished]
            if not active:
                continue
            any_active = True
            logp = _step_logp(model_cfg, params, enc_states, enc_mask, active)
            if step == max_len - 1:
                forced = np.full_like(logp, -np.inf)
                forced[:, EOS] = logp[:, EOS]
                logp = forced
            penalties = cfg.diversity_penalty * emitted
            extended = _extend(active, logp, penalties, group_width)
            for h in extended:
                emitted[h.ids[-1]] += 1.0
                if h.finished:
                    finished.append(h)
            groups[g] = done + [h for h in extended if not h.finished]
        if not any_active:
            break

    finished.sort(key=_rank_key(cfg))
    if not finished:
        raise RuntimeError("no finished hypotheses")
    return finished[: cfg.num_candidates]


def beam_search(
    model_cfg: ModelConfig,
    params: dict,
    enc_states: np.ndarray,
    enc_mask: np.ndarray,
    beam_size: int,
    num_candidates: int | None = None,
    max_len: int | None = None,
) -> list[Hypothesis]:
    """Plain beam search: the single-group, zero-penalty special case."""
    cfg = BeamConfig(
        num_candidates=num_candidates if num_candidates is not None else beam_size,
        beam_size=beam_size,
        num_groups=1,
        diversity_penalty=0.0,
        max_len=max_len,
    )
    return diverse_beam_search(model_cfg, params, enc_states, enc_mask, cfg)


# --- prompt generation and prediction ---------------------------------------


@dataclass(frozen=True)
class GeneratedPrompt:
    ids: tuple[int, ...]  # includes the trailing EOS
    tokens: tuple[str, ...]
    score: float
    used_fallback: bool = False

    @property
    def prompt_ids(self) -> tuple[int, ...]:
        return self.ids[:-1] if self.ids and self.ids[-1] == EOS else self.ids


def encode_for_generation(
    model_cfg: ModelConfig, params: dict, vocab: Vocabulary, example: Example
):
    text_ids = vocab.encode_tokens(tokenize(example.text))
    if not text_ids:
        raise ValueError(f"example {example.id!r} has no tokens")
    ids, mask = pad_batch([([DOMAIN_PREFIX] + text_ids)[: model_cfg.max_input_len]])
    return encode(model_cfg, params, ids, mask), mask


def generate_candidates(
    model_cfg: ModelConfig,
    params: dict,
    vocab: Vocabulary,
    example: Example,
    beam_cfg: BeamConfig | None = None,
) -> list[GeneratedPrompt]:
    """All decoded prompt candidates for one example, best first. A
    best candidate that decoded to bare EOS falls back to a single
    unknown-token prompt so downstream input construction still sees a
    non-empty prompt, and says so."""
    beam_cfg = beam_cfg if beam_cfg is not None else BeamConfig()
    enc_states, enc_mask = encode_for_generation(model_cfg, params, vocab, example)
    hyps = diverse_beam_search(model_cfg, params, enc_states, enc_mask, beam_cfg)
    out = []
    for rank, h in enumerate(hyps):
        if rank == 0 and len(h.ids) <= 1:
            out.append(
                GeneratedPrompt(
                    ids=(UNK, EOS),
                    tokens=(vocab.id_to_token[UNK],),
                    score=h.raw_score,
                    used_fallback=True,
                )
            )
            continue
        out.append(
            GeneratedPrompt(
                ids=h.ids,
                tokens=tuple(vocab.id_to_token[i] for i in h.ids[:-1]),
                score=h.raw_score,
            )
        )
    return out


def generate_prompt(
    model_cfg: ModelConfig,
    params: dict,
    vocab: Vocabulary,
    example: Example,
    beam_cfg: BeamConfig | None = None,
) -> GeneratedPrompt:
    """Best decoded prompt for one example."""
    return generate_candidates(model_cfg, params, vocab, example, beam_cfg)[0]


@dataclass(frozen=True)
class PredictResult:
    probs: np.ndarray  # [n_classes]
    prompt: GeneratedPrompt

    def top_class(self) -> int:
        return int(np.argmax(self.probs))


def classify_with_prompt(
    model_cfg: ModelConfig,
    params: dict,
    vocab: Vocabulary,
    example: Example,
    prompt_ids: Sequence[int],
) -> np.ndarray:
    text_ids = vocab.encode_tokens(tokenize(example.text))
    if not text_ids:
        raise ValueError(f"example {example.id!r} has no tokens")
    ids, mask = pad_batch([build_disc_input(prompt_ids, text_ids, model_cfg.max_input_len)])
    states = encode(model_cfg, params, ids, mask)
    logp = classify(model_cfg, params, states, mask)
    return np.exp(logp[0])


def predict(
    model_cfg: ModelConfig,
    params: dict,
    vocab: Vocabulary,
    example: Example,
    beam_cfg: BeamConfig | None = None,
) -> PredictResult:
    """Generate the prompt, then classify prompt + SEP + text."""
    prompt = generate_prompt(model_cfg, params, vocab, example, beam_cfg)
    probs = classify_with_prompt(model_cfg, params, vocab, example, prompt.prompt_ids)
    return PredictResult(probs=probs, prompt=prompt)
