"""
RazorLab - Evaluation metrics

M1  forget zero-shot accuracy (own class prompt wins, ties count as a win)
M2  mean image-text cosine over forget pairs
M3  mean squared drift of pair similarities, before vs after
M4  retain zero-shot accuracy over the prompt bank
M5  1 - |Util_after - Util_before|, Util = top-1 image->text retrieval
    among the distinct retain captions

All values are fractions; ``to_row`` adds percentage columns.
"""

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from razorlab.autodiff import sequential_sum
from razorlab.data_synth import PairBatch, Splits
from razorlab.errors import ContractError, InputError
from razorlab.model import Checkpoint, encode_images, encode_texts

FP, Q8, Q4 = 'fp', 'q8', 'q4'
PRECISIONS = (FP, Q8, Q4)

METRIC_KEYS = ('m1', 'm2', 'm3', 'm4', 'm5')


@dataclass(frozen=True)
class MetricsReport:
    m1: float
    m2: float
    m3: float
    m4: float
    m5: float
    m3_forget: float = 0.0
    util_before: float = 0.0
    util_after: float = 0.0
    forget_split: str = 'forget'
    probe_split: str = 'val_retain'
    checkpoint_tag: str = ''
    precision: str = FP

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'MetricsReport':
        return cls(**json.loads(text))

    def to_row(self, scenario: str = '') -> Dict[str, object]:
        """Grid row: fractions plus x100 columns"""
        row: Dict[str, object] = {'scenario': scenario, 'precision': self.precision}
        for key in METRIC_KEYS:
            row[key.upper()] = getattr(self, key)
        for key in METRIC_KEYS:
            row[f'{key.upper()}_pct'] = round(getattr(self, key) * 100.0, 2)
        return row


# =============================================================================
# Similarity-level metrics
# =============================================================================

def own_class_wins(sims: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """True where the own-class prompt attains the row maximum"""
    own = sims[np.arange(len(class_ids)), class_ids]
    return own >= sims.max(axis=1)


def zero_shot_accuracy_from_similarities(sims: np.ndarray, class_ids: np.ndarray) -> float:
    """Fraction of rows whose argmax (first on ties) is the true class"""
    sims = np.asarray(sims)
    if sims.shape[0] == 0:
        raise InputError("empty split")
    return float(np.mean(np.argmax(sims, axis=1) == np.asarray(class_ids)))


def forget_accuracy_from_similarities(sims: np.ndarray, class_ids: np.ndarray) -> float:
    sims = np.asarray(sims)
    if sims.shape[0] == 0:
        raise InputError("empty split")
    return float(np.mean(own_class_wins(sims, np.asarray(class_ids))))


def drift_from_similarities(before: np.ndarray, after: np.ndarray) -> float:
    before, after = np.asarray(before), np.asarray(after)
    if before.shape != after.shape:
        raise ContractError("similarity vectors differ in length")
    if before.size == 0:
        raise InputError("empty probe split")
    diff = after - before
    return float(sequential_sum(diff * diff)) / diff.size


def m5_stability(util_before: float, util_after: float) -> float:
    for value in (util_before, util_after):
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"utility must be in [0, 1], got {value}")
    return float(min(1.0, max(0.0, 1.0 - abs(util_after - util_before))))


# =============================================================================
# Checkpoint-level metrics
# =============================================================================

def _batch(pairs) -> PairBatch:
    if isinstance(pairs, PairBatch):
        return pairs
    return PairBatch.from_pairs(list(pairs))


def _prompt_sims(checkpoint: Checkpoint, batch: PairBatch, prompt_bank: Sequence[Sequence[int]]) -> np.ndarray:
    return encode_images(checkpoint, batch.images) @ encode_texts(checkpoint, prompt_bank).T


def pair_similarity_values(checkpoint: Checkpoint, pairs) -> np.ndarray:
    batch = _batch(pairs)
    images = encode_images(checkpoint, batch.images)
    texts = encode_texts(checkpoint, batch.tokens)
    return sequential_sum(images * texts, axis=1)


def m1_forget_accuracy(checkpoint: Checkpoint, forget_split, prompt_bank) -> float:
    batch = _batch(forget_split)
    return forget_accuracy_from_similarities(_prompt_sims(checkpoint, batch, prompt_bank), batch.class_ids)


def m2_forget_cosine(checkpoint: Checkpoint, forget_split) -> float:
    sims = pair_similarity_values(checkpoint, forget_split)
    return float(sequential_sum(sims)) / sims.size


def m3_privleak(before: Checkpoint, after: Checkpoint, probe_split) -> float:
    if before.config != after.config:
        raise ContractError("checkpoints have different model configs")
    batch = _batch(probe_split)
    return drift_from_similarities(
        pair_similarity_values(before, batch), pair_similarity_values(after, batch)
    )


def m4_retain_accuracy(checkpoint: Checkpoint, retain_split, prompt_bank) -> float:
    batch = _batch(retain_split)
    return zero_shot_accuracy_from_similarities(_prompt_sims(checkpoint, batch, prompt_bank), batch.class_ids)


def _captions(tokens: Sequence[Tuple[int, ...]]) -> Tuple[List[Tuple[int, ...]], np.ndarray]:
    unique: Dict[Tuple[int, ...], int] = {}
    index = [unique.setdefault(tuple(t), len(unique)) for t in tokens]
    return list(unique), np.array(index, dtype=np.int64)


def retrieval_utility(checkpoint: Checkpoint, split) -> float:
    """Fraction of images whose nearest distinct caption is their own"""
    batch = _batch(split)
    captions, own = _captions(batch.tokens)
    sims = encode_images(checkpoint, batch.images) @ encode_texts(checkpoint, captions).T
    return float(np.mean(np.argmax(sims, axis=1) == own))


# =============================================================================
# Evaluator
# =============================================================================

class Evaluator:
    """
    Full report against a fixed reference checkpoint.

    Reference-side similarities and utility are computed once. Every text
    sequence (prompts, pair captions) is encoded once per evaluation.
    """

    def __init__(
        self,
        reference: Checkpoint,
        forget_pairs,
        probe_pairs,
        prompt_bank: Sequence[Sequence[int]],
        forget_split: str = 'forget',
        probe_split: str = 'val_retain',
    ):
        self.reference = reference
        self.forget = _batch(forget_pairs)
        self.probe = _batch(probe_pairs)
        self.forget_split = forget_split
        self.probe_split = probe_split

        sequences: Dict[Tuple[int, ...], int] = {}

        def index_of(tokens) -> np.ndarray:
            return np.array([sequences.setdefault(tuple(t), len(sequences)) for t in tokens], dtype=np.int64)

        self._prompt_idx = index_of(prompt_bank)
        self._forget_idx = index_of(self.forget.tokens)
        captions, self._probe_caption_pos = _captions(self.probe.tokens)
        self._caption_idx = index_of(captions)
        self._probe_idx = self._caption_idx[self._probe_caption_pos]
        self._sequences = list(sequences)

        self.calls = 0
        ref = self._embed(reference)
        self._ref_forget_sims = ref['forget_pairs']
        self._ref_probe_sims = ref['probe_pairs']
        self.util_before = ref['util']
        self.calls = 0

    def _embed(self, checkpoint: Checkpoint) -> Dict[str, object]:
        if checkpoint.config != self.reference.config:
            raise ContractError("checkpoint config differs from the reference")
        self.calls += 1
        texts = encode_texts(checkpoint, self._sequences)
        img_f = encode_images(checkpoint, self.forget.images)
        img_p = encode_images(checkpoint, self.probe.images)
        prompts = texts[self._prompt_idx]
        caption_sims = img_p @ texts[self._caption_idx].T
        return {
            'forget_prompt_sims': img_f @ prompts.T,
            'probe_prompt_sims': img_p @ prompts.T,
            'forget_pairs': sequential_sum(img_f * texts[self._forget_idx], axis=1),
            'probe_pairs': sequential_sum(img_p * texts[self._probe_idx], axis=1),
            'util': float(np.mean(np.argmax(caption_sims, axis=1) == self._probe_caption_pos)),
        }

    def evaluate(self, checkpoint: Checkpoint, precision: str = FP, tag: str = '') -> MetricsReport:
        if precision not in PRECISIONS:
            raise ContractError(f"unknown precision tag {precision!r}")
        e = self._embed(checkpoint)
        return MetricsReport(
            m1=forget_accuracy_from_similarities(e['forget_prompt_sims'], self.forget.class_ids),
            m2=float(sequential_sum(e['forget_pairs'])) / e['forget_pairs'].size,
            m3=drift_from_similarities(self._ref_probe_sims, e['probe_pairs']),
            m4=zero_shot_accuracy_from_similarities(e['probe_prompt_sims'], self.probe.class_ids),
            m5=m5_stability(self.util_before, e['util']),
            m3_forget=drift_from_similarities(self._ref_forget_sims, e['forget_pairs']),
            util_before=self.util_before,
            util_after=e['util'],
            forget_split=self.forget_split,
            probe_split=self.probe_split,
            checkpoint_tag=tag,
            precision=precision,
        )


def evaluate_all(
    before: Checkpoint,
    after: Checkpoint,
    splits: Splits,
    precision_tag: str = FP,
    checkpoint_tag: str = '',
) -> MetricsReport:
    """M1/M2 on the forget split, M3/M4/M5 on retain-class validation pairs"""
    evaluator = Evaluator(before, splits.forget, splits.val_retain, splits.prompt_bank)
    return evaluator.evaluate(after, precision_tag, checkpoint_tag)
