"""Task-identity prediction from per-task relevance signatures.

After task t, the mean final-block feature of the task is turned into a
signature pi_t = (omega_1, ..., omega_t). At inference a test sample's own
signature pi* is compared against the stored set by cosine similarity; the
winning head's logits get scaled by (1 + confidence).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .memory import FeatureMemory, relevance

__all__ = [
    "SignatureSet",
    "TaskPrediction",
    "compute_signature",
    "predict_task",
    "scale_logits",
]


@dataclass
class SignatureSet:
    lam: float = 2.0
    signatures: list = field(default_factory=list)  # pi_tau, length tau each

    def add(self, pi: np.ndarray):
        self.signatures.append(np.array(pi, dtype=np.float64, copy=True))

    def __len__(self) -> int:
        return len(self.signatures)


@dataclass
class TaskPrediction:
    task: Optional[int]      # 0-based head index, None when undecidable
    confidence: float        # delta >= 0; zero suppresses scaling
    similarities: np.ndarray


def compute_signature(v_bar: np.ndarray, mem: FeatureMemory) -> np.ndarray:
    """Relevance of a final-block feature against every stored Psi_tau.

    All-empty residual bases give the all-zero (degenerate) signature.
    """
    final = mem.layers[-1]
    return np.array([relevance(p, v_bar) for p in final.psi])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    n = max(len(a), len(b))
    ap = np.zeros(n)
    ap[: len(a)] = a
    bp = np.zeros(n)
    bp[: len(b)] = b
    na, nb = np.linalg.norm(ap), np.linalg.norm(bp)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(abs(ap @ bp) / (na * nb))


def predict_task(pi_star: np.ndarray, signatures: SignatureSet) -> TaskPrediction:
    """argmax-cosine task identity with confidence margin.

    Signatures of different lengths are zero-extended before the cosine. A
    zero pi_star yields no prediction (confidence 0, no scaling). With one
    stored task the runner-up similarity is defined as 0.
    """
    if len(signatures) == 0:
        raise ValueError("no stored signatures")
    pi_star = np.asarray(pi_star, dtype=np.float64).reshape(-1)
    sims = np.array([_cosine(pi, pi_star) for pi in signatures.signatures])
    if np.linalg.norm(pi_star) == 0.0:
        return TaskPrediction(task=None, confidence=0.0, similarities=sims)
    k_hat = int(np.argmax(sims))
    runner_up = 0.0
    if len(sims) > 1:
        runner_up = float(np.max(np.delete(sims, k_hat)))
    delta = signatures.lam * (sims[k_hat] - runner_up)
    return TaskPrediction(task=k_hat, confidence=float(delta), similarities=sims)


def scale_logits(logits: np.ndarray, head_ranges: list, prediction: TaskPrediction) -> np.ndarray:
    """Multiply the predicted head's logit slice by (1 + confidence).

    Entries outside the predicted head are returned bit-identical; a missing
    prediction or zero confidence leaves everything untouched.
    """
    out = np.array(logits, dtype=np.float64, copy=True)
    if prediction.task is None or prediction.confidence == 0.0:
        return out
    start, stop = head_ranges[prediction.task]
    out[start:stop] *= 1.0 + prediction.confidence
    return out
