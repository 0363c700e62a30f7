"""Measurement protocol: success rates, embedding similarities, EER.

Success accounting follows nearest-centroid matching: a processed
adversarial sample counts as an attack success when its embedding is
closest to the target speaker's enrollment centroid, a defense success
when closest to the source speaker's, and neither when a third speaker
wins. The three counts always partition the evaluation set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from .encoder import EmbeddingModel, embed, speaker_centroids


class Judgement(Enum):
    ATTACK_SUCCESS = "attack_success"
    DEFENSE_SUCCESS = "defense_success"
    NEITHER = "neither"


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine: zero vector")
    return float(u @ v / (nu * nv))


def judge(embedding, source_label: int, target_label: int, centroids: np.ndarray) -> Judgement:
    """Nearest-centroid verdict; ties break toward the lowest index."""
    embedding = np.asarray(embedding, dtype=np.float64)
    norm = np.linalg.norm(embedding)
    if norm == 0.0:
        raise ValueError("judge: zero embedding")
    sims = centroids @ (embedding / norm) / np.linalg.norm(centroids, axis=1)
    winner = int(np.argmax(sims))
    if winner == target_label:
        return Judgement.ATTACK_SUCCESS
    if winner == source_label:
        return Judgement.DEFENSE_SUCCESS
    return Judgement.NEITHER


@dataclass(frozen=True)
class TrialSet:
    """Verification trials: same-speaker and cross-speaker cosine scores."""
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.target_scores, dtype=np.float64)
        n = np.asarray(self.nontarget_scores, dtype=np.float64)
        if t.size == 0 or n.size == 0:
            raise ValueError("TrialSet: both trial lists must be nonempty")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(n))):
            raise ValueError("TrialSet: scores must be finite")
        object.__setattr__(self, "target_scores", t)
        object.__setattr__(self, "nontarget_scores", n)


def _rates(threshold_list, targets, nontargets):
    # operating points swept over candidate thresholds; accept when score >= th
    n_tar = len(targets)
    n_non = len(nontargets)
    tar_sorted = np.sort(targets)
    non_sorted = np.sort(nontargets)
    far = 1.0 - np.searchsorted(non_sorted, threshold_list, side="left") / n_non
    frr = np.searchsorted(tar_sorted, threshold_list, side="left") / n_tar
    return far, frr


def eer(target_scores, nontarget_scores) -> float:
    """Equal error rate in percent.

    The ROC is swept over every distinct score (plus sentinels); the
    crossing of false-acceptance and false-rejection is linearly
    interpolated between adjacent operating points.
    """
    trials = TrialSet(np.atleast_1d(target_scores), np.atleast_1d(nontarget_scores))
    t, n = trials.target_scores, trials.nontarget_scores
    all_scores = np.unique(np.concatenate([t, n]))
    lo = all_scores[0] - 1.0
    hi = all_scores[-1] + 1.0
    thresholds = np.concatenate([[lo], all_scores, [hi]])
    far, frr = _rates(thresholds, t, n)
    diff = far - frr
    # diff starts at +1 (accept everything) and ends at -1 (reject everything)
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        return 100.0 * far[k]
    d1, d2 = diff[k - 1], diff[k]
    lam = d1 / (d1 - d2)
    return 100.0 * (far[k - 1] + lam * (far[k] - far[k - 1]))


def score_trials(model: EmbeddingModel, test_pairs, centroids: np.ndarray,
                 process=None) -> TrialSet:
    """Cosine scores of test utterances against every enrollment centroid.

    `process(x, key)` is applied to each utterance first (identity when
    None); key is a stable per-utterance index so seeded defenses are
    reproducible.
    """
    targets, nontargets = [], []
    for i, (x, label) in enumerate(test_pairs):
        if process is not None:
            x = process(x, i)
        e = embed(model, x)
        e = e / np.linalg.norm(e)
        sims = centroids @ e
        for spk, s in enumerate(sims):
            (targets if spk == label else nontargets).append(float(s))
    return TrialSet(np.array(targets), np.array(nontargets))


@dataclass(frozen=True)
class EvalReport:
    attack_success_rate: float
    defense_success_rate: float
    sim_src: float
    sim_tgt: float
    eer: float
    n_attack: int
    n_defense: int
    n_neither: int
    n_total: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_defense(model: EmbeddingModel, adv_examples, enroll_pairs, test_pairs,
                     process=None, reference: str = "centroids") -> EvalReport:
    """Run the full measurement protocol for one defense configuration.

    model: the encoder doing the judging (fine-tuned one for adversarial
      training, the clean one for purification).
    adv_examples: objects with x_adv, source_label, target_label.
    process: optional waveform defense applied to adversarial samples and
      clean trial utterances alike, as process(x, key).
    reference: "centroids" judges against enrollment centroids;
      "batch" judges against the clean eval-batch embeddings (the other
      reading of nearest-neighbour success accounting).
    """
    adv_examples = list(adv_examples)
    if not adv_examples:
        raise ValueError("evaluate_defense: empty adversarial set")
    if reference not in ("centroids", "batch"):
        raise ValueError(f"unknown reference {reference!r}")
    centroids = speaker_centroids(model, enroll_pairs)
    if reference == "batch":
        peer_embs = []
        peer_labels = []
        for ex in adv_examples:
            e = embed(model, ex.x)
            peer_embs.append(e / np.linalg.norm(e))
            peer_labels.append(ex.source_label)
        peer_embs = np.array(peer_embs)

    counts = {j: 0 for j in Judgement}
    sims_src, sims_tgt = [], []
    for i, ex in enumerate(adv_examples):
        x = ex.x_adv
        if process is not None:
            x = process(x, i)
        e = embed(model, x)
        if reference == "centroids":
            verdict = judge(e, ex.source_label, ex.target_label, centroids)
        else:
            winner = peer_labels[int(np.argmax(peer_embs @ (e / np.linalg.norm(e))))]
            if winner == ex.target_label:
                verdict = Judgement.ATTACK_SUCCESS
            elif winner == ex.source_label:
                verdict = Judgement.DEFENSE_SUCCESS
            else:
                verdict = Judgement.NEITHER
        counts[verdict] += 1
        sims_src.append(cosine(e, centroids[ex.source_label]))
        sims_tgt.append(cosine(e, centroids[ex.target_label]))

    trial_process = None
    if process is not None:
        offset = len(adv_examples)
        trial_process = lambda x, i: process(x, offset + i)
    trials = score_trials(model, test_pairs, centroids, process=trial_process)
    n = len(adv_examples)
    return EvalReport(
        attack_success_rate=100.0 * counts[Judgement.ATTACK_SUCCESS] / n,
        defense_success_rate=100.0 * counts[Judgement.DEFENSE_SUCCESS] / n,
        sim_src=float(np.mean(sims_src)),
        sim_tgt=float(np.mean(sims_tgt)),
        eer=eer(trials.target_scores, trials.nontarget_scores),
        n_attack=counts[Judgement.ATTACK_SUCCESS],
        n_defense=counts[Judgement.DEFENSE_SUCCESS],
        n_neither=counts[Judgement.NEITHER],
        n_total=n,
    )
