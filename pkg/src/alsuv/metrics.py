"""Type-II success attack rate, SAR@FAR, rank-1 identification.

Thresholds are set per encoder from that encoder's impostor scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import cosine_similarity, mlp_forward

FARS = (1e-4, 1e-3, 1e-2)
GUARD = 1e-12


@dataclass(frozen=True)
class ScoreSets:
    genuine: np.ndarray
    impostor: np.ndarray


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine of matching rows of ``a`` and ``b``.

    Sums run coordinate by coordinate in a fixed order, so a scalar loop
    doing the same arithmetic reproduces every score bit for bit.
    """
    a, b = np.broadcast_arrays(np.atleast_2d(a), np.atleast_2d(b))
    dot = np.zeros(a.shape[0])
    na = np.zeros(a.shape[0])
    nb = np.zeros(a.shape[0])
    for k in range(a.shape[1]):
        dot += a[:, k] * b[:, k]
        na += a[:, k] * a[:, k]
        nb += b[:, k] * b[:, k]
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine similarity of a zero vector")
    return np.clip(dot / (np.sqrt(na) * np.sqrt(nb)), -1.0, 1.0)


def score_sets_from_features(feats: np.ndarray) -> ScoreSets:
    """``feats`` has shape (n_ids, samples_per_id, dim); every unordered pair scored once."""
    n_ids, per_id, dim = feats.shape
    if per_id < 2 or n_ids < 2:
        raise ValueError("need >= 2 identities with >= 2 samples each")
    flat = feats.reshape(n_ids * per_id, dim)
    labels = np.repeat(np.arange(n_ids), per_id)
    iu, ju = np.triu_indices(len(flat), k=1)
    sims = rowwise_cosine(flat[iu], flat[ju])
    same = labels[iu] == labels[ju]
    return ScoreSets(sims[same], sims[~same])


def build_score_sets(identities, ensemble, encoder_index: int) -> ScoreSets:
    enc = ensemble.encoders[encoder_index]
    samples = identities.samples
    n_ids, per_id, dim = samples.shape
    feats = mlp_forward(enc, samples.reshape(-1, dim)).reshape(n_ids, per_id, -1)
    return score_sets_from_features(feats)


@dataclass(frozen=True)
class Threshold:
    value: float
    reliable: bool


def far_threshold(impostor, far: float) -> Threshold:
    """Smallest impostor score ``t`` with ``mean(impostor >= t) <= far``.

    Without ties this is the ascending order statistic at 0-based index
    ``ceil((1 - far) * N)``; tied scores push it up to the next distinct value.
    When no score qualifies (for instance ``N < 1/far``) the threshold sits
    just above the maximum and is flagged unreliable. ``far = 1`` admits
    everything and returns the minimum.
    """
    if not 0.0 < far <= 1.0:
        raise ValueError("far must lie in (0, 1]")
    scores = np.sort(np.asarray(impostor, dtype=np.float64))
    n = scores.size
    if n == 0:
        raise ValueError("empty impostor set")
    distinct = np.unique(scores)
    passing = n - np.searchsorted(scores, distinct, side="left")
    ok = passing / n <= far
    if not ok.any():
        return Threshold(float(scores[-1] + GUARD), False)
    return Threshold(float(distinct[int(np.argmax(ok))]), True)


def eer_threshold(genuine, impostor) -> float:
    """Score where the false-accept rate first drops to or below the false-reject rate."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("empty score set")
    candidates = np.unique(np.concatenate([genuine, impostor]))
    far = (impostor.size - np.searchsorted(impostor, candidates, side="left")) / impostor.size
    frr = np.searchsorted(genuine, candidates, side="left") / genuine.size
    return float(candidates[np.argmax(far <= frr)])


def sar(attack_scores, threshold: float) -> float:
    scores = np.asarray(attack_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no attack scores")
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return float(np.mean(scores >= threshold))


def type2_scores(probe_feature, identity_features: np.ndarray, source: int = 0) -> np.ndarray:
    """Reconstruction vs every sample of its identity except the source image."""
    others = np.delete(np.asarray(identity_features, dtype=np.float64), source, axis=0)
    return rowwise_cosine(np.asarray(probe_feature, dtype=np.float64), others)


def rank1_identification(probe, gallery: np.ndarray, gallery_ids, true_id) -> bool:
    """Nearest gallery entry by cosine has the true identity; ties go to the lower index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.size == 0:
        raise ValueError("empty gallery")
    gallery = np.atleast_2d(gallery)
    sims = rowwise_cosine(np.asarray(probe, dtype=np.float64), gallery)
    return bool(np.asarray(gallery_ids)[int(np.argmax(sims))] == true_id)


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def pseudo_target_analysis(outcome, G, E_val, v_val_truth) -> tuple[float, float, float]:
    """Validation-space distances to the truth of (seen top-1, selected, pseudo target)."""
    top1 = mlp_forward(E_val, mlp_forward(G, outcome.candidates[0]))
    chosen = mlp_forward(E_val, outcome.x_star)
    if outcome.pseudo_target is None:
        raise ValueError("outcome carries no pseudo target")
    return (
        cosine_distance(top1, v_val_truth),
        cosine_distance(chosen, v_val_truth),
        cosine_distance(outcome.pseudo_target, v_val_truth),
    )


# -- per-encoder report --------------------------------------------------------


@dataclass
class EncoderMetrics:
    index: int
    role: str
    threshold: float
    sar: float
    sar_at_far: dict[float, float]
    far_reliable: dict[float, bool]
    rank1: float
    mean_similarity: float  # reconstruction vs the encoder's own true target


@dataclass
class EvalReport:
    encoders: list[EncoderMetrics]
    unseen_average: dict[str, float] = field(default_factory=dict)
    pseudo_target_distances: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "encoders": [
                {
                    "index": m.index,
                    "role": m.role,
                    "threshold": m.threshold,
                    "sar": m.sar,
                    "sar_at_far": {f"{far:g}": v for far, v in m.sar_at_far.items()},
                    "far_reliable": {f"{far:g}": v for far, v in m.far_reliable.items()},
                    "rank1": m.rank1,
                    "mean_similarity": m.mean_similarity,
                }
                for m in self.encoders
            ],
            "unseen_average": dict(self.unseen_average),
            "pseudo_target_distances": dict(self.pseudo_target_distances),
        }

    def rows(self):
        """Flat (encoder, role, metric, value) rows."""
        for m in self.encoders:
            yield m.index, m.role, "threshold", m.threshold
            yield m.index, m.role, "sar", m.sar
            for far, v in m.sar_at_far.items():
                yield m.index, m.role, f"sar@far={far:g}", v
            yield m.index, m.role, "rank1", m.rank1
            yield m.index, m.role, "mean_similarity", m.mean_similarity
        for name, v in self.unseen_average.items():
            yield "unseen_avg", "unseen", name, v


def evaluate_encoder(k: int, role: str, encoder, identities, targets: np.ndarray,
                     reconstructions: dict[int, np.ndarray], fars=FARS) -> EncoderMetrics:
    """Score reconstructed images (identity -> image) on encoder ``k``."""
    samples = identities.samples
    n_ids, per_id, dim = samples.shape
    feats = mlp_forward(encoder, samples.reshape(-1, dim)).reshape(n_ids, per_id, -1)
    sets = score_sets_from_features(feats)
    tau = eer_threshold(sets.genuine, sets.impostor)
    far_taus = {far: far_threshold(sets.impostor, far) for far in fars}
    gallery = feats.reshape(n_ids * per_id, -1)
    gallery_ids = np.repeat(np.arange(n_ids), per_id)
    attack_scores, hits, sims = [], [], []
    for i, image in sorted(reconstructions.items()):
        probe = mlp_forward(encoder, image)
        attack_scores.append(type2_scores(probe, feats[i]))
        hits.append(rank1_identification(probe, gallery, gallery_ids, i))
        sims.append(cosine_similarity(probe, targets[i, k]))
    scores = np.concatenate(attack_scores)
    return EncoderMetrics(
        index=k,
        role=role,
        threshold=tau,
        sar=sar(scores, tau),
        sar_at_far={far: sar(scores, t.value) for far, t in far_taus.items()},
        far_reliable={far: t.reliable for far, t in far_taus.items()},
        rank1=float(np.mean(hits)),
        mean_similarity=float(np.mean(sims)),
    )


def unseen_average(metrics: list[EncoderMetrics]) -> dict[str, float]:
    unseen = [m for m in metrics if m.role == "unseen"]
    if not unseen:
        return {}
    out = {
        "sar": float(np.mean([m.sar for m in unseen])),
        "rank1": float(np.mean([m.rank1 for m in unseen])),
        "mean_similarity": float(np.mean([m.mean_similarity for m in unseen])),
    }
    for far in unseen[0].sar_at_far:
        out[f"sar@far={far:g}"] = float(np.mean([m.sar_at_far[far] for m in unseen]))
    return out
