"""Monte Carlo predictive scoring for warm and cold users/items.

Scores are predicted interaction probabilities: the mean over S paired
posterior samples of the interaction net's output. Cold entities have no
feedback history, so their latent factor is sampled from the
side-information prior instead of the posterior (or from N(0, I) when the
corresponding prior is disabled).

Noise streams are keyed by (seed, side, entity id), which makes every
score deterministic for a fixed seed and independent of evaluation order
or batching.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .data import InteractionMatrix, SideInfo
from .model import ModelParams, inference_input

DEFAULT_SAMPLES = 128

_USER_STREAM = 0xA5
_ITEM_STREAM = 0x5A


def _noise(seed: int, stream: int, key: int, n: int, dim: int) -> np.ndarray:
    # SeedSequence wants non-negative entropy; negative keys (ad hoc cold
    # entities) wrap deterministically
    rng = np.random.default_rng((seed, stream, int(key) % (2**63)))
    return rng.standard_normal((n, dim))


def _draw(mean: np.ndarray, log_var: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mean + np.exp(0.5 * log_var) * eps


def user_posterior(model: ModelParams, train: InteractionMatrix, side: SideInfo,
                   users) -> tuple[np.ndarray, np.ndarray]:
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    x = inference_input(
        side.user_features[users], train.to_csr()[users], model.use_user_prior
    )
    return model.inf_user.forward_values(x)


def item_posterior(model: ModelParams, train: InteractionMatrix, side: SideInfo,
                   items) -> tuple[np.ndarray, np.ndarray]:
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    x = inference_input(
        side.item_features[items], train.to_csr_t()[items], model.use_item_prior
    )
    return model.inf_item.forward_values(x)


def user_prior_params(model: ModelParams, features) -> tuple[np.ndarray, np.ndarray]:
    if not model.use_user_prior:
        d = model.dims.latent_dim
        return np.zeros((features.shape[0], d)), np.zeros((features.shape[0], d))
    return model.prior_user.forward_values(features)


def item_prior_params(model: ModelParams, features) -> tuple[np.ndarray, np.ndarray]:
    if not model.use_item_prior:
        d = model.dims.latent_dim
        return np.zeros((features.shape[0], d)), np.zeros((features.shape[0], d))
    return model.prior_item.forward_values(features)


def _pair_probs(model: ModelParams, u_samples: np.ndarray,
                v_samples: np.ndarray) -> np.ndarray:
    return model.interact.forward_values(np.hstack([u_samples, v_samples]))[:, 0]


def _score_one(model, u_mean, u_lv, v_mean, v_lv, n_samples, seed,
               user_key, item_key) -> float:
    d = model.dims.latent_dim
    u = _draw(u_mean, u_lv, _noise(seed, _USER_STREAM, user_key, n_samples, d))
    v = _draw(v_mean, v_lv, _noise(seed, _ITEM_STREAM, item_key, n_samples, d))
    return float(_pair_probs(model, u, v).mean())


def score_warm(model: ModelParams, train: InteractionMatrix, side: SideInfo,
               user: int, item: int, n_samples: int = DEFAULT_SAMPLES,
               seed: int = 0) -> float:
    """Posterior-sampled interaction probability for a trained (user, item)."""
    if not 0 <= user < train.n_users:
        raise IndexError(f"user id {user} out of range [0, {train.n_users})")
    if not 0 <= item < train.n_items:
        raise IndexError(f"item id {item} out of range [0, {train.n_items})")
    u_mean, u_lv = user_posterior(model, train, side, user)
    v_mean, v_lv = item_posterior(model, train, side, item)
    return _score_one(model, u_mean, u_lv, v_mean, v_lv, n_samples, seed, user, item)


def score_cold_user(model: ModelParams, train: InteractionMatrix, side: SideInfo,
                    user_features, item: int, n_samples: int = DEFAULT_SAMPLES,
                    seed: int = 0, user_key: int = -1) -> float:
    """Like score_warm, but the user factor is sampled from the prior."""
    feats = sparse.csr_array(np.atleast_2d(user_features) if not sparse.issparse(user_features)
                             else user_features)
    if feats.shape[1] != side.user_dim:
        raise ValueError(
            f"cold user features have dim {feats.shape[1]}, expected {side.user_dim}"
        )
    u_mean, u_lv = user_prior_params(model, feats)
    v_mean, v_lv = item_posterior(model, train, side, item)
    return _score_one(model, u_mean, u_lv, v_mean, v_lv, n_samples, seed, user_key, item)


def score_cold_item(model: ModelParams, train: InteractionMatrix, side: SideInfo,
                    user: int, item_features, n_samples: int = DEFAULT_SAMPLES,
                    seed: int = 0, item_key: int = -1) -> float:
    """Mirror image of score_cold_user: the item factor comes from its prior."""
    feats = sparse.csr_array(np.atleast_2d(item_features) if not sparse.issparse(item_features)
                             else item_features)
    if feats.shape[1] != side.item_dim:
        raise ValueError(
            f"cold item features have dim {feats.shape[1]}, expected {side.item_dim}"
        )
    u_mean, u_lv = user_posterior(model, train, side, user)
    v_mean, v_lv = item_prior_params(model, feats)
    return _score_one(model, u_mean, u_lv, v_mean, v_lv, n_samples, seed, user, item_key)


def score_candidates(model: ModelParams, candidates, u_mean, u_lv,
                     v_means, v_lvs, n_samples: int, seed: int,
                     user_key: int) -> np.ndarray:
    """Scores for a candidate set sharing one user sample stream.

    `v_means`/`v_lvs` are aligned with `candidates`; sample s of the user is
    paired with sample s of each candidate.
    """
    d = model.dims.latent_dim
    n_cand = len(candidates)
    u = _draw(u_mean, u_lv, _noise(seed, _USER_STREAM, user_key, n_samples, d))
    v_all = np.empty((n_cand, n_samples, d))
    for c, item in enumerate(candidates):
        v_all[c] = _draw(v_means[[c]], v_lvs[[c]],
                         _noise(seed, _ITEM_STREAM, int(item), n_samples, d))
    probs = _pair_probs(
        model,
        np.tile(u, (n_cand, 1)),
        v_all.reshape(n_cand * n_samples, d),
    ).reshape(n_cand, n_samples)
    return probs.mean(axis=1)


def order_by_score(candidates, scores) -> list[tuple[int, float]]:
    """Descending score; ties broken by ascending item id."""
    candidates = np.asarray(candidates)
    scores = np.asarray(scores)
    order = np.lexsort((candidates, -scores))
    return [(int(candidates[i]), float(scores[i])) for i in order]


def rank(model: ModelParams, train: InteractionMatrix, side: SideInfo,
         user: int, candidates, n_samples: int = DEFAULT_SAMPLES,
         seed: int = 0) -> list[tuple[int, float]]:
    """Ordered (item, score) list for a user over a candidate set."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise ValueError("rank: empty candidate list")
    u_mean, u_lv = user_posterior(model, train, side, user)
    v_means, v_lvs = item_posterior(model, train, side, candidates)
    scores = score_candidates(
        model, candidates, u_mean, u_lv, v_means, v_lvs, n_samples, seed, user
    )
    return order_by_score(candidates, scores)


def rank_of_target(candidates, scores, target: int) -> int:
    """1-based rank of `target` under the descending-score ordering."""
    candidates = np.asarray(candidates)
    scores = np.asarray(scores)
    t = int(np.nonzero(candidates == target)[0][0])
    higher = int((scores > scores[t]).sum())
    tied_lower_id = int(((scores == scores[t]) & (candidates < target)).sum())
    return 1 + higher + tied_lower_id
