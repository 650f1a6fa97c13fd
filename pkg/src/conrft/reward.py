"""Binary success classifier emitting the sparse step reward.

Trains a small dense head on frozen-backbone embeddings from curated
positive/negative observation sets; at run time every step earns exactly one
of the two configured reward values.
"""

from __future__ import annotations

import numpy as np

from .encoder import EncoderBackbone, encode_observations
from .nn import MLP, Adam
from .types import Observation

REWARD_SUCCESS = 10.0
REWARD_STEP = -0.05


class SuccessClassifier:
    """Probability head over the frozen embedding with a success threshold."""

    def __init__(self, backbone: EncoderBackbone, rng: np.random.Generator,
                 hidden: int = 32, threshold: float = 0.9,
                 reward_success: float = REWARD_SUCCESS,
                 reward_step: float = REWARD_STEP):
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must lie in (0,1), got {threshold}")
        self.backbone = backbone
        self.net = MLP([backbone.embed_dim, hidden, 1], rng)
        self.threshold = threshold
        self.reward_success = reward_success
        self.reward_step = reward_step
        self.holdout_accuracy = None
        # feature standardization fitted on the training split
        self.feat_mean = np.zeros(backbone.embed_dim, dtype=np.float32)
        self.feat_scale = np.ones(backbone.embed_dim, dtype=np.float32)

    def named_params(self, prefix="classifier."):
        return self.net.named_params(prefix)

    def fit_standardization(self, embeddings):
        self.feat_mean = embeddings.mean(axis=0).astype(np.float32)
        self.feat_scale = np.maximum(embeddings.std(axis=0),
                                     1e-6).astype(np.float32)

    def standardize(self, embeddings):
        x = np.asarray(embeddings, dtype=self.net.dtype)
        return (x - self.feat_mean) / self.feat_scale

    def probability_batch(self, embeddings) -> np.ndarray:
        logits = self.net.forward(self.standardize(embeddings))
        return 1.0 / (1.0 + np.exp(-logits[:, 0].astype(np.float64)))

    def probability(self, obs: Observation) -> float:
        emb = self.backbone.encode(obs)
        return float(self.probability_batch(emb[None])[0])


def step_reward(classifier: SuccessClassifier, obs: Observation):
    """(reward, success) for one observation; success at p >= threshold."""
    p = classifier.probability(obs)
    success = p >= classifier.threshold
    return (classifier.reward_success if success else classifier.reward_step,
            success)


def train_classifier(positive_obs, negative_obs, backbone: EncoderBackbone,
                     epochs: int, seed: int, threshold: float = 0.9,
                     lr: float = 1e-2, batch_size: int = 64,
                     weight_decay: float = 1e-2) -> SuccessClassifier:
    """Fits the classifier and records held-out accuracy on a 20% split.

    Weight decay keeps conflicting labels at the chance level instead of
    letting the head memorize individual points. Sets too small for a split
    (fewer than 5 per class) report training accuracy instead.
    """
    positive_obs = list(positive_obs)
    negative_obs = list(negative_obs)
    if not positive_obs or not negative_obs:
        raise ValueError("both positive and negative sets must be non-empty")
    rng = np.random.default_rng(seed)
    clf = SuccessClassifier(backbone, rng, threshold=threshold)

    emb_pos = encode_observations(backbone, positive_obs)
    emb_neg = encode_observations(backbone, negative_obs)

    def split(emb):
        n = emb.shape[0]
        order = rng.permutation(n)
        n_hold = n // 5
        return emb[order[n_hold:]], emb[order[:n_hold]]

    train_pos, hold_pos = split(emb_pos)
    train_neg, hold_neg = split(emb_neg)
    if len(hold_pos) == 0 or len(hold_neg) == 0:
        hold_pos, hold_neg = train_pos, train_neg
    clf.fit_standardization(np.concatenate([train_pos, train_neg]))
    x = clf.standardize(np.concatenate([train_pos, train_neg]))
    y = np.concatenate([np.ones(len(train_pos)), np.zeros(len(train_neg))])

    params = clf.net.params()
    weight_slots = {id(w) for w in clf.net.weights}
    opt = Adam(params, lr=lr)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = clf.net.forward_cached(x[idx])
            p = 1.0 / (1.0 + np.exp(-logits[:, 0].astype(np.float64)))
            gy = ((p - y[idx]) / len(idx))[:, None].astype(np.float32)
            grads, _ = clf.net.backward(cache, gy)
            for g, param in zip(grads, params):
                if id(param) in weight_slots:
                    g += weight_decay * param
            opt.step(grads)

    x_hold = clf.standardize(np.concatenate([hold_pos, hold_neg]))
    y_hold = np.concatenate([np.ones(len(hold_pos)), np.zeros(len(hold_neg))])
    logits = clf.net.forward(x_hold)[:, 0]
    pred = logits >= 0.0
    clf.holdout_accuracy = float(np.mean(pred == (y_hold > 0.5)))
    return clf


class OracleReward:
    """Ground-truth reward switch for studying classifier reward hacking."""

    def __init__(self, reward_success: float = REWARD_SUCCESS,
                 reward_step: float = REWARD_STEP):
        self.reward_success = reward_success
        self.reward_step = reward_step

    def reward_for(self, success: bool):
        return self.reward_success if success else self.reward_step


def collect_labeled_observations(env, n_per_class: int, seed: int):
    """Scripted stand-in for operator-curated sets: draws labeled states
    from the environment's ground-truth predicate."""
    rng = np.random.default_rng(seed)
    positives = [env.sample_state(rng, success=True)
                 for _ in range(n_per_class)]
    negatives = [env.sample_state(rng, success=False)
                 for _ in range(n_per_class)]
    return positives, negatives
