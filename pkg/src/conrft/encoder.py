"""Frozen observation backbone: per-view conv stacks plus a dense trunk.

The backbone is pretrained once by behavior cloning on a broad multi-task
demo set (a throwaway regression head per task, discarded afterwards), then
frozen: its fingerprint must stay bit-identical through both fine-tuning
stages, and no gradient ever flows into it afterwards.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .nn import MLP, Adam, ConvStack
from .types import Observation, Trajectory


class FrozenBackboneError(RuntimeError):
    pass


class EncoderBackbone:
    """Maps an Observation to a fixed-size embedding, deterministically."""

    def __init__(self, image_shapes, proprio_dim: int,
                 rng: np.random.Generator, embed_dim: int = 64,
                 channels=(8, 16, 32), dense_hidden: int = 128,
                 dtype=np.float32):
        self.image_shapes = tuple(tuple(s) for s in image_shapes)
        self.proprio_dim = proprio_dim
        self.embed_dim = embed_dim
        self.channels = tuple(channels)
        self.dense_hidden = dense_hidden
        self.stacks = [ConvStack(shape, channels, rng, dtype=dtype)
                       for shape in self.image_shapes]
        conv_out = sum(stack.out_dim for stack in self.stacks)
        self.trunk = MLP([conv_out + proprio_dim, dense_hidden, embed_dim],
                         rng, dtype=dtype)
        self.frozen = False
        self.pretrain_losses = []

    def config(self):
        return {"image_shapes": [list(s) for s in self.image_shapes],
                "proprio_dim": self.proprio_dim,
                "embed_dim": self.embed_dim,
                "channels": list(self.channels),
                "dense_hidden": self.dense_hidden}

    def params(self):
        out = []
        for stack in self.stacks:
            out.extend(stack.params())
        out.extend(self.trunk.params())
        return out

    def named_params(self, prefix="encoder."):
        out = []
        for i, stack in enumerate(self.stacks):
            out.extend(stack.named_params(f"{prefix}view{i}."))
        out.extend(self.trunk.named_params(f"{prefix}trunk."))
        return out

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.named_params():
            digest.update(name.encode())
            digest.update(str(p.shape).encode())
            digest.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return digest.hexdigest()

    def freeze(self):
        self.frozen = True
        return self

    def _check_views(self, views, proprio):
        if len(views) != len(self.image_shapes):
            raise ValueError(f"expected {len(self.image_shapes)} views, "
                             f"got {len(views)}")
        for v, shape in zip(views, self.image_shapes):
            if tuple(v.shape[1:]) != shape:
                raise ValueError(f"view shape {v.shape[1:]} does not match "
                                 f"backbone {shape}")
        if proprio.shape[1] != self.proprio_dim:
            raise ValueError(f"proprio dim {proprio.shape[1]} does not match "
                             f"backbone {self.proprio_dim}")

    def encode_batch(self, views, proprio):
        """views: one (N,H,W,C) array per camera; proprio: (N,P)."""
        self._check_views(views, proprio)
        feats = [stack.forward(v) for stack, v in zip(self.stacks, views)]
        feats.append(np.asarray(proprio, dtype=self.trunk.dtype))
        return self.trunk.forward(np.concatenate(feats, axis=1))

    def encode(self, obs: Observation):
        views = [np.asarray(img)[None] for img in obs.images]
        return self.encode_batch(views, obs.proprio[None])[0]

    def forward_cached(self, views, proprio):
        if self.frozen:
            raise FrozenBackboneError("backbone is frozen; no training passes")
        self._check_views(views, proprio)
        feats = []
        caches = []
        for stack, v in zip(self.stacks, views):
            f, cache = stack.forward_cached(v)
            feats.append(f)
            caches.append(cache)
        feats.append(np.asarray(proprio, dtype=self.trunk.dtype))
        x = np.concatenate(feats, axis=1)
        emb, trunk_cache = self.trunk.forward_cached(x)
        return emb, (caches, trunk_cache)

    def backward(self, cache, g_emb):
        if self.frozen:
            raise FrozenBackboneError("backbone is frozen; no training passes")
        caches, trunk_cache = cache
        trunk_grads, gx = self.trunk.backward(trunk_cache, g_emb)
        grads = []
        offset = 0
        for stack, stack_cache in zip(self.stacks, caches):
            g_slice = gx[:, offset:offset + stack.out_dim]
            stack_grads, _ = stack.backward(stack_cache, g_slice)
            grads.extend(stack_grads)
            offset += stack.out_dim
        grads.extend(trunk_grads)
        return grads


def stack_observations(observations):
    """Stacks a list of Observations into per-view arrays plus proprio."""
    n_views = len(observations[0].images)
    views = [np.stack([np.asarray(o.images[v]) for o in observations])
             for v in range(n_views)]
    proprio = np.stack([o.proprio for o in observations])
    return views, proprio


def encode_observations(backbone: EncoderBackbone, observations):
    views, proprio = stack_observations(observations)
    return backbone.encode_batch(views, proprio)


def pretrain_backbone(demos, epochs: int, seed: int,
                      random_frozen: bool = False, lr: float = 1e-3,
                      batch_size: int = 64) -> EncoderBackbone:
    """Behavior-clones encoder + throwaway per-task regression heads on the
    demo trajectories, then discards the heads and freezes the encoder."""
    rng = np.random.default_rng(seed)
    demos = list(demos)
    if not demos and not random_frozen:
        raise ValueError("empty demo set; pass random_frozen=True to skip "
                         "pretraining")
    if demos:
        first = demos[0].transitions[0].s
        image_shapes = [img.shape for img in first.images]
        proprio_dim = first.proprio.shape[0]
    else:
        raise ValueError("cannot infer observation shapes without demos")
    backbone = EncoderBackbone(image_shapes, proprio_dim, rng)
    if random_frozen:
        return backbone.freeze()

    groups = {}
    for traj in demos:
        groups.setdefault(traj.env, []).append(traj)
    heads = {}
    datasets = {}
    for env_name in sorted(groups):
        transitions = [t for traj in groups[env_name]
                       for t in traj.transitions]
        obs = [t.s for t in transitions]
        views, proprio = stack_observations(obs)
        actions = np.stack([t.a for t in transitions]).astype(np.float32)
        datasets[env_name] = (views, proprio, actions)
        heads[env_name] = MLP([backbone.embed_dim, actions.shape[1]], rng)

    params = backbone.params()
    for env_name in sorted(heads):
        params = params + heads[env_name].params()
    opt = Adam(params, lr=lr)

    n_backbone = len(backbone.params())
    for _ in range(epochs):
        epoch_loss = 0.0
        epoch_count = 0
        for env_name in sorted(datasets):
            views, proprio, actions = datasets[env_name]
            head = heads[env_name]
            n = actions.shape[0]
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                batch_views = [v[idx] for v in views]
                emb, cache = backbone.forward_cached(batch_views, proprio[idx])
                pred, head_cache = head.forward_cached(emb)
                err = pred - actions[idx]
                loss = float(np.mean(err ** 2, dtype=np.float64))
                gy = (2.0 * err / err.size).astype(np.float32)
                head_grads, g_emb = head.backward(head_cache, gy)
                backbone_grads = backbone.backward(cache, g_emb)
                grads = backbone_grads + [np.zeros_like(p) for p in
                                          opt.params[n_backbone:]]
                # place this head's grads at its slot in the flat list
                offset = n_backbone
                for name in sorted(heads):
                    if name == env_name:
                        for j, g in enumerate(head_grads):
                            grads[offset + j] = g
                        break
                    offset += len(heads[name].params())
                opt.step(grads)
                epoch_loss += loss * len(idx)
                epoch_count += len(idx)
        backbone.pretrain_losses.append(epoch_loss / max(epoch_count, 1))
    return backbone.freeze()
