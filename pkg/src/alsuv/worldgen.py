"""Synthetic world: a generator, correlated encoders and identities with samples.

Encoder ``k`` computes ``normalize(shared(x) + rho * private_k(x))``. The two
branches run side by side inside one ``Mlp``: hidden layers stack the
branches block-diagonally and the output layer adds them, so every encoder
is an ordinary network with exact input gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .numerics import Layer, Mlp, mlp_forward, mlp_to_dict, random_mlp

PRIVATE_WIDTHS = (16, 24, 32)
SEEN, VALIDATION, UNSEEN = "seen", "validation", "unseen"


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def make_generator(seed: int, latent_dim: int = 16, image_dim: int = 32, depth: int = 2,
                   hidden: int = 32, gain: float = 1.0) -> Mlp:
    """tanh hidden layers, linear output; ``depth`` counts weight layers."""
    if min(latent_dim, image_dim, depth, hidden) < 1:
        raise ValueError("generator dimensions must be >= 1")
    dims = [latent_dim] + [hidden] * (depth - 1) + [image_dim]
    return random_mlp(_rng(seed, 0), dims, activation="tanh", out_activation="identity",
                      gain=gain)


def _stack_branches(shared: Mlp, private: Mlp, rho: float) -> Mlp:
    layers = []
    last = len(shared.layers) - 1
    for k, (ls, lp) in enumerate(zip(shared.layers, private.layers)):
        if k == 0 and k != last:
            w = np.vstack([ls.weight, lp.weight])
            b = np.concatenate([ls.bias, lp.bias])
        elif k != last:
            w = block_diag(ls.weight, lp.weight)
            b = np.concatenate([ls.bias, lp.bias])
        elif k == 0:
            # single-layer branches read the same input
            w = ls.weight + rho * lp.weight
            b = ls.bias + rho * lp.bias
        else:
            w = np.hstack([ls.weight, rho * lp.weight])
            b = ls.bias + rho * lp.bias
        layers.append(Layer(w, b, ls.activation))
    return Mlp(tuple(layers), normalize_output=True)


@dataclass(frozen=True)
class EncoderEnsemble:
    encoders: tuple[Mlp, ...]
    roles: tuple[str, ...]
    seed: int
    rho: float

    def __post_init__(self):
        if len(self.encoders) != len(self.roles):
            raise ValueError("one role per encoder")
        if self.roles.count(SEEN) != 1 or self.roles.count(VALIDATION) != 1:
            raise ValueError("exactly one seen and one validation encoder required")
        if UNSEEN not in self.roles:
            raise ValueError("at least one unseen encoder required")
        if any(r not in (SEEN, VALIDATION, UNSEEN) for r in self.roles):
            raise ValueError(f"unknown role in {self.roles}")
        if not all(e.normalize_output for e in self.encoders):
            raise ValueError("encoders must unit-normalize their output")

    @property
    def seen_index(self) -> int:
        return self.roles.index(SEEN)

    @property
    def validation_index(self) -> int:
        return self.roles.index(VALIDATION)

    @property
    def unseen_indices(self) -> list[int]:
        return [k for k, r in enumerate(self.roles) if r == UNSEEN]

    @property
    def seen(self) -> Mlp:
        return self.encoders[self.seen_index]

    @property
    def validation(self) -> Mlp:
        return self.encoders[self.validation_index]

    def __len__(self):
        return len(self.encoders)


def default_roles(count: int, seen: int = 0, validation: int = 1) -> tuple[str, ...]:
    if seen == validation:
        raise ValueError("seen and validation encoders must differ")
    roles = [UNSEEN] * count
    roles[seen] = SEEN
    roles[validation] = VALIDATION
    return tuple(roles)


def make_encoder_ensemble(seed: int, count: int = 5, image_dim: int = 32, feature_dim: int = 8,
                          rho: float = 0.5, depth: int = 3, shared_width: int = 32,
                          gain: float = 1.0, private_gain: float | None = None,
                          private_out_gain: float = 1.0, private_bias: float = 0.1,
                          roles: tuple[str, ...] | None = None) -> EncoderEnsemble:
    if count < 3:
        raise ValueError("an ensemble needs seen, validation and >= 1 unseen encoder")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    shared_dims = [image_dim] + [shared_width] * (depth - 1) + [feature_dim]
    shared = random_mlp(_rng(seed, 1, 0), shared_dims, gain=gain)
    encoders = []
    for k in range(count):
        rng = _rng(seed, 1, k + 1)
        width = int(rng.choice(PRIVATE_WIDTHS))
        private = random_mlp(rng, [image_dim] + [width] * (depth - 1) + [feature_dim],
                             gain=gain if private_gain is None else private_gain,
                             out_gain=private_out_gain, bias_scale=private_bias)
        encoders.append(_stack_branches(shared, private, rho))
    return EncoderEnsemble(tuple(encoders), roles or default_roles(count), seed, rho)


@dataclass(frozen=True)
class IdentityWorld:
    """``samples[i, 0]`` is the clean source image ``G(z_real[i])``."""

    generator: Mlp
    z_real: np.ndarray  # (n_ids, latent_dim)
    samples: np.ndarray  # (n_ids, samples_per_id, image_dim)
    noise_scale: float
    seed: int = 0

    @property
    def n_ids(self) -> int:
        return self.z_real.shape[0]

    @property
    def samples_per_id(self) -> int:
        return self.samples.shape[1]

    @property
    def source_images(self) -> np.ndarray:
        return self.samples[:, 0]


def sample_identities(generator: Mlp, seed: int, n_ids: int = 50, samples_per_id: int = 4,
                      noise_scale: float = 0.05) -> IdentityWorld:
    if n_ids < 2 or samples_per_id < 2:
        raise ValueError("need >= 2 identities and >= 2 samples per identity")
    rng = _rng(seed, 2)
    z_real = rng.standard_normal((n_ids, generator.input_dim))
    clean = mlp_forward(generator, z_real)
    noise = rng.standard_normal((n_ids, samples_per_id, generator.output_dim))
    noise[:, 0] = 0.0
    samples = clean[:, None, :] + noise_scale * noise
    return IdentityWorld(generator, z_real, samples, noise_scale, seed)


def ground_truth_targets(world: IdentityWorld, ensemble: EncoderEnsemble) -> np.ndarray:
    """``targets[i, k]`` is encoder ``k``'s feature of identity ``i``'s real image."""
    images = mlp_forward(world.generator, world.z_real)
    feats = []
    for enc in ensemble.encoders:
        if enc.input_dim != world.generator.output_dim:
            raise ValueError("encoder input does not match generator output")
        feats.append(mlp_forward(enc, images))
    return np.stack(feats, axis=1)


@dataclass(frozen=True)
class WorldParams:
    """World knobs. The latent is wider than the feature, so a seen target
    pins down a whole family of latents rather than a single point."""

    latent_dim: int = 16
    image_dim: int = 32
    feature_dim: int = 8
    generator_depth: int = 2
    generator_hidden: int = 32
    generator_gain: float = 1.0
    encoder_count: int = 5
    encoder_depth: int = 3
    encoder_width: int = 32
    encoder_gain: float = 1.0
    private_gain: float = 1.0
    private_out_gain: float = 1.0
    private_bias: float = 0.1
    rho: float = 0.5
    noise_scale: float = 0.05
    n_ids: int = 50
    samples_per_id: int = 4
    seen_index: int = 0
    validation_index: int = 1


@dataclass(frozen=True)
class World:
    params: WorldParams
    seed: int
    identities: IdentityWorld
    ensemble: EncoderEnsemble
    targets: np.ndarray = field(repr=False)

    @property
    def generator(self) -> Mlp:
        return self.identities.generator

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(world_manifest(self, with_networks=True),
                                         sort_keys=True).encode()).hexdigest()


def build_world(params: WorldParams, seed: int) -> World:
    generator = make_generator(seed, params.latent_dim, params.image_dim, params.generator_depth,
                               params.generator_hidden, params.generator_gain)
    roles = default_roles(params.encoder_count, params.seen_index, params.validation_index)
    ensemble = make_encoder_ensemble(seed, params.encoder_count, params.image_dim,
                                     params.feature_dim, params.rho, params.encoder_depth,
                                     params.encoder_width, params.encoder_gain,
                                     params.private_gain, params.private_out_gain,
                                     params.private_bias, roles)
    identities = sample_identities(generator, seed, params.n_ids, params.samples_per_id,
                                   params.noise_scale)
    return World(params, seed, identities, ensemble, ground_truth_targets(identities, ensemble))


def world_manifest(world: World, with_networks: bool = False) -> dict:
    doc = {
        "version": 1,
        "seed": world.seed,
        "params": world.params.__dict__.copy(),
        "roles": list(world.ensemble.roles),
        "identities": [
            {"index": i, "z_real": world.identities.z_real[i].tolist()}
            for i in range(world.identities.n_ids)
        ],
    }
    if with_networks:
        doc["generator"] = mlp_to_dict(world.generator)
        doc["encoders"] = [mlp_to_dict(e) for e in world.ensemble.encoders]
        doc["samples"] = world.identities.samples.tolist()
    return doc
