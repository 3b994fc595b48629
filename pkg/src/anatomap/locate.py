"""Few-shot localization: support averaging, coarse agent steps, refinement.

A support model per landmark holds the averaged latent coordinate and
the averaged (re-normalized) descriptor vectors from k annotated
template volumes. Localizing in a query volume then runs in two
stages: an agent walks toward the landmark by repeatedly predicting the
bounded physical offset from its current patch, and the final position
is refined by matching the support descriptors against every voxel of
a patch around the coarse estimate, summing the match maps across the
three feature scales.

All heavy paths are batched across landmarks; results are identical to
running landmarks one at a time.
"""

from dataclasses import dataclass, field

import numpy as np

from . import errors
from .nn import network
from .train import predict_offset
from .volume import Spacing, extract_patch

DEFAULT_MAX_STEPS = 3
EPS_NORM = 1e-8


@dataclass
class SupportModel:
    """Averaged latent coordinate and per-scale descriptors of a landmark."""

    latent: np.ndarray           # (3,)
    features: list               # three unit-norm vectors, finest scale first
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("support count k must be >= 1")


@dataclass
class AgentState:
    """Where the localization agent is and how it got there."""

    position: np.ndarray               # voxel index, clamped in-volume
    offsets_mm: list = field(default_factory=list)
    converged: bool = False

    @property
    def steps(self):
        return len(self.offsets_mm)


def _forward_patches(query, positions, weights, patch_size, want_latent, want_features,
                     max_batch=64):
    patches = [extract_patch(query, pos, patch_size).data for pos in positions]
    latents, feats = [], None
    for i in range(0, len(patches), max_batch):
        x = network.patch_batch(patches[i:i + max_batch])
        lat, f = network.forward(x, weights, want_latent=want_latent,
                                 want_features=want_features)
        if want_latent:
            latents.append(lat.data)
        if want_features:
            chunk = [m.data for m in f]
            feats = chunk if feats is None else [
                np.concatenate([a, b]) for a, b in zip(feats, chunk)]
    lat_out = np.concatenate(latents) if want_latent else None
    return lat_out, feats


def _center_descriptors(feature_maps, row):
    """Descriptor vectors at the patch-center voxel of each scale.

    The full-resolution center index is floor-divided by 2^scale to
    address the coarser maps.
    """
    out = []
    for scale, fmap in enumerate(feature_maps):
        full = np.asarray(fmap.shape[2:]) * 2 ** scale
        center = (full // 2) // 2 ** scale
        out.append(fmap[row, :, center[0], center[1], center[2]].copy())
    return out


def _renormalize(v):
    return v / max(np.linalg.norm(v), EPS_NORM)


def build_support_models(supports, weights, patch_size):
    """Average latent coordinates and descriptors across support volumes.

    ``supports`` is a list of (normalized volume, {landmark name: voxel
    index}); every support must annotate the same landmark set. Returns
    {name: SupportModel}.
    """
    if not supports:
        raise ValueError("need at least one support volume")
    names = list(supports[0][1].keys())
    for _, landmarks in supports:
        if list(landmarks.keys()) != names:
            raise errors.OrderMismatch("support volumes disagree on landmark names")

    latents = {n: [] for n in names}
    descriptors = {n: [] for n in names}
    for vol, landmarks in supports:
        shape = np.asarray(vol.shape)
        positions = []
        for n in names:
            pos = np.asarray(landmarks[n])
            if (pos < 0).any() or (pos >= shape).any():
                raise errors.LandmarkOutOfBounds(
                    f"landmark {n} at {tuple(pos)} outside volume {tuple(shape)}")
            positions.append(pos)
        lat, feats = _forward_patches(vol, positions, weights, patch_size,
                                      want_latent=True, want_features=True)
        for row, n in enumerate(names):
            latents[n].append(lat[row])
            descriptors[n].append(_center_descriptors(feats, row))

    models = {}
    k = len(supports)
    for n in names:
        mean_latent = np.mean(latents[n], axis=0)
        mean_desc = [
            _renormalize(np.mean([d[s] for d in descriptors[n]], axis=0))
            for s in range(3)
        ]
        models[n] = SupportModel(mean_latent, mean_desc, k)
    return models


def build_support_model(supports, weights, patch_size):
    """Single-landmark convenience wrapper: supports are (volume, index)."""
    named = [(vol, {"landmark": idx}) for vol, idx in supports]
    return build_support_models(named, weights, patch_size)["landmark"]


def coarse_localize_many(query, models, weights, r_mm, patch_size,
                         starts=None, max_steps=DEFAULT_MAX_STEPS):
    """Agent walk for a set of landmarks at once; returns {name: AgentState}.

    Each step predicts the bounded offset from the current position's
    latent to the landmark's support latent, converts it to voxels
    (ties toward the lower index) and moves, clamping in-volume. A
    landmark converges when the predicted offset falls below one voxel
    on every axis.
    """
    names = list(models.keys())
    shape = np.asarray(query.shape)
    e = Spacing.of(query.spacing).as_array()
    if starts is None:
        starts = {n: shape // 2 for n in names}
    states = {n: AgentState(np.clip(np.asarray(starts[n]), 0, shape - 1)) for n in names}

    active = list(names)
    for _ in range(max_steps):
        if not active:
            break
        positions = [states[n].position for n in active]
        latents, _ = _forward_patches(query, positions, weights, patch_size,
                                      want_latent=True, want_features=False)
        still_active = []
        for row, n in enumerate(active):
            d = predict_offset(latents[row], models[n].latent, r_mm)
            if (np.abs(d) < e).all():
                states[n].converged = True
                continue
            states[n].offsets_mm.append(d)
            delta = np.ceil(d / e - 0.5).astype(np.int64)
            states[n].position = np.clip(states[n].position + delta, 0, shape - 1)
            still_active.append(n)
        active = still_active
    return states


def coarse_localize(query, model, weights, r_mm, patch_size,
                    start=None, max_steps=DEFAULT_MAX_STEPS):
    """Single-landmark agent walk; returns the final AgentState."""
    starts = None if start is None else {"landmark": start}
    return coarse_localize_many(query, {"landmark": model}, weights, r_mm,
                                patch_size, starts, max_steps)["landmark"]


def _upsampled_similarity(descriptors, feature_maps, row):
    """Sum of per-scale match maps, nearest-upsampled to full resolution."""
    total = None
    for scale, fmap in enumerate(feature_maps):
        sim = np.tensordot(descriptors[scale], fmap[row], axes=([0], [0]))
        for axis in range(3):
            sim = sim.repeat(2 ** scale, axis=axis)
        total = sim if total is None else total + sim
    return total


def mss_refine_many(query, coarse, models, weights, patch_size):
    """Descriptor matching around each coarse point; returns {name: index}.

    The argmax of the aggregated similarity map gives the refined
    position (ties break to the lowest (z,y,x) index); results are
    clamped in-volume.
    """
    names = list(models.keys())
    shape = np.asarray(query.shape)
    positions = [np.asarray(coarse[n]) for n in names]
    _, feats = _forward_patches(query, positions, weights, patch_size,
                                want_latent=False, want_features=True)
    half = np.asarray(patch_size) // 2
    refined = {}
    for row, n in enumerate(names):
        sim = _upsampled_similarity(models[n].features, feats, row)
        best = np.unravel_index(int(np.argmax(sim)), sim.shape)
        pos = positions[row] - half + np.asarray(best)
        refined[n] = np.clip(pos, 0, shape - 1)
    return refined


def mss_refine(query, coarse, model, weights, patch_size):
    return mss_refine_many(query, {"landmark": np.asarray(coarse)},
                           {"landmark": model}, weights, patch_size)["landmark"]


@dataclass
class LocalizationResult:
    position: np.ndarray
    coarse_position: np.ndarray
    steps: int


def localize_landmarks(query, models, weights, r_mm, patch_size,
                       starts=None, max_steps=DEFAULT_MAX_STEPS, refine=True):
    """Coarse agent walk plus optional refinement for every landmark."""
    states = coarse_localize_many(query, models, weights, r_mm, patch_size,
                                  starts, max_steps)
    coarse = {n: s.position for n, s in states.items()}
    final = mss_refine_many(query, coarse, models, weights, patch_size) \
        if refine else coarse
    return {
        n: LocalizationResult(np.asarray(final[n]), np.asarray(coarse[n]),
                              states[n].steps)
        for n in models
    }


def localize_organ_points(query, models, weights, r_mm, patch_size,
                          segments=1, **kwargs):
    """Localize an organ's extreme-point set (6 landmarks per segment).

    ``models`` must hold exactly ``6 * segments`` landmark models;
    raises GroupingError otherwise.
    """
    if len(models) != 6 * segments:
        raise errors.GroupingError(
            f"expected {6 * segments} landmark models, got {len(models)}")
    return localize_landmarks(query, models, weights, r_mm, patch_size, **kwargs)
