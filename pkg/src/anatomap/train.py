"""Self-supervised training.

Two objectives drive the network:

* Offset regression: the bounded prediction ``r * tanh(p_s - p_q)``
  must match the physical offset between two patch centroids from the
  same volume, which pulls every subject onto one shared latent
  coordinate system.
* Multi-scale similarity: the per-voxel descriptor of a point must win
  a softmax over the whole augmented view of the same patch at each of
  the three feature scales, scored with a one-hot cross entropy.

The total loss is the unweighted sum; batches average over pairs.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import errors
from .augment import AugmentConfig, resample_window, sample_transform
from .nn import network
from .nn import tensor as T
from .nn.optim import Adam
from .volume import Patch, Spacing, extract_patch, normalize_hu

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    r_mm: tuple = (192.0, 192.0, 192.0)
    patch_size: tuple = (16, 16, 16)
    large_patch_size: tuple = (32, 32, 32)
    batch_size: int = 8
    epochs: int = 30
    learning_rate: float = 1e-3
    mss_points: int = 4          # match points sampled from each patch of a pair
    interior_margin: int = 4     # keep match points away from patch borders
    pairs_per_volume: int = 2    # training pairs drawn per volume per epoch
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if any(s % 16 for s in self.patch_size):
            raise ValueError(f"patch sides must be divisible by 16, got {self.patch_size}")
        if any(v <= 0 for v in self.r_mm):
            raise ValueError("offset bound r must be positive")
        if any(l < s for l, s in zip(self.large_patch_size, self.patch_size)):
            raise ValueError("large patch must not be smaller than the crop patch")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "augment" in raw:
            raw["augment"] = AugmentConfig(**raw["augment"])
        for key in ("r_mm", "patch_size", "large_patch_size"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class SamplePair:
    """Two crops of one volume plus their augmented counterparts.

    The crops from the augmented large patches use their own random
    origins: a match point's location inside the original crop then
    says nothing about its location inside the augmented crop, so the
    similarity task cannot be solved by absolute position alone.
    """

    x_q: Patch
    x_s: Patch
    xa_q: Patch
    xa_s: Patch
    t_q: object
    t_s: object
    origin_q: np.ndarray   # crop origins inside the large patch
    origin_s: np.ndarray
    origin_aq: np.ndarray  # crop origins inside the augmented large patch
    origin_as: np.ndarray
    spacing: Spacing

    def _map(self, pt, transform, origin, origin_aug):
        large_pt = np.asarray(pt, dtype=np.float64) + origin
        return transform.map_points(large_pt[None])[0] - origin_aug

    def map_point_q(self, pt):
        """Voxel coords in x_q -> float coords in the augmented crop."""
        return self._map(pt, self.t_q, self.origin_q, self.origin_aq)

    def map_point_s(self, pt):
        return self._map(pt, self.t_s, self.origin_s, self.origin_as)


def offset_ground_truth(c_q, c_s, spacing):
    """Physical offset d' = (c_s - c_q) * e, millimeters."""
    e = Spacing.of(spacing).as_array()
    return (np.asarray(c_s, np.float64) - np.asarray(c_q, np.float64)) * e


def predict_offset(p_q, p_s, r_mm):
    """Bounded offset prediction r * tanh(p_s - p_q); lies strictly in (-r, r)."""
    r = np.asarray(r_mm, np.float64)
    if (r <= 0).any():
        raise ValueError("offset bound r must be positive")
    return r * np.tanh(np.asarray(p_s, np.float64) - np.asarray(p_q, np.float64))


def loss_uam(d_pred, d_true):
    """Squared L2 norm of the offset error (summed over components)."""
    d = np.asarray(d_pred, np.float64) - np.asarray(d_true, np.float64)
    return float((d * d).sum())


def target_index(point, scale, map_shape):
    """Half-up-rounded, clamped voxel index of a point at a given scale."""
    pt = np.asarray(point, dtype=np.float64)
    idx = np.floor(pt / (2 ** scale) + 0.5).astype(np.int64)
    hi = np.asarray(map_shape, dtype=np.int64) - 1
    return tuple(int(v) for v in np.clip(idx, 0, hi))


def mss_target(point, scale, map_shape, patch_shape=None):
    """One-hot spatial target map: 1 at the scaled, rounded point."""
    if patch_shape is None:
        patch_shape = tuple(s * 2 ** scale for s in map_shape)
    pt = np.asarray(point, dtype=np.float64)
    if (pt < 0).any() or (pt > np.asarray(patch_shape) - 1).any():
        raise errors.PointOutsidePatch(
            f"point {point} outside patch {tuple(patch_shape)}")
    out = np.zeros(map_shape, dtype=np.float32)
    out[target_index(point, scale, map_shape)] = 1.0
    return out


def _point_ce(f_maps, fa_maps, b_src, b_aug, point, point_aug):
    """Cross entropy of one match point summed over the three scales."""
    total = None
    for scale in range(3):
        fmap = f_maps[scale]
        map_shape = fmap.data.shape[2:]
        src_idx = target_index(point, scale, map_shape)
        vec = T.gather_voxel(fmap, b_src, src_idx)
        sim = T.channel_dot(vec, fa_maps[scale], b_aug)
        prob = T.clip(T.softmax_spatial(sim), PROB_CLAMP, 1.0 - PROB_CLAMP)
        hot = target_index(point_aug, scale, map_shape)
        flat_hot = int(np.ravel_multi_index(hot, map_shape))
        hit = T.mul(T.log(T.pick(prob, flat_hot)), -1.0)
        mask = np.ones(map_shape, dtype=prob.dtype)
        mask[hot] = 0.0
        one_minus = T.add(T.mul(prob, -1.0), 1.0)
        miss = T.mul(T.tsum(T.mul(T.log(one_minus), T.Tensor(mask))), -1.0)
        term = T.add(hit, miss)
        total = term if total is None else T.add(total, term)
    return total


def loss_mss(f_maps, fa_maps, b_src, b_aug, point_pairs):
    """Mean cross entropy over match points (Tensor scalar).

    ``point_pairs`` is a list of (point in source crop, float point in
    augmented crop); points outside the patch raise PointOutsidePatch.
    """
    if not point_pairs:
        raise ValueError("loss_mss needs at least one match point")
    patch_shape = f_maps[0].data.shape[2:]
    total = None
    for point, point_aug in point_pairs:
        pa = np.asarray(point_aug, np.float64)
        if (pa < 0).any() or (pa > np.asarray(patch_shape) - 1).any():
            raise errors.PointOutsidePatch(
                f"mapped point {point_aug} outside patch {patch_shape}")
        ce = _point_ce(f_maps, fa_maps, b_src, b_aug, point, point_aug)
        total = ce if total is None else T.add(total, ce)
    return T.mul(total, 1.0 / len(point_pairs))


def loss_total(l_uam, l_mss):
    """Unweighted sum of the two objectives."""
    return l_uam + l_mss


def sample_training_pair(volume, config, rng):
    """Draw one training pair from a normalized volume.

    Two large patches at uniform random centers (confined so they fit
    inside the volume); one small crop from each original large patch
    and an independently placed crop from each augmented large patch.
    """
    if volume.domain != "normalized":
        raise ValueError("training samples expect normalized volumes")
    shape = np.asarray(volume.shape)
    large = np.asarray(config.large_patch_size)
    small = np.asarray(config.patch_size)
    if (shape < large).any():
        raise errors.VolumeTooSmall(
            f"volume {tuple(shape)} smaller than large patch {tuple(large)}")

    lo = large // 2
    hi = shape - large + large // 2  # inclusive
    centers = np.stack([rng.integers(lo[i], hi[i] + 1, size=2) for i in range(3)], axis=1)
    aug_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=2)]
    origins = np.stack([rng.integers(0, large[i] - small[i] + 1, size=4) for i in range(3)], axis=1)

    patches, augmented, transforms = [], [], []
    for k in range(2):
        big = extract_patch(volume, centers[k], tuple(large))
        t = sample_transform(big.shape, aug_seeds[k], config.augment)
        o, oa = origins[k], origins[k + 2]
        sl = tuple(slice(int(o[i]), int(o[i] + small[i])) for i in range(3))
        centroid = centers[k] - large // 2 + o + small // 2
        patches.append(Patch(big.data[sl], centroid, volume.spacing))
        aug_data = resample_window(big.data, t, oa, tuple(small))
        augmented.append(Patch(aug_data, centroid, volume.spacing))
        transforms.append(t)

    return SamplePair(
        x_q=patches[0], x_s=patches[1], xa_q=augmented[0], xa_s=augmented[1],
        t_q=transforms[0], t_s=transforms[1],
        origin_q=origins[0].astype(np.float64), origin_s=origins[1].astype(np.float64),
        origin_aq=origins[2].astype(np.float64), origin_as=origins[3].astype(np.float64),
        spacing=volume.spacing,
    )


def _sample_match_points(pair, config, rng):
    """Interior points of x_q and x_s with valid augmented counterparts.

    Points whose mapped location leaves the augmented crop are redrawn
    (up to 20 tries) and skipped after that.
    """
    small = np.asarray(config.patch_size)
    m = config.interior_margin
    out_q, out_s = [], []
    for mapper, sink in ((pair.map_point_q, out_q), (pair.map_point_s, out_s)):
        for _ in range(config.mss_points):
            for _attempt in range(20):
                pt = np.array([rng.integers(m, small[i] - m) for i in range(3)])
                mapped = mapper(pt)
                if (mapped >= 0).all() and (mapped <= small - 1).all():
                    sink.append((pt, mapped))
                    break
    return out_q, out_s


def sample_batch(volumes, config, rng):
    """Draw a batch of pairs plus their match points."""
    pairs = []
    for _ in range(config.batch_size):
        vol = volumes[int(rng.integers(0, len(volumes)))]
        pairs.append(sample_training_pair(vol, config, rng))
    points = [_sample_match_points(p, config, rng) for p in pairs]
    return pairs, points


def batch_losses(volumes, config, weights, rng, dtype=np.float32):
    """Sample a batch, run the network, and build the combined loss graph."""
    pairs, points = sample_batch(volumes, config, rng)
    return pair_batch_losses(pairs, points, config, weights, dtype)


def pair_batch_losses(pairs, points, config, weights, dtype=np.float32):
    """Loss graph for a fixed set of pairs and match points.

    Returns (loss Tensor, mse value, ce value, pair count).
    """
    n = len(pairs)
    stack = [p.x_q for p in pairs] + [p.x_s for p in pairs] + \
            [p.xa_q for p in pairs] + [p.xa_s for p in pairs]
    x = network.patch_batch([p.data for p in stack], dtype=dtype)
    latent, feats = network.forward(x, weights)

    r = np.asarray(config.r_mm, dtype=dtype)
    d_true = np.stack([
        offset_ground_truth(p.x_q.centroid, p.x_s.centroid, p.spacing)
        for p in pairs
    ]).astype(dtype)
    p_q = T.take_rows(latent, np.arange(0, n))
    p_s = T.take_rows(latent, np.arange(n, 2 * n))
    d_pred = T.mul(T.tanh(T.sub(p_s, p_q)), np.broadcast_to(r, (n, 3)).copy())
    err = T.sub(d_pred, T.Tensor(d_true))
    l_mse = T.mul(T.tsum(T.square(err)), 1.0 / n)

    ce_terms = []
    for k, (pts_q, pts_s) in enumerate(points):
        per_pair = []
        if pts_q:
            per_pair.append(loss_mss(feats, feats, k, 2 * n + k, pts_q))
        if pts_s:
            per_pair.append(loss_mss(feats, feats, n + k, 3 * n + k, pts_s))
        if per_pair:
            pair_ce = per_pair[0]
            for extra in per_pair[1:]:
                pair_ce = T.add(pair_ce, extra)
            ce_terms.append(T.mul(pair_ce, 1.0 / len(per_pair)))
    if ce_terms:
        l_ce = ce_terms[0]
        for extra in ce_terms[1:]:
            l_ce = T.add(l_ce, extra)
        l_ce = T.mul(l_ce, 1.0 / len(ce_terms))
    else:
        l_ce = T.Tensor(np.zeros((), dtype=dtype))

    loss = T.add(l_mse, l_ce)
    return loss, float(l_mse.data), float(l_ce.data), n


def check_offset_bound(volumes, config):
    """The bound r must cover the largest offset the cohort can demand."""
    demand = np.zeros(3)
    for vol in volumes:
        span = (np.asarray(vol.shape) - np.asarray(config.patch_size)) * \
            Spacing.of(vol.spacing).as_array()
        demand = np.maximum(demand, span)
    if (np.asarray(config.r_mm) < demand).any():
        raise ValueError(
            f"offset bound r={config.r_mm} does not cover the cohort's "
            f"largest feasible offset {tuple(demand)}")


def train(cohort, config, weights=None, epoch_callback=None):
    """Run the training loop; returns (weights, history).

    ``cohort`` holds Volumes (raw volumes are normalized on entry).
    ``history`` is a list of per-epoch dicts with mean mse/ce/total.
    Deterministic for a fixed config seed.
    """
    if not cohort:
        raise ValueError("cohort must not be empty")
    volumes = []
    for item in cohort:
        vol = item[0] if isinstance(item, tuple) else item
        volumes.append(normalize_hu(vol) if vol.domain == "raw_hu" else vol)
    check_offset_bound(volumes, config)

    if weights is None:
        weights = network.NetworkWeights.initialize(seed=config.seed)
    opt = Adam(weights, lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])

    batches_per_epoch = max(1, (len(volumes) * config.pairs_per_volume) // config.batch_size)
    history = []
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for _ in range(batches_per_epoch):
            weights.zero_grad()
            loss, mse, ce, _ = batch_losses(volumes, config, weights, rng)
            if not np.isfinite(loss.data):
                raise errors.NanLoss(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            sums += (mse, ce, mse + ce)
        entry = {
            "epoch": epoch,
            "l_mse": sums[0] / batches_per_epoch,
            "l_ce": sums[1] / batches_per_epoch,
            "l_total": sums[2] / batches_per_epoch,
        }
        history.append(entry)
        if epoch_callback is not None:
            epoch_callback(entry, weights)
    return weights, history
