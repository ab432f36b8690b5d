"""Class-specific augmentation: built-in CAM-style masks plus a plugin hook.

The built-in path derives a per-class saliency map from the model, keeps the
top fraction of activations as a binary mask, and blends the original
features: masked-on features pass through, masked-off ones are scaled by a
blur factor eps (eps=1 is the identity, eps=0 zeroes them). Grid features use
the classic channel-weighted feature-map saliency of a global-average-pool
classifier; flat features use input-times-gradient attribution for the class
logit, which reduces to classifier-weight-times-feature for a linear head.

Near-uniform saliency maps (range < 1e-6) are discarded rather than
thresholded. An external editor can replace the built-in path through the
EditorPlugin contract: a callable from (features, class description) to
same-shaped features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .data import ParameterError, PartialSample, PLLDataset
from .numkernel import Tensor, backward, forward

__all__ = [
    "ContractViolation",
    "PluginContractError",
    "PluginNotConfiguredError",
    "ClassMask",
    "AugmentedSample",
    "AugmentConfig",
    "AugmentationSet",
    "EditorPlugin",
    "class_activation_mask",
    "apply_blur_mix",
    "refresh_augmentations",
    "external_edit",
    "save_augmentations",
    "load_augmentations",
]

UNIFORM_MAP_EPS = 1e-6
SOURCE_BUILTIN = "builtin-cam"
SOURCE_PLUGIN = "external-plugin"


class ContractViolation(ValueError):
    """A caller broke an augmentation precondition (e.g. s not a candidate)."""


class PluginContractError(ValueError):
    """An external editor returned features with the wrong dimensions."""


class PluginNotConfiguredError(RuntimeError):
    """external_edit was called without a registered plugin."""


class EditorPlugin(Protocol):
    """External editor contract: (features, class description) -> features."""

    def __call__(self, features: np.ndarray, description: str) -> np.ndarray: ...


@dataclass(frozen=True)
class ClassMask:
    """Binary saliency indicator for one (sample, guiding label) pair."""

    indicator: np.ndarray
    guiding_label: int
    saliency_fraction: float


@dataclass(frozen=True)
class AugmentedSample:
    """A class-specific augmentation tagged with its parent and guide."""

    parent_index: int
    guiding_label: int
    features: Tensor
    source: str = SOURCE_BUILTIN


@dataclass(frozen=True)
class AugmentConfig:
    top_fraction: float = 0.3
    epsilon: float = 0.3
    smooth: bool | None = None  # None = auto: smooth grids, not flat vectors

    def __post_init__(self):
        if not (0.0 < self.top_fraction <= 1.0):
            raise ParameterError("top_fraction must lie in (0, 1]")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ParameterError("epsilon must lie in [0, 1]")


@dataclass
class AugmentationSet:
    """All augmentations of one refresh, ordered by (parent index, label)."""

    samples: list = field(default_factory=list)
    discards: list = field(default_factory=list)  # (parent_index, label)

    def buckets(self) -> dict:
        """Partition sample indices by guiding label."""
        out: dict[int, list[int]] = {}
        for idx, aug in enumerate(self.samples):
            out.setdefault(aug.guiding_label, []).append(idx)
        return out

    def by_parent(self) -> dict:
        out: dict[int, list[int]] = {}
        for idx, aug in enumerate(self.samples):
            out.setdefault(aug.parent_index, []).append(idx)
        return out


def _query_params(model):
    """Accept a ModelPair-like object or bare BackboneParams."""
    return getattr(model, "query", model)


def _top_fraction_mask(saliency: np.ndarray, top_fraction: float) -> np.ndarray:
    """Binary mask keeping round(top_fraction * size) entries.

    Ranking is by value descending with ties broken by flat index, so the
    selection is deterministic.
    """
    flat = saliency.reshape(-1)
    k = int(round(top_fraction * flat.size))
    mask = np.zeros(flat.size, dtype=np.float64)
    if k > 0:
        order = np.lexsort((np.arange(flat.size), -flat))
        mask[order[:k]] = 1.0
    return mask.reshape(saliency.shape)


def _resize_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = grid.shape
    rows = (np.arange(out_h) * h // out_h).clip(0, h - 1)
    cols = (np.arange(out_w) * w // out_w).clip(0, w - 1)
    return grid[np.ix_(rows, cols)]


def class_activation_mask(model, sample, s: int, top_fraction: float = 0.3):
    """Saliency mask for guiding class s, or None when the map is near-uniform.

    Grid inputs: ReLU of the classifier-weighted channel sum of the conv
    feature maps, min-max normalized, resized to the input resolution, and
    thresholded at the top_fraction quantile (spatially, broadcast over
    channels). Flat inputs: the per-feature product of the input with the
    gradient of logit s, thresholded the same way.
    """
    params = _query_params(model)
    if isinstance(sample, PartialSample):
        if s not in sample.candidates:
            raise ContractViolation(f"guiding label {s} is not a candidate of the sample")
        x = sample.features.array
    else:
        x = np.asarray(sample, dtype=np.float64)
    if not (0 <= s < params.config.num_classes):
        raise ContractViolation(f"guiding label {s} out of range")

    if params.config.is_grid:
        res = forward(params, x)
        fmaps = res.cache.fmaps[0]  # (H', W', C)
        weights = params.cls_w[:, s]
        cam = np.maximum(fmaps @ weights, 0.0)
        if cam.max() - cam.min() < UNIFORM_MAP_EPS:
            return None
        cam = (cam - cam.min()) / (cam.max() - cam.min())
        h, w, ch = params.config.input_dims
        cam = _resize_nearest(cam, h, w)
        spatial = _top_fraction_mask(cam, top_fraction)
        indicator = np.repeat(spatial[:, :, None], ch, axis=2)
    else:
        res = forward(params, x)
        one_hot = np.zeros(params.config.num_classes)
        one_hot[s] = 1.0
        _, d_input = backward(params, res, d_logits=one_hot)
        attribution = d_input * x
        if attribution.max() - attribution.min() < UNIFORM_MAP_EPS:
            return None
        lo, hi = attribution.min(), attribution.max()
        attribution = (attribution - lo) / (hi - lo)
        indicator = _top_fraction_mask(attribution, top_fraction)

    return ClassMask(indicator=indicator, guiding_label=int(s),
                     saliency_fraction=float(top_fraction))


_BLUR_TAPS = None


def _blur_taps():
    global _BLUR_TAPS
    if _BLUR_TAPS is None:
        t = np.arange(-2, 3, dtype=np.float64)
        taps = np.exp(-0.5 * t * t)  # kernel size 5, sigma 1.0
        _BLUR_TAPS = taps / taps.sum()
    return _BLUR_TAPS


def _gaussian_blur_grid(x: np.ndarray) -> np.ndarray:
    """Separable 5-tap Gaussian (sigma 1.0) per channel, reflect padding."""
    taps = _blur_taps()
    out = x.astype(np.float64, copy=True)
    for axis in (0, 1):
        padded = np.pad(out, [(2, 2) if a == axis else (0, 0) for a in range(out.ndim)],
                        mode="reflect")
        acc = np.zeros_like(out)
        for k, tap in enumerate(taps):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(k, k + out.shape[axis])
            acc += tap * padded[tuple(sl)]
        out = acc
    return out


def apply_blur_mix(x, mask: ClassMask, eps: float, smooth: bool = False,
                   parent_index: int = -1) -> AugmentedSample:
    """Blend per the binary mask: keep masked-on features, scale others by eps.

    With a binary indicator this is exactly a*x + eps*(1-a)*x, evaluated as a
    selection so eps=1 reproduces the input bit-for-bit. Optional Gaussian
    smoothing (5x5, sigma 1.0) applies to grid features only.
    """
    if not (0.0 <= eps <= 1.0):
        raise ParameterError(f"eps must lie in [0, 1], got {eps}")
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.shape != mask.indicator.shape:
        raise ContractViolation(
            f"mask shape {mask.indicator.shape} does not match features {arr.shape}"
        )
    mixed = np.where(mask.indicator == 1.0, arr, eps * arr)
    if smooth:
        if arr.ndim != 3:
            raise ParameterError("smoothing applies to grid features only")
        mixed = _gaussian_blur_grid(mixed)
    return AugmentedSample(
        parent_index=int(parent_index),
        guiding_label=mask.guiding_label,
        features=Tensor.from_array(mixed),
        source=SOURCE_BUILTIN,
    )


def refresh_augmentations(dataset: PLLDataset, model, config: AugmentConfig | None = None
                          ) -> AugmentationSet:
    """One augmentation per (sample, candidate label), minus discarded masks.

    Deterministic given the model snapshot; output ordered by (sample index,
    guiding label). Discards are recorded per (sample, label).
    """
    config = config or AugmentConfig()
    params = _query_params(model)
    smooth = config.smooth
    if smooth is None:
        smooth = params.config.is_grid
    out = AugmentationSet()
    for i in range(len(dataset)):
        x = dataset.features[i]
        for s in np.flatnonzero(dataset.candidates[i]):
            mask = class_activation_mask(params, x, int(s), config.top_fraction)
            if mask is None:
                out.discards.append((i, int(s)))
                continue
            out.samples.append(
                apply_blur_mix(x, mask, config.epsilon, smooth=smooth, parent_index=i)
            )
    return out


def external_edit(plugin, x, s: int, class_names) -> AugmentedSample:
    """Run a registered editor plugin and wrap its output, dimension-checked."""
    if plugin is None:
        raise PluginNotConfiguredError("no editor plugin configured")
    if s not in range(len(class_names)):
        raise ContractViolation(f"no class description for label {s}")
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    edited = np.asarray(plugin(arr, class_names[s]), dtype=np.float64)
    if edited.shape != arr.shape:
        name = getattr(plugin, "__name__", repr(plugin))
        raise PluginContractError(
            f"plugin {name} returned shape {edited.shape}, expected {arr.shape}"
        )
    return AugmentedSample(
        parent_index=-1,
        guiding_label=int(s),
        features=Tensor.from_array(edited),
        source=SOURCE_PLUGIN,
    )


# ---------------------------------------------------------------------------
# Optional cache file: dataset-style records with the augmentation columns
# appended. Header mirrors the dataset header; each record is
#   <features csv>|<parent index>|<guiding label>|<source>


def save_augmentations(aset: AugmentationSet, path, num_classes: int) -> None:
    if aset.samples:
        dims = aset.samples[0].features.shape
    else:
        dims = ()
    dims_s = ",".join(str(d) for d in dims)
    lines = [f"PLLAUG v1 n={len(aset.samples)} c={num_classes} dims={dims_s}"]
    for aug in aset.samples:
        feats = ",".join(repr(float(v)) for v in aug.features.values)
        lines.append(f"{feats}|{aug.parent_index}|{aug.guiding_label}|{aug.source}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_augmentations(path) -> AugmentationSet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    if len(header) != 5 or header[0] != "PLLAUG" or header[1] != "v1":
        raise ValueError(f"malformed augmentation header: {lines[0]!r}")
    dims_field = header[4].removeprefix("dims=")
    dims = tuple(int(d) for d in dims_field.split(",")) if dims_field else ()
    out = AugmentationSet()
    for line in lines[1:]:
        if not line.strip():
            continue
        feats_s, parent_s, label_s, source = line.split("|")
        feats = np.array([float(v) for v in feats_s.split(",")]).reshape(dims)
        out.samples.append(AugmentedSample(
            parent_index=int(parent_s),
            guiding_label=int(label_s),
            features=Tensor.from_array(feats),
            source=source,
        ))
    return out
