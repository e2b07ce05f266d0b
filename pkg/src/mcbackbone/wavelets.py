"""Stationary (undecimated) wavelet transform of multi-node time-series panels.

The transform is the periodic SWT: at level j the orthonormal analysis pair
is upsampled by 2^(j-1) and applied as a circular cross-correlation, so every
coefficient block keeps the full signal length.  A panel decomposed into J
scales consists of J-1 detail blocks plus (by default) the final scaling
block as the coarsest layer.  With orthonormal filters the analysis steps are
inverted exactly by the dual synthesis step with a 1/2 averaging per level,
which keeps the transform perfectly invertible and shift-covariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InvalidFilter, LengthNotDivisible, MissingApproximation, ShapeMismatch

# Orthonormal Daubechies lowpass filters, ascending-power order, sum = sqrt(2).
# Embedded to 15+ significant digits so tests are bit-stable.
_LOWPASS = {
    "db1": (
        0.70710678118654752,
        0.70710678118654752,
    ),
    "db2": (
        -0.12940952255126038,
        0.22414386804201338,
        0.83651630373780791,
        0.48296291314453414,
    ),
    "db3": (
        0.035226291885709537,
        -0.085441273882026662,
        -0.13501102001025459,
        0.45987750211849157,
        0.80689150931109258,
        0.33267055295008262,
    ),
    "db4": (
        -0.010597401785069032,
        0.0328830116668852,
        0.030841381835560764,
        -0.18703481171909308,
        -0.027983769416859854,
        0.63088076792985891,
        0.71484657055291565,
        0.2303778133088965,
    ),
    "db5": (
        0.0033357252854737713,
        -0.012580751999081999,
        -0.0062414902127982743,
        0.077571493840045714,
        -0.032244869584638375,
        -0.24229488706638203,
        0.13842814590132073,
        0.72430852843777293,
        0.60382926979718967,
        0.16010239797419291,
    ),
}

SUPPORTED_FILTERS = tuple(sorted(_LOWPASS))


@dataclass(frozen=True)
class WaveletFilterPair:
    """Orthonormal analysis filter pair (lowpass g, highpass h)."""

    lowpass: tuple[float, ...]
    highpass: tuple[float, ...]
    name: str = ""

    def validate(self):
        g, h = np.asarray(self.lowpass), np.asarray(self.highpass)
        if g.size != h.size or g.size < 2:
            raise InvalidFilter(
                f"filter pair '{self.name}': lengths {g.size}/{h.size} invalid"
            )
        if abs(h.sum()) > 1e-12:
            raise InvalidFilter(
                f"filter pair '{self.name}': highpass sums to {h.sum():.3e}, not 0"
            )
        length = g.size
        mirror = np.array([(-1) ** l * g[length - 1 - l] for l in range(length)])
        if np.max(np.abs(h - mirror)) > 1e-12:
            raise InvalidFilter(
                f"filter pair '{self.name}': quadrature-mirror relation violated"
            )
        return self


def quadrature_mirror(lowpass) -> tuple[float, ...]:
    """Highpass from lowpass via h[l] = (-1)^l g[L-1-l]."""
    g = tuple(lowpass)
    length = len(g)
    return tuple((-1) ** l * g[length - 1 - l] for l in range(length))


def get_filter(name: str) -> WaveletFilterPair:
    """Look up one of the embedded orthonormal filter pairs (db1..db5)."""
    try:
        low = _LOWPASS[name]
    except KeyError:
        raise InvalidFilter(
            f"unknown filter '{name}'; supported: {', '.join(SUPPORTED_FILTERS)}"
        ) from None
    return WaveletFilterPair(low, quadrature_mirror(low), name).validate()


@dataclass
class SubjectPanel:
    """One subject's K x N panel (rows = nodes, columns = time samples)."""

    data: np.ndarray
    dt: float = 1.0
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def validate(self):
        if not np.isfinite(self.data).all():
            raise ShapeMismatch(f"panel '{self.subject_id}' contains non-finite entries")
        return self


@dataclass
class MultiscalePanel:
    """Per-scale coefficient blocks of one subject, each of shape K x N.

    Block j (0-based) holds the level-(j+1) detail coefficients; when
    ``approx_included`` the last block is the scaling-coefficient block of the
    deepest level, treated as the coarsest scale.
    """

    blocks: list[np.ndarray]
    subject_id: str = ""
    filter_name: str = ""
    approx_included: bool = True
    dt: float = 1.0

    def __post_init__(self):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks]

    @property
    def scale_count(self) -> int:
        return len(self.blocks)

    @property
    def n_nodes(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def n_samples(self) -> int:
        return self.blocks[0].shape[1]

    def validate(self):
        shape = self.blocks[0].shape
        for j, block in enumerate(self.blocks):
            if block.shape != shape:
                raise ShapeMismatch(
                    f"block {j} has shape {block.shape}, expected {shape}"
                )
            if not np.isfinite(block).all():
                raise ShapeMismatch(f"block {j} contains non-finite entries")
        return self

    def stacked(self) -> np.ndarray:
        """Scale-major (J*K) x N stack of the coefficient blocks."""
        return np.vstack(self.blocks)


def scale_frequency_band(scale: int) -> tuple[float, float]:
    """Frequency band [1/2^(j+1), 1/2^j] (cycles/sample) of 0-based scale index."""
    j = scale + 1
    return 1.0 / 2 ** (j + 1), 1.0 / 2**j


def _analysis(signal: np.ndarray, taps, stride: int) -> np.ndarray:
    # out[n] = sum_l taps[l] * signal[(n + stride*l) mod N]
    out = taps[0] * signal
    for l in range(1, len(taps)):
        out = out + taps[l] * np.roll(signal, -stride * l, axis=-1)
    return out


def _synthesis(approx: np.ndarray, detail: np.ndarray, filters: WaveletFilterPair,
               stride: int) -> np.ndarray:
    g, h = filters.lowpass, filters.highpass
    out = g[0] * approx + h[0] * detail
    for l in range(1, len(g)):
        out = out + g[l] * np.roll(approx, stride * l, axis=-1)
        out = out + h[l] * np.roll(detail, stride * l, axis=-1)
    return 0.5 * out


def _filtering_depth(levels: int, include_approx: bool) -> int:
    return levels - 1 if include_approx else levels


def swt_decompose(panel: SubjectPanel, filters: WaveletFilterPair, levels: int,
                  include_approx: bool = True) -> MultiscalePanel:
    """Decompose a panel into ``levels`` same-length coefficient blocks.

    With ``include_approx`` (default) the filter bank runs levels-1 times and
    the final scaling block becomes the coarsest layer; ``levels=1`` is then
    the identity.  Otherwise all ``levels`` blocks are detail blocks and the
    approximation is dropped, which makes the result non-invertible.

    Raises LengthNotDivisible unless N is a multiple of 2^depth, where depth
    is the number of filter-bank applications.
    """
    if levels < 1:
        raise LengthNotDivisible(f"levels must be >= 1, got {levels}")
    filters.validate()
    panel.validate()
    depth = _filtering_depth(levels, include_approx)
    n = panel.n_samples
    if n % (1 << depth) != 0:
        raise LengthNotDivisible(
            f"N={n} is not divisible by 2^{depth} for a depth-{depth} decomposition"
        )
    approx = panel.data.copy()
    blocks = []
    for level in range(1, depth + 1):
        stride = 1 << (level - 1)
        blocks.append(_analysis(approx, filters.highpass, stride))
        approx = _analysis(approx, filters.lowpass, stride)
    if include_approx:
        blocks.append(approx)
    return MultiscalePanel(
        blocks,
        subject_id=panel.subject_id,
        filter_name=filters.name,
        approx_included=include_approx,
        dt=panel.dt,
    )


def swt_reconstruct(ms: MultiscalePanel, filters: WaveletFilterPair) -> SubjectPanel:
    """Invert :func:`swt_decompose`.  Requires the approximation block."""
    if not ms.approx_included:
        raise MissingApproximation(
            "cannot reconstruct: the coarsest scaling block was dropped"
        )
    filters.validate()
    ms.validate()
    depth = ms.scale_count - 1
    approx = ms.blocks[-1].copy()
    for level in range(depth, 0, -1):
        stride = 1 << (level - 1)
        approx = _synthesis(approx, ms.blocks[level - 1], filters, stride)
    return SubjectPanel(approx, dt=ms.dt, subject_id=ms.subject_id)


@dataclass
class GaussianityReport:
    """Per-(scale, node) moment diagnostics of a multiscale panel."""

    mean: np.ndarray               # (J, K)
    std: np.ndarray                # (J, K)
    skewness: np.ndarray           # (J, K), 0 where degenerate
    excess_kurtosis: np.ndarray    # (J, K), 0 where degenerate
    zero_variance: np.ndarray      # (J, K) bool
    n_samples: int
    flags: list[str] = field(default_factory=list)


def gaussianity_probe(ms: MultiscalePanel) -> GaussianityReport:
    """Moment summary used to sanity-check Gaussian behaviour of coefficients.

    Degenerate (zero-variance) blocks are flagged instead of producing a
    division by zero.
    """
    j, k = ms.scale_count, ms.n_nodes
    mean = np.zeros((j, k))
    std = np.zeros((j, k))
    skew = np.zeros((j, k))
    kurt = np.zeros((j, k))
    degenerate = np.zeros((j, k), dtype=bool)
    flags = []
    for scale, block in enumerate(ms.blocks):
        mean[scale] = block.mean(axis=1)
        std[scale] = block.std(axis=1)
        for node in range(k):
            if std[scale, node] < 1e-12:
                degenerate[scale, node] = True
                flags.append(f"zero_variance:scale{scale}:node{node}")
            else:
                row = block[node]
                skew[scale, node] = stats.skew(row)
                kurt[scale, node] = stats.kurtosis(row)
    return GaussianityReport(mean, std, skew, kurt, degenerate, ms.n_samples, flags)
